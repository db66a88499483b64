//! Pretraining of the frozen teacher (denoising loss on ground-truth view
//! sets) and of the reconstructor (render loss on ground-truth views).

use gradtape::{Adam, Graph};
use rand::Rng;

use crate::alignment::{recon_loss, TrainBatch};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::pipeline::Models;
use crate::recon::ViewGeometry;
use crate::schedule::{q_sample, to_signal, NoiseDraw, NoiseSchedule};
use crate::seed;

fn finite(what: &str, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.to_string(), step })
    }
}

/// One denoising-loss update of the base (teacher) weights at uniformly
/// drawn per-scene timesteps. Returns the loss on the network's raw target
/// before the update.
pub fn teacher_step(
    models: &mut Models,
    opt: &mut Adam<f32>,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    step: usize,
    step_seed: u64,
) -> Result<f64> {
    let b = batch.scenes();
    let mut rng = seed::rng(seed::derive(step_seed, "teacher.t", 0));
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=s.steps())).collect();
    let x0 = to_signal(&batch.x_gt);
    let noise = NoiseDraw::new(batch.x_gt.shape(), seed::derive(step_seed, "teacher.eps", 0));
    // Per-scene timesteps: noise each scene's views separately.
    let per = x0.numel() / b;
    let mut x_t = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (a, sd) = s.coefficients(t);
        let (a, sd) = (a as f32, sd as f32);
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &noise.eps.data()[i * per..(i + 1) * per];
        for ((o, &x), &e) in x_t.data_mut()[i * per..(i + 1) * per].iter_mut().zip(xs).zip(es) {
            *o = a * x + sd * e;
        }
    }
    let cond = batch.conditioning();
    let g = Graph::new();
    let base = models.mvg.base.bind(&g, true);
    let target = models.denoiser.raw_target(&x0, &noise.eps, &ts)?;
    let raw = models.denoiser.forward_raw(
        &g,
        Ctx::plain(&base),
        g.constant(x_t),
        &ts,
        g.constant(cond.x_c.clone()),
        &batch.poses,
    )?;
    let loss = g.mean_all(g.sqr(g.sub(raw, g.constant(target))));
    let value = finite("l_teacher", g.item(loss) as f64, step)?;
    let mut grads = g.backward(loss);
    opt.step(&mut models.mvg.base, &base.grads(&mut grads));
    Ok(value)
}

/// One render-loss update of the reconstructor fed with ground-truth views.
pub fn recon_step(
    models: &mut Models,
    opt: &mut Adam<f32>,
    batch: &TrainBatch,
    geometry: &ViewGeometry<f32>,
    step: usize,
) -> Result<f64> {
    let g = Graph::new();
    let bound = models.recon_params.bind(&g, true);
    let gt = g.constant(batch.x_gt.clone());
    let rows = models.recon.forward(&g, Ctx::plain(&bound), gt, geometry)?;
    let rendered = geometry.rig.render(&g, rows);
    let loss = recon_loss(&g, gt, rendered);
    let value = finite("l_recon_pretrain", g.item(loss) as f64, step)?;
    let mut grads = g.backward(loss);
    opt.step(&mut models.recon_params, &bound.grads(&mut grads));
    Ok(value)
}

/// Noise-prediction MSE of the teacher at a fixed timestep (no update).
pub fn teacher_loss_at(models: &Models, batch: &TrainBatch, s: &NoiseSchedule, t: usize, noise_seed: u64) -> Result<f64> {
    let noise = NoiseDraw::new(batch.x_gt.shape(), noise_seed);
    let x_t = q_sample(&to_signal(&batch.x_gt), t, &noise, s)?;
    let pred = models.denoiser.predict(&models.mvg, false, &x_t, &vec![t; batch.scenes()], &batch.conditioning())?;
    Ok(crate::alignment::denoising_mse(&pred, &noise.eps))
}
