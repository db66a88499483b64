//! One joint update of the discriminators, the student adapter and the
//! reconstructor.

use gradtape::{Adam, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::distill::{distill_gradient, DistillConfig};
use super::gan::{gan_loss_discriminator, gan_loss_generator, recon_loss, Discriminator, GanVariant};
use crate::camera::CameraPoseSet;
use crate::data::Sample;
use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{param_err, Error, Result};
use crate::nn::Ctx;
use crate::pipeline::Models;
use crate::recon::ViewGeometry;
use crate::schedule::{q_sample, to_signal, NoiseDraw, NoiseSchedule, TimestepPlan};
use crate::seed;

/// What drives the student adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MvgObjective {
    /// Score distillation against the frozen teacher.
    Distill,
    /// Plain denoising loss against ground truth.
    Diffusion,
    /// Adversarial loss on generated views.
    Gan,
}

/// What aligns the reconstructor's renders with the data distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconObjective {
    Gan,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub lambda_distill: f64,
    pub lambda_gan: f64,
    pub lambda_recon: f64,
    /// Constant distillation weight `omega(t)`.
    pub omega_const: f64,
    /// Inclusive range of the distillation timestep shift.
    pub delta_t_min: i64,
    pub delta_t_max: i64,
    /// Inclusive sampling range of the distillation timestep.
    pub t_min: usize,
    pub t_max: usize,
    pub gan_variant: GanVariant,
    pub objective: MvgObjective,
    pub recon_objective: ReconObjective,
    pub train_mvg: bool,
    pub train_recon: bool,
    /// Clamp clean estimates to the signal range before reconstruction.
    pub clip_x0: bool,
}

impl AlignConfig {
    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            omega_const: self.omega_const,
            delta_t_min: self.delta_t_min,
            delta_t_max: self.delta_t_max,
            t_min: self.t_min,
            t_max: self.t_max,
        }
    }
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda_distill: 1.0,
            lambda_gan: 0.1,
            lambda_recon: 1.0,
            omega_const: 1.0,
            delta_t_min: 50,
            delta_t_max: 150,
            t_min: 20,
            t_max: 980,
            gan_variant: GanVariant::NonSaturating,
            objective: MvgObjective::Distill,
            recon_objective: ReconObjective::Gan,
            train_mvg: true,
            train_recon: true,
            clip_x0: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_adapter: f64,
    pub lr_recon: f64,
    pub lr_disc: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr_adapter: 5e-4, lr_recon: 3e-4, lr_disc: 2e-4, max_grad_norm: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub adapter: Adam<f32>,
    pub recon: Adam<f32>,
    pub disc: Adam<f32>,
    pub disc_mvg: Adam<f32>,
}

impl Optimizers {
    pub fn new(models: &Models, cfg: &OptimConfig) -> Self {
        let clip = cfg.max_grad_norm as f32;
        let disc = |store| {
            let mut a = Adam::new(store, cfg.lr_disc as f32).with_max_grad_norm(clip);
            a.beta1 = 0.5;
            a
        };
        Optimizers {
            adapter: Adam::new(&models.mvg.adapter, cfg.lr_adapter as f32).with_max_grad_norm(clip),
            recon: Adam::new(&models.recon_params, cfg.lr_recon as f32).with_max_grad_norm(clip),
            disc: disc(&models.disc_params),
            disc_mvg: disc(&models.disc_mvg_params),
        }
    }
}

/// A training batch of `B` scenes; images in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `(B, R, R, 3)`.
    pub x_c: Tensor<f32>,
    /// `(B * N, R, R, 3)`.
    pub x_gt: Tensor<f32>,
    pub poses: CameraPoseSet,
}

impl TrainBatch {
    /// Stacks samples that share one pose set.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| param_err!("empty batch"))?;
        let poses = first.views.poses().clone();
        if samples.iter().any(|s| *s.views.poses() != poses) {
            return Err(param_err!("samples in one batch must share their poses"));
        }
        let x_c: Vec<Tensor<f32>> = samples.iter().map(|s| s.x_c.clone().reshape(vec![1, s.x_c.shape()[0], s.x_c.shape()[1], 3])).collect();
        let x_gt: Vec<&Tensor<f32>> = samples.iter().map(|s| s.views.views()).collect();
        Ok(TrainBatch {
            x_c: Tensor::concat_rows(&x_c.iter().collect::<Vec<_>>()),
            x_gt: Tensor::concat_rows(&x_gt),
            poses,
        })
    }

    /// Denoiser conditioning (signal range).
    pub fn conditioning(&self) -> Conditioning<f32> {
        Conditioning { x_c: to_signal(&self.x_c), poses: self.poses.clone() }
    }

    pub fn scenes(&self) -> usize {
        self.x_c.shape()[0]
    }
}

/// Per-step losses. Unused terms are reported as zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// Value of the student's objective (distillation surrogate, diffusion
    /// loss or generator-side GAN loss on generated views).
    pub l_distill_surrogate: f64,
    /// Discriminator objective before its update (ascended).
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_recon: f64,
    pub lambda_distill: f64,
    pub lambda_gan: f64,
    pub lambda_recon: f64,
    pub t_k: usize,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_distill_surrogate, self.l_gan_d, self.l_gan_g, self.l_recon].iter().all(|v| v.is_finite())
    }
}

/// Fixed state shared by all steps of a run.
#[derive(Clone, Copy)]
pub struct StepEnv<'a> {
    pub schedule: &'a NoiseSchedule,
    pub plan: &'a TimestepPlan,
    pub geometry: &'a ViewGeometry<f32>,
}

fn check(what: &str, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.to_string(), step })
    }
}

/// Clean estimate `(x_t - sqrt(1 - abar) eps) / sqrt(abar)` on the tape.
pub fn x0_on_tape(g: &Graph<f32>, x_t: Var, eps: Var, t: usize, s: &NoiseSchedule) -> Var {
    let (a, sd) = s.coefficients(t);
    g.add(g.scale(x_t, (1.0 / a) as f32), g.scale(eps, (-sd / a) as f32))
}

fn student_forward(
    g: &Graph<f32>,
    net: &Denoiser,
    ctx: Ctx,
    x_t: &Tensor<f32>,
    t: usize,
    x_c: Var,
    poses: &CameraPoseSet,
    scenes: usize,
) -> Result<(Var, Var)> {
    let xv = g.constant(x_t.clone());
    let eps = net.forward(g, ctx, xv, &vec![t; scenes], x_c, poses)?;
    Ok((xv, eps))
}

/// One discriminator update on real vs. detached fake views. Returns the
/// objective value before the update.
fn disc_step(
    disc: &Discriminator,
    params: &mut gradtape::ParamStore<f32>,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    step: usize,
    what: &str,
) -> Result<f64> {
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let ctx = Ctx::plain(&bound);
    let zr = disc.forward(&g, ctx, g.constant(real.clone()));
    let zf = disc.forward(&g, ctx, g.constant(fake.clone()));
    let obj = gan_loss_discriminator(&g, zr, zf);
    let value = check(what, g.item(obj) as f64, step)?;
    let neg = g.scale(obj, -1.0);
    let mut grads = g.backward(neg);
    opt.step(params, &bound.grads(&mut grads));
    Ok(value)
}

/// One joint step. `step` is used for error reports only; all randomness
/// comes from `step_seed`.
pub fn joint_train_step(
    batch: &TrainBatch,
    models: &mut Models,
    opts: &mut Optimizers,
    cfg: &AlignConfig,
    env: StepEnv,
    step: usize,
    step_seed: u64,
) -> Result<LossBundle> {
    let s = env.schedule;
    let b = batch.scenes();
    let n = batch.poses.len();
    if batch.x_gt.shape()[0] != b * n {
        return Err(param_err!("batch holds {} views for {b} scenes of {n} poses", batch.x_gt.shape()[0]));
    }
    let mut bundle = LossBundle {
        lambda_distill: cfg.lambda_distill,
        lambda_gan: cfg.lambda_gan,
        lambda_recon: cfg.lambda_recon,
        ..Default::default()
    };

    // Simulated sampling state: ground truth noised at a plan timestep.
    let mut rng = seed::rng(seed::derive(step_seed, "joint.k", 0));
    let t_k = env.plan.steps()[rng.random_range(0..env.plan.len())];
    bundle.t_k = t_k;
    let x_gt_sig = to_signal(&batch.x_gt);
    let noise = NoiseDraw::new(batch.x_gt.shape(), seed::derive(step_seed, "joint.x_t", 0));
    let x_t = q_sample(&x_gt_sig, t_k, &noise, s)?;
    let cond = batch.conditioning();

    let mvg_weight = if cfg.train_mvg { cfg.lambda_distill } else { 0.0 };
    let use_recon_gan = cfg.lambda_gan != 0.0 && cfg.recon_objective == ReconObjective::Gan;
    let use_mvg_gan = mvg_weight != 0.0 && cfg.objective == MvgObjective::Gan;

    let g = Graph::new();
    let base = models.mvg.base.bind(&g, false);
    let adapter = models.mvg.adapter.bind(&g, cfg.train_mvg);
    let recon_bound = models.recon_params.bind(&g, cfg.train_recon);
    let sctx = Ctx { base: &base, adapter: Some(&adapter) };
    let x_c = g.constant(cond.x_c.clone());

    let (xv, eps) = student_forward(&g, &models.denoiser, sctx, &x_t, t_k, x_c, &batch.poses, b)?;
    let mut x_hat = x0_on_tape(&g, xv, eps, t_k, s);
    if cfg.clip_x0 {
        x_hat = g.clamp(x_hat, -1.0, 1.0);
    }
    let x_hat_img = g.affine(x_hat, 0.5, 0.5);
    let rows = models.recon.forward(&g, Ctx::plain(&recon_bound), x_hat_img, env.geometry)?;
    let rendered = env.geometry.rig.render(&g, rows);
    let gt = g.constant(batch.x_gt.clone());

    // Discriminator updates see detached fakes.
    if use_recon_gan {
        let fake = g.value(rendered).clone();
        bundle.l_gan_d =
            disc_step(&models.disc, &mut models.disc_params, &mut opts.disc, &batch.x_gt, &fake, step, "l_gan_d")?;
    }
    if use_mvg_gan {
        let fake = g.value(x_hat_img).clone();
        disc_step(&models.disc_mvg, &mut models.disc_mvg_params, &mut opts.disc_mvg, &batch.x_gt, &fake, step, "l_gan_d_mvg")?;
    }

    let mut terms: Vec<Var> = Vec::new();
    if mvg_weight != 0.0 {
        let term = match cfg.objective {
            MvgObjective::Distill => {
                let xh = g.value(x_hat).clone();
                let out = distill_gradient(&xh, &cond, &models.teacher(), s, &cfg.distill(), seed::derive(step_seed, "joint.distill", 0))?;
                g.mean_all(g.mul(g.constant(out.grad), x_hat))
            }
            MvgObjective::Diffusion => {
                let mut r = seed::rng(seed::derive(step_seed, "joint.diff_t", 0));
                let t = r.random_range(1..=s.steps());
                let e = NoiseDraw::new(batch.x_gt.shape(), seed::derive(step_seed, "joint.diff_eps", 0));
                let xt = q_sample(&x_gt_sig, t, &e, s)?;
                let target = models.denoiser.raw_target(&x_gt_sig, &e.eps, &vec![t; b])?;
                let raw = models.denoiser.forward_raw(&g, sctx, g.constant(xt), &vec![t; b], x_c, &batch.poses)?;
                g.mean_all(g.sqr(g.sub(raw, g.constant(target))))
            }
            MvgObjective::Gan => {
                let dp = models.disc_mvg_params.bind(&g, false);
                let z = models.disc_mvg.forward(&g, Ctx::plain(&dp), x_hat_img);
                gan_loss_generator(&g, z, cfg.gan_variant)
            }
        };
        bundle.l_distill_surrogate = check("l_distill_surrogate", g.item(term) as f64, step)?;
        terms.push(g.scale(term, mvg_weight as f32));
    }
    if cfg.lambda_gan != 0.0 {
        let term = match cfg.recon_objective {
            ReconObjective::Gan => {
                let dp = models.disc_params.bind(&g, false);
                let z = models.disc.forward(&g, Ctx::plain(&dp), rendered);
                gan_loss_generator(&g, z, cfg.gan_variant)
            }
            ReconObjective::Distill => {
                let sig = g.affine(rendered, 2.0, -1.0);
                let rv = g.value(sig).clone();
                let out = distill_gradient(&rv, &cond, &models.teacher(), s, &cfg.distill(), seed::derive(step_seed, "joint.distill_recon", 0))?;
                g.mean_all(g.mul(g.constant(out.grad), sig))
            }
        };
        bundle.l_gan_g = check("l_gan_g", g.item(term) as f64, step)?;
        terms.push(g.scale(term, cfg.lambda_gan as f32));
    }
    let lr = recon_loss(&g, gt, rendered);
    bundle.l_recon = check("l_recon", g.item(lr) as f64, step)?;
    if cfg.lambda_recon != 0.0 {
        terms.push(g.scale(lr, cfg.lambda_recon as f32));
    }

    if terms.is_empty() || !(cfg.train_mvg || cfg.train_recon) {
        return Ok(bundle);
    }
    let total = terms.iter().skip(1).fold(terms[0], |acc, &t| g.add(acc, t));
    check("total", g.item(total) as f64, step)?;
    let mut grads = g.backward(total);
    if cfg.train_mvg {
        opts.adapter.step(&mut models.mvg.adapter, &adapter.grads(&mut grads));
    }
    if cfg.train_recon {
        opts.recon.step(&mut models.recon_params, &recon_bound.grads(&mut grads));
    }
    Ok(bundle)
}

/// The diffusion-loss replacement objective on its own: denoising MSE of the
/// student against noised ground truth at a random timestep.
pub fn diffusion_loss_variant(
    models: &Models,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    step_seed: u64,
) -> Result<f64> {
    let mut r = seed::rng(seed::derive(step_seed, "joint.diff_t", 0));
    let t = r.random_range(1..=s.steps());
    let e = NoiseDraw::new(batch.x_gt.shape(), seed::derive(step_seed, "joint.diff_eps", 0));
    let xt = q_sample(&to_signal(&batch.x_gt), t, &e, s)?;
    let cond = batch.conditioning();
    let pred = models.denoiser.predict(&models.mvg, true, &xt, &vec![t; batch.scenes()], &cond)?;
    Ok(denoising_mse(&pred, &e.eps))
}

/// Mean squared difference between predicted and true noise.
pub fn denoising_mse(pred: &Tensor<f32>, eps: &Tensor<f32>) -> f64 {
    let sum: f64 = pred.data().iter().zip(eps.data()).map(|(&p, &e)| ((p - e) as f64).powi(2)).sum();
    sum / pred.numel() as f64
}
