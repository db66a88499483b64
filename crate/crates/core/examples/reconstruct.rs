//! Feed-forward reconstruction: a few hundred regression steps on ground-truth
//! view sets, then reconstruct a held-out scene and score its renders.

use aligncvc::alignment::TrainBatch;
use aligncvc::data::{make_sample, DatasetConfig};
use aligncvc::metrics::psnr;
use aligncvc::pipeline::{ModelConfig, Models};
use aligncvc::pretrain::recon_step;
use aligncvc::sampling::stack_scene_rows;
use aligncvc::schedule::NoiseSchedule;
use gradtape::Adam;

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let data = DatasetConfig::default();
    let s = NoiseSchedule::default();
    let mut models = Models::build(&ModelConfig::default(), &s, 1);
    let geo = models.geometry(&data.poses()?, &data.render_config())?;
    let train: Vec<_> = (0..32).map(|i| make_sample(i, 5, &data)).collect::<Result<_, _>>()?;
    let mut opt = Adam::new(&models.recon_params, 1e-3);
    for step in 0..steps {
        let picked: Vec<_> = (0..4).map(|j| train[(step * 4 + j) % train.len()].clone()).collect();
        let loss = recon_step(&mut models, &mut opt, &TrainBatch::from_samples(&picked)?, &geo, step)?;
        if step % 50 == 0 || step + 1 == steps {
            println!("step {step:4}  render mse {loss:.5}");
        }
    }
    let held_out = make_sample(1000, 5, &data)?;
    let gt = held_out.views.views();
    let scenes = models.recon.reconstruct(&models.recon_params, gt, &geo)?;
    let out = geo.rig.render_full(&stack_scene_rows(&scenes));
    println!("held-out render PSNR {:.2} dB", psnr(&out.rgb, gt, 1.0)?);
    Ok(())
}
