//! The distillation gradient for a student prediction, its shared-noise
//! draws, and the null cases (zero shift, zero weight).

use aligncvc::alignment::distill::{distill_gradient_at, draw_timesteps};
use aligncvc::alignment::{distill_gradient, DistillConfig, TrainBatch};
use aligncvc::data::{make_sample, DatasetConfig};
use aligncvc::pipeline::{ModelConfig, Models};
use aligncvc::schedule::{to_signal, NoiseSchedule};

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

fn main() -> anyhow::Result<()> {
    let s = NoiseSchedule::default();
    let models = Models::build(&ModelConfig::default(), &s, 2);
    let batch = TrainBatch::from_samples(&[make_sample(0, 4, &DatasetConfig::default())?])?;
    let cond = batch.conditioning();
    let x_hat = to_signal(&batch.x_gt);
    let cfg = DistillConfig::default();
    for seed in 0..4 {
        let (t, u) = draw_timesteps(&cfg, &s, seed);
        let out = distill_gradient(&x_hat, &cond, &models.teacher(), &s, &cfg, seed)?;
        println!("seed {seed}: t={t} t+dt={u}  |grad|={:.4e}", norm(out.grad.data()));
    }
    let same = distill_gradient_at(&x_hat, &cond, &models.teacher(), &s, 1.0, 400, 400, 0)?;
    let off = distill_gradient_at(&x_hat, &cond, &models.teacher(), &s, 0.0, 400, 500, 0)?;
    println!("dt=0: |grad|={}   omega=0: |grad|={}", norm(same.grad.data()), norm(off.grad.data()));
    Ok(())
}
