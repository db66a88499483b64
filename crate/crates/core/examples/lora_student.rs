//! Teacher and LoRA student share one base network: with a zero adapter the
//! student reproduces the teacher exactly, and only the adapter moves it.

use aligncvc::data::{make_sample, DatasetConfig};
use aligncvc::denoiser::NoisePredictor;
use aligncvc::alignment::TrainBatch;
use aligncvc::pipeline::{ModelConfig, Models};
use aligncvc::schedule::{q_sample, to_signal, NoiseDraw, NoiseSchedule};

fn main() -> anyhow::Result<()> {
    let s = NoiseSchedule::default();
    let mut models = Models::build(&ModelConfig::default(), &s, 3);
    println!(
        "base {} scalars, adapter {} scalars",
        models.mvg.base.num_scalars(),
        models.mvg.adapter.num_scalars()
    );
    let data = DatasetConfig::default();
    let batch = TrainBatch::from_samples(&[make_sample(0, 9, &data)?])?;
    let cond = batch.conditioning();
    let x_t = q_sample(&to_signal(&batch.x_gt), 499, &NoiseDraw::new(batch.x_gt.shape(), 1), &s)?;
    let ts = [499];

    let diff = |models: &Models| -> anyhow::Result<f32> {
        let a = models.teacher().predict_eps(&x_t, &ts, &cond)?;
        let b = models.student().predict_eps(&x_t, &ts, &cond)?;
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
    };
    println!("zero adapter: max |student - teacher| = {}", diff(&models)?);
    for (_, t) in models.mvg.adapter.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.01);
    }
    println!("perturbed adapter: max |student - teacher| = {}", diff(&models)?);
    models.mvg.zero_adapter();
    println!("after zero_adapter: max |student - teacher| = {}", diff(&models)?);
    Ok(())
}
