//! Forward process and the four-step inference plan.

use aligncvc::schedule::{make_inference_plan, predict_x0, q_sample, NoiseDraw, NoiseSchedule};
use gradtape::Tensor;

fn main() -> anyhow::Result<()> {
    let s = NoiseSchedule::default();
    let plan = make_inference_plan(4, &s)?;
    println!("plan (noisiest first): {:?}", plan.steps());
    for &t in plan.steps() {
        println!("t={t:4}  alpha_bar={:.5}  snr={:.4}", s.alpha_bar(t), s.snr(t));
    }

    let x0 = Tensor::<f32>::new(vec![4], vec![-1.0, -0.3, 0.4, 1.0]);
    let noise = NoiseDraw::new(x0.shape(), 7);
    for &t in plan.steps() {
        let x_t = q_sample(&x0, t, &noise, &s)?;
        let back = predict_x0(&x_t, &noise.eps, t, &s)?;
        println!("t={t:4}  x_t={:?}  recovered x0={:?}", x_t.data(), back.data());
    }
    Ok(())
}
