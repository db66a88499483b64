//! Discriminator over channel-concatenated view sets and the adversarial
//! objectives, evaluated on real views and on a blurred copy.

use aligncvc::alignment::{gan_loss_discriminator, gan_loss_generator, Discriminator, DiscriminatorConfig, GanVariant, TrainBatch};
use aligncvc::data::{make_sample, DatasetConfig};
use aligncvc::nn::Ctx;
use gradtape::{Adam, Graph, Tensor};

fn blur(x: &Tensor<f32>) -> Tensor<f32> {
    let mean = x.data().iter().sum::<f32>() / x.numel() as f32;
    x.map(|v| 0.5 * v + 0.5 * mean)
}

fn main() -> anyhow::Result<()> {
    let data = DatasetConfig::default();
    let samples: Vec<_> = (0..4).map(|i| make_sample(i, 8, &data)).collect::<Result<_, _>>()?;
    let real = TrainBatch::from_samples(&samples)?.x_gt;
    let fake = blur(&real);
    let (disc, mut params) = Discriminator::build(DiscriminatorConfig::default(), 1);
    let mut opt = Adam::new(&params, 2e-4);
    opt.beta1 = 0.5;
    for step in 0..=60 {
        let g = Graph::new();
        let bound = params.bind(&g, true);
        let zr = disc.forward(&g, Ctx::plain(&bound), g.constant(real.clone()));
        let zf = disc.forward(&g, Ctx::plain(&bound), g.constant(fake.clone()));
        let obj = gan_loss_discriminator(&g, zr, zf);
        let gen = gan_loss_generator(&g, zf, GanVariant::NonSaturating);
        if step % 20 == 0 {
            println!("step {step:3}  D objective {:.4} (max 0)  generator loss {:.4}", g.item(obj), g.item(gen));
        }
        let mut grads = g.backward(g.scale(obj, -1.0));
        opt.step(&mut params, &bound.grads(&mut grads));
    }
    Ok(())
}
