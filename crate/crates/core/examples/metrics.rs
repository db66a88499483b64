//! PSNR, SSIM and the cross-view consistency proxy on ground-truth renders,
//! on a noisy copy, and with the pose set permuted.

use aligncvc::data::{make_sample, DatasetConfig};
use aligncvc::metrics::{cvc_proxy, psnr, ssim, CvcConfig, SsimConfig};
use aligncvc::render::render_multiview;
use aligncvc::seed;
use gradtape::Tensor;
use rand::Rng;

fn main() -> anyhow::Result<()> {
    let data = DatasetConfig::default();
    let poses = data.poses()?;
    let render = data.render_config();
    let intr = render.intrinsics();
    let cvc = CvcConfig::default();
    let ssim_cfg = SsimConfig::default();
    let mut rng = seed::rng(3);
    for id in 0..3 {
        let s = make_sample(id, 42, &data)?;
        let (_, out) = render_multiview(&s.scene, &poses, &render)?;
        let noisy = Tensor::new(
            out.rgb.shape().to_vec(),
            out.rgb.data().iter().map(|v| (v + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)).collect(),
        );
        let own = cvc_proxy(&out.rgb, &out.depth, &out.opacity, &poses, &intr, &cvc)?;
        let swapped = cvc_proxy(&out.rgb, &out.depth, &out.opacity, &poses.permuted(&[1, 0, 2, 3])?, &intr, &cvc)?;
        println!(
            "scene {id}: noisy psnr {:.2} ssim {:.3} | cvc {:.3}, swapped poses {:.3}",
            psnr(&noisy, &out.rgb, 1.0)?,
            ssim(&noisy, &out.rgb, &ssim_cfg)?,
            own.score,
            swapped.score
        );
    }
    Ok(())
}
