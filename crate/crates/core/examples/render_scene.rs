//! Generates one procedural scene and writes its four ground-truth views
//! plus the conditioning view as PNG files.

use std::path::PathBuf;

use aligncvc::data::{make_sample, DatasetConfig};

fn save(path: &std::path::Path, img: &gradtape::Tensor<f32>) -> anyhow::Result<()> {
    let r = img.shape()[0] as u32;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, r, r, image::ColorType::Rgb8)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("aligncvc_scene"));
    std::fs::create_dir_all(&out)?;
    let cfg = DatasetConfig::default();
    let sample = make_sample(3, 42, &cfg)?;
    let stats = sample.scene.stats();
    println!("scene grid {}^3, occupied {:.1}%, max density {:.1}", sample.scene.grid(), 100.0 * stats.occupied_fraction, stats.density_max);
    save(&out.join("cond.png"), &sample.x_c)?;
    for v in 0..sample.views.len() {
        save(&out.join(format!("view_{v}.png")), &sample.views.view(v))?;
    }
    println!("wrote {} views to {}", sample.views.len() + 1, out.display());
    Ok(())
}
