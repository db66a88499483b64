//! Checkpoint capture, save, load and restore into fresh models.

use aligncvc::alignment::Optimizers;
use aligncvc::checkpoint::Checkpoint;
use aligncvc::config::ExperimentConfig;
use aligncvc::pipeline::Models;
use aligncvc::schedule::NoiseSchedule;

fn main() -> anyhow::Result<()> {
    let cfg = ExperimentConfig::default();
    let s = NoiseSchedule::default();
    let models = Models::build(&cfg.model, &s, 1);
    let opts = Optimizers::new(&models, &cfg.optim);
    let ck = Checkpoint::capture(&cfg, 0, &models, Some(&opts), None);
    let path = std::env::temp_dir().join("aligncvc_example.ckpt");
    ck.save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    let back = Checkpoint::load(&path)?;
    println!("saved {} stores, {bytes} bytes; reload identical: {}", back.stores.len(), back == ck);

    let mut other = Models::build(&cfg.model, &s, 2);
    let before = other.recon_params == models.recon_params;
    back.apply(&mut other)?;
    println!("fresh models matched before restore: {before}, after: {}", other.recon_params == models.recon_params);
    std::fs::remove_file(&path)?;
    Ok(())
}
