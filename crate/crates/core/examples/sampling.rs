//! Four-step sampling in both loops for one held-out scene, with the
//! per-step trace of the 3D-aware loop. Pass a checkpoint path to sample
//! from trained weights (its config must use the default data layout);
//! otherwise a briefly pretrained model is used.

use aligncvc::checkpoint::Checkpoint;
use aligncvc::config::ExperimentConfig;
use aligncvc::harness::{pretrain, prepare_dataset, sample_scene, Experiment, Logger};
use aligncvc::metrics::{score_scene, SamplingMode};

fn main() -> anyhow::Result<()> {
    let ck = match std::env::args().nth(1) {
        Some(p) => Some(Checkpoint::load(p.as_ref())?),
        None => None,
    };
    let mut cfg = ck.as_ref().map(|c| c.config.clone()).unwrap_or_else(|| {
        let mut c = ExperimentConfig { scene_count: 24, ..ExperimentConfig::default() };
        c.data.test_count = 4;
        c.pretrain.teacher_steps = 150;
        c.pretrain.recon_steps = 150;
        c
    });
    cfg.scene_count = cfg.scene_count.min(24);
    cfg.data.test_count = cfg.data.test_count.min(4);
    let ds = prepare_dataset(&cfg, &std::env::temp_dir().join("aligncvc_sampling_example"))?;
    let exp = Experiment::new(cfg, &ds)?;
    let ck = match ck {
        Some(c) => c,
        None => pretrain(&exp, &mut Logger::silent())?.0,
    };
    let mut models = exp.init_models();
    ck.apply(&mut models)?;

    let sample = &exp.eval[0];
    let sampler = exp.sampler(&models);
    for mode in [SamplingMode::TwoStage, SamplingMode::Aligncvc] {
        let out = sample_scene(&exp, &models, sample, mode, 7)?;
        let (p, s, c) = score_scene(&sampler, &out.scenes[0], sample.views.views(), &exp.config.eval.metrics())?;
        println!(
            "{mode:?}: psnr {p:.2} ssim {s:.3} cvc {:.3}{}  ({} denoise, {} reconstruct, {} render calls)",
            c.score,
            if c.no_valid_pixels { " (no valid pixels)" } else { "" },
            out.trace.denoise_calls, out.trace.reconstruct_calls, out.trace.render_calls
        );
        if mode == SamplingMode::Aligncvc {
            print!("{}", out.trace.to_jsonl()?);
        }
    }
    Ok(())
}
