//! Joint alignment on a small synthetic dataset: a short pretraining phase,
//! then a few joint steps with every loss term reported.

use aligncvc::alignment::{joint_train_step, Optimizers};
use aligncvc::config::ExperimentConfig;
use aligncvc::harness::{pretrain, prepare_dataset, Experiment, Logger};
use aligncvc::seed;

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let mut cfg = ExperimentConfig { scene_count: 24, ..ExperimentConfig::default() };
    cfg.data.test_count = 4;
    cfg.pretrain.teacher_steps = 100;
    cfg.pretrain.recon_steps = 100;
    let dir = std::env::temp_dir().join("aligncvc_joint_example");
    let ds = prepare_dataset(&cfg, &dir)?;
    let exp = Experiment::new(cfg.clone(), &ds)?;
    let (pre, summary) = pretrain(&exp, &mut Logger::silent())?;
    println!("pretrained: teacher loss {:.4}, recon loss {:.4}", summary.teacher_loss_last, summary.recon_loss_last);

    let mut models = exp.init_models();
    pre.apply(&mut models)?;
    let mut opts = Optimizers::new(&models, &cfg.optim);
    for step in 0..steps {
        let batch = exp.batch("train.batch", step, cfg.train.batch)?;
        let step_seed = seed::derive(cfg.seed, "train.step", step as u64);
        let l = joint_train_step(&batch, &mut models, &mut opts, &cfg.align, exp.step_env(), step, step_seed)?;
        println!(
            "step {step:3} t_k {:3}  distill {:+.3e}  gan_d {:.4}  gan_g {:.4}  recon {:.5}",
            l.t_k, l.l_distill_surrogate, l.l_gan_d, l.l_gan_g, l.l_recon
        );
    }
    Ok(())
}
