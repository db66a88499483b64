use std::path::{Path, PathBuf};

use aligncvc::checkpoint::Checkpoint;
use aligncvc::config::ExperimentConfig;
use aligncvc::data::{build_dataset, Dataset, Split};
use aligncvc::harness::{prepare_dataset, pretrain, run_ablation, run_training, sample_scene, Experiment, Logger, Variant};
use aligncvc::metrics::SamplingMode;
use aligncvc::seed;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aligncvc", version, about = "Aligned multi-view generation and reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; defaults are used for missing files.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set align.lambda_gan=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write JSON-lines logs here instead of stderr.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Aligncvc,
    TwoStage,
}

impl From<Mode> for SamplingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Aligncvc => SamplingMode::Aligncvc,
            Mode::TwoStage => SamplingMode::TwoStage,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the teacher denoiser and the reconstructor.
    PretrainTeacher {
        /// Dataset directory (generated if missing).
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Joint alignment training from a pretrained checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        init: PathBuf,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted run from one of its checkpoints.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample one scene and write its views, trace and grid.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_enum, default_value_t = Mode::Aligncvc)]
        mode: Mode,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Aligncvc)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate ablation variants from one pretrained checkpoint.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        /// Comma-separated variant names; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn resolve(base: ExperimentConfig, args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => base,
    };
    cfg.apply_env()?;
    for s in &args.overrides {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn logger(args: &ConfigArgs) -> Result<Logger> {
    Ok(match &args.log {
        Some(p) => Logger::file(p)?,
        None => Logger::stderr(),
    })
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.json"))?;
    Ok(())
}

fn load_checkpoint_config(ckpt: &Path, args: &ConfigArgs) -> Result<(Checkpoint, ExperimentConfig)> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = resolve(ck.config.clone(), args)?;
    Ok((ck, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { count, seed, out, cfg } => {
            let mut c = resolve(ExperimentConfig::default(), &cfg)?;
            if let Some(n) = count {
                c.scene_count = n;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            let m = build_dataset(c.scene_count, c.seed, &out, &c.data)?;
            println!("wrote {} scenes to {}", m.count, out.display());
        }
        Command::PretrainTeacher { data, out, cfg } => {
            let c = resolve(ExperimentConfig::default(), &cfg)?;
            let mut log = logger(&cfg)?;
            let dataset = prepare_dataset(&c, &data)?;
            let exp = Experiment::new(c, &dataset)?;
            let (ck, summary) = pretrain(&exp, &mut log)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            ck.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { data, init, out, resume, cfg } => {
            let (init_ck, c) = load_checkpoint_config(&init, &cfg)?;
            let mut log = logger(&cfg)?;
            let dataset = Dataset::open(&data)?;
            let exp = Experiment::new(c, &dataset)?;
            let start = match resume {
                Some(p) => Checkpoint::load(&p)?,
                None => init_ck,
            };
            write_config(&out, &exp.config)?;
            let outcome = run_training(&exp, &start, Some(&out), &mut log)?;
            println!("trained to step {}; {} checkpoints in {}", outcome.checkpoint.step, outcome.written.len(), out.display());
        }
        Command::Sample { data, ckpt, scene, mode, seed: run_seed, out, cfg } => {
            let (ck, c) = load_checkpoint_config(&ckpt, &cfg)?;
            let dataset = Dataset::open(&data)?;
            let exp = Experiment::new(c, &dataset)?;
            let mut models = exp.init_models();
            ck.apply(&mut models)?;
            let sample = dataset.load_scene(scene)?;
            let s = run_seed.unwrap_or_else(|| seed::derive(exp.config.seed, "cli.sample", scene as u64));
            let result = sample_scene(&exp, &models, &sample, mode.into(), s)?;
            write_config(&out, &exp.config)?;
            std::fs::write(out.join("trace.jsonl"), result.trace.to_jsonl()?)?;
            let grid = result.scenes.first().context("sampler returned no scene")?;
            grid.save(&out.join("scene.s3d"))?;
            let rendered = exp.geometry.rig.render_full(&grid.to_rows());
            let r = exp.geometry.resolution();
            for (v, img) in rendered.rgb.data().chunks_exact(r * r * 3).enumerate() {
                let bytes: Vec<u8> = img.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                image::save_buffer(out.join(format!("view_{v}.png")), &bytes, r as u32, r as u32, image::ColorType::Rgb8)?;
            }
            println!("wrote {} steps and {} views to {}", result.trace.records.len(), rendered.rgb.shape()[0], out.display());
        }
        Command::Eval { manifest, split, ckpt, mode, out, cfg } => {
            let (ck, mut c) = load_checkpoint_config(&ckpt, &cfg)?;
            if let Some(s) = split {
                c.eval.split = s;
            }
            let dataset = Dataset::open(&manifest)?;
            let exp = Experiment::new(c, &dataset)?;
            let mut models = exp.init_models();
            ck.apply(&mut models)?;
            let report = exp.evaluate(&models, mode.into());
            write_config(&out, &exp.config)?;
            report.write(&out, "report")?;
            println!(
                "{} scenes: psnr {:.3} ssim {:.4} cvc {:.4} ({} failures)",
                report.count,
                report.psnr,
                report.ssim,
                report.cvc,
                report.failures.len()
            );
        }
        Command::Ablate { data, init, variants, out, cfg } => {
            let (ck, c) = load_checkpoint_config(&init, &cfg)?;
            if ck.step != 0 {
                bail!("ablations start from a pretrained checkpoint (step 0), got step {}", ck.step);
            }
            let mut log = logger(&cfg)?;
            let dataset = Dataset::open(&data)?;
            let exp = Experiment::new(c, &dataset)?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let table = run_ablation(&exp, &ck, &variants, &mut log)?;
            write_config(&out, &exp.config)?;
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
            std::fs::write(out.join("ablation.md"), table.to_markdown())?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
