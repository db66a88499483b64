//! Experiment plumbing: pretraining, joint training with checkpoints and
//! resume, evaluation, and the ablation runner.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use gradtape::{Adam, ParamStore};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::alignment::{joint_train_step, LossBundle, MvgObjective, Optimizers, ReconObjective, StepEnv, TrainBatch};
use crate::checkpoint::{Checkpoint, RECON_PRETRAINED};
use crate::config::ExperimentConfig;
use crate::data::{build_dataset, Dataset, Sample, Split};
use crate::error::{param_err, Error, Result};
use crate::metrics::{evaluate, EvalReport, SamplingMode};
use crate::pipeline::Models;
use crate::pretrain::{recon_step, teacher_step};
use crate::recon::ViewGeometry;
use crate::sampling::{SampleOutput, Sampler};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::seed;

/// Timestamped JSON-lines logger; silent when it has no sink.
pub struct Logger {
    sink: Option<Box<dyn Write + Send>>,
}

impl Logger {
    pub fn silent() -> Self {
        Logger { sink: None }
    }

    pub fn stderr() -> Self {
        Logger { sink: Some(Box::new(std::io::stderr())) }
    }

    pub fn file(path: &Path) -> Result<Self> {
        let f = File::options().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Logger { sink: Some(Box::new(f)) })
    }

    pub fn log(&mut self, event: &str, fields: Value) {
        let Some(sink) = self.sink.as_mut() else { return };
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let mut obj = json!({ "ts": ts, "event": event });
        if let (Some(o), Value::Object(extra)) = (obj.as_object_mut(), fields) {
            o.extend(extra);
        }
        // Logging is best effort.
        let _ = writeln!(sink, "{obj}");
    }
}

/// Shared, read-only state of an experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub plan: TimestepPlan,
    pub geometry: ViewGeometry<f32>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Experiment {
    /// Loads the dataset and builds the fixed geometry. The dataset's
    /// layout must match the config.
    pub fn new(config: ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        if dataset.manifest.config != config.data {
            return Err(Error::Config("dataset layout differs from the config's data section".into()));
        }
        let (schedule, plan) = config.schedule.build()?;
        let geometry = ViewGeometry::new(&dataset.manifest.poses, &config.model.recon, &dataset.manifest.render)?;
        let train = dataset.load_split(Split::Train)?;
        let eval = dataset.load_split(config.eval.split)?;
        if train.is_empty() {
            return Err(Error::Config("dataset has no training scenes".into()));
        }
        Ok(Experiment { config, schedule, plan, geometry, train, eval })
    }

    pub fn init_models(&self) -> Models {
        Models::build(&self.config.model, &self.schedule, seed::derive(self.config.seed, "init", 0))
    }

    /// Training batch for `(phase, step)`: scenes drawn without replacement
    /// from the training split by a seed that depends only on the step.
    pub fn batch(&self, phase: &str, step: usize, size: usize) -> Result<TrainBatch> {
        let n = self.train.len();
        let mut rng = seed::rng(seed::derive(self.config.seed, phase, step as u64));
        let idx = sample_indices(&mut rng, n, size.min(n));
        let picked: Vec<Sample> = idx.iter().map(|i| self.train[i].clone()).collect();
        TrainBatch::from_samples(&picked)
    }

    pub fn step_env(&self) -> StepEnv<'_> {
        StepEnv { schedule: &self.schedule, plan: &self.plan, geometry: &self.geometry }
    }

    pub fn sampler<'a>(&'a self, models: &'a Models) -> Sampler<'a> {
        Sampler::new(models, &self.geometry, &self.schedule, self.config.sampling)
    }

    pub fn evaluate(&self, models: &Models, mode: SamplingMode) -> EvalReport {
        let seed = seed::derive(self.config.seed, "eval", 0);
        evaluate(&self.sampler(models), &self.eval, &self.plan, mode, seed, &self.config.eval.metrics())
    }
}

/// Builds the dataset under `dir` unless a matching one is already there.
pub fn prepare_dataset(config: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    if let Ok(d) = Dataset::open(dir) {
        let m = &d.manifest;
        if m.count == config.scene_count && m.seed == config.seed && m.config == config.data {
            return Ok(d);
        }
    }
    build_dataset(config.scene_count, config.seed, dir, &config.data)?;
    Dataset::open(dir)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub teacher_loss_first: f64,
    pub teacher_loss_last: f64,
    pub recon_loss_first: f64,
    pub recon_loss_last: f64,
    pub seconds: f64,
}

fn window_mean(v: &[f64], first: bool) -> f64 {
    let w = v.len().min(50);
    if w == 0 {
        return f64::NAN;
    }
    let s = if first { &v[..w] } else { &v[v.len() - w..] };
    s.iter().sum::<f64>() / w as f64
}

/// Pretrains the teacher and the reconstructor from fresh weights. The
/// returned checkpoint (step 0) also keeps the pretrained reconstructor
/// separately for the fixed-reconstructor ablations.
pub fn pretrain(exp: &Experiment, log: &mut Logger) -> Result<(Checkpoint, PretrainSummary)> {
    let cfg = &exp.config;
    let p = cfg.pretrain;
    let start = Instant::now();
    let mut models = exp.init_models();
    let clip = cfg.optim.max_grad_norm as f32;
    let mut opt = Adam::new(&models.mvg.base, p.teacher_lr as f32).with_max_grad_norm(clip);
    let mut teacher_losses = Vec::with_capacity(p.teacher_steps);
    for step in 0..p.teacher_steps {
        let batch = exp.batch("pretrain.teacher.batch", step, p.batch)?;
        let s = seed::derive(cfg.seed, "pretrain.teacher.step", step as u64);
        let l = teacher_step(&mut models, &mut opt, &batch, &exp.schedule, step, s)?;
        teacher_losses.push(l);
        if cfg.train.log_every > 0 && step % cfg.train.log_every == 0 {
            log.log("pretrain_teacher", json!({ "step": step, "loss": l }));
        }
    }
    let mut ropt = Adam::new(&models.recon_params, p.recon_lr as f32).with_max_grad_norm(clip);
    let mut recon_losses = Vec::with_capacity(p.recon_steps);
    for step in 0..p.recon_steps {
        let batch = exp.batch("pretrain.recon.batch", step, p.batch)?;
        let l = recon_step(&mut models, &mut ropt, &batch, &exp.geometry, step)?;
        recon_losses.push(l);
        if cfg.train.log_every > 0 && step % cfg.train.log_every == 0 {
            log.log("pretrain_recon", json!({ "step": step, "loss": l }));
        }
    }
    let summary = PretrainSummary {
        teacher_loss_first: window_mean(&teacher_losses, true),
        teacher_loss_last: window_mean(&teacher_losses, false),
        recon_loss_first: window_mean(&recon_losses, true),
        recon_loss_last: window_mean(&recon_losses, false),
        seconds: start.elapsed().as_secs_f64(),
    };
    log.log("pretrain_done", serde_json::to_value(&summary)?);
    let ck = Checkpoint::capture(cfg, 0, &models, None, Some(&models.recon_params));
    Ok((ck, summary))
}

/// Config keys that may change between a run and its resumption.
const RESUMABLE_KEYS: [&str; 3] = ["train.steps", "train.ckpt_every", "train.log_every"];

/// Refuses to continue from a checkpoint written under a different config.
pub fn check_resume(config: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    let diff: Vec<String> = ck
        .config
        .diff(config)
        .into_iter()
        .filter(|d| !RESUMABLE_KEYS.iter().any(|k| d.starts_with(&format!("{k}:"))))
        .collect();
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("checkpoint config differs:\n  {}", diff.join("\n  "))))
    }
}

/// Result of a joint-training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub models: Models,
    pub losses: Vec<LossBundle>,
    pub written: Vec<PathBuf>,
}

/// Joint training from `start`: either a pretrained checkpoint (step 0, no
/// optimizer state) or a checkpoint of an interrupted run. Writes
/// `ckpt_<step>.bin` every `train.ckpt_every` steps and at the end when
/// `out_dir` is given.
pub fn run_training(exp: &Experiment, start: &Checkpoint, out_dir: Option<&Path>, log: &mut Logger) -> Result<TrainOutcome> {
    let cfg = &exp.config;
    let mut models = exp.init_models();
    start.apply(&mut models)?;
    let mut opts = Optimizers::new(&models, &cfg.optim);
    let first = start.step as usize;
    if first > 0 {
        check_resume(cfg, start)?;
        start.apply_optimizers(&mut opts)?;
    }
    let recon_pretrained = start.store(RECON_PRETRAINED).cloned();
    let mut losses = Vec::new();
    let mut written = Vec::new();
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let t = cfg.train;
    for step in first..t.steps {
        let batch = exp.batch("train.batch", step, t.batch)?;
        let s = seed::derive(cfg.seed, "train.step", step as u64);
        let l = joint_train_step(&batch, &mut models, &mut opts, &cfg.align, exp.step_env(), step, s)?;
        if t.log_every > 0 && step % t.log_every == 0 {
            log.log("train", json!({ "step": step, "losses": l }));
        }
        losses.push(l);
        let done = step + 1;
        if let Some(d) = out_dir {
            if (t.ckpt_every > 0 && done % t.ckpt_every == 0) || done == t.steps {
                let ck = Checkpoint::capture(cfg, done as u64, &models, Some(&opts), recon_pretrained.as_ref());
                let path = d.join(format!("ckpt_{done:06}.bin"));
                ck.save(&path)?;
                log.log("checkpoint", json!({ "step": done, "path": path.display().to_string() }));
                written.push(path);
            }
        }
    }
    let checkpoint = Checkpoint::capture(cfg, t.steps.max(first) as u64, &models, Some(&opts), recon_pretrained.as_ref());
    Ok(TrainOutcome { checkpoint, models, losses, written })
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Pretrained models, two-stage sampling.
    TwoStagePretrained,
    /// Pretrained models with 3D-aware sampling.
    Pretrained3dAware,
    /// Joint alignment of both models (the full method).
    Joint,
    FixedMvg,
    FixedRecon,
    NoReconLoss,
    NoMvgAlign,
    NoReconAlign,
    NoDistributionAlign,
    HardAlignedMvg,
    SoftAlignedRecon,
    /// Distillation replaced by a plain diffusion loss on the generator.
    DiffusionLoss,
    DiffusionLossNoReconAlign,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::TwoStagePretrained,
        Variant::Pretrained3dAware,
        Variant::FixedMvg,
        Variant::FixedRecon,
        Variant::NoReconLoss,
        Variant::NoMvgAlign,
        Variant::NoReconAlign,
        Variant::NoDistributionAlign,
        Variant::HardAlignedMvg,
        Variant::SoftAlignedRecon,
        Variant::DiffusionLoss,
        Variant::DiffusionLossNoReconAlign,
        Variant::Joint,
    ];

    /// Command-line name.
    pub fn key(self) -> &'static str {
        match self {
            Variant::TwoStagePretrained => "two-stage",
            Variant::Pretrained3dAware => "pretrained-3daware",
            Variant::Joint => "joint",
            Variant::FixedMvg => "fixed-mvg",
            Variant::FixedRecon => "fixed-recon",
            Variant::NoReconLoss => "no-recon-loss",
            Variant::NoMvgAlign => "no-mvg-align",
            Variant::NoReconAlign => "no-recon-align",
            Variant::NoDistributionAlign => "no-distribution-align",
            Variant::HardAlignedMvg => "hard-aligned-mvg",
            Variant::SoftAlignedRecon => "soft-aligned-recon",
            Variant::DiffusionLoss => "diffusion-loss",
            Variant::DiffusionLossNoReconAlign => "diffusion-loss-no-recon-align",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::TwoStagePretrained => "Two-stage (pretrained)",
            Variant::Pretrained3dAware => "+ 3D-Aware Sampling",
            Variant::Joint => "Joint alignment",
            Variant::FixedMvg => "Fixed MVG",
            Variant::FixedRecon => "Fixed Recon.",
            Variant::NoReconLoss => "w/o L_Recon",
            Variant::NoMvgAlign => "w/o MVG Align",
            Variant::NoReconAlign => "w/o Recon. Align",
            Variant::NoDistributionAlign => "w/o Distribution Align",
            Variant::HardAlignedMvg => "Hard-aligned MVG",
            Variant::SoftAlignedRecon => "Soft-aligned Recon.",
            Variant::DiffusionLoss => "Distill -> Diffusion loss",
            Variant::DiffusionLossNoReconAlign => "Diffusion loss + w/o Recon. Align",
        }
    }

    /// Whether the variant trains at all.
    pub fn trains(self) -> bool {
        !matches!(self, Variant::TwoStagePretrained | Variant::Pretrained3dAware)
    }

    /// Sampling loop used for evaluation.
    pub fn mode(self) -> SamplingMode {
        match self {
            Variant::TwoStagePretrained => SamplingMode::TwoStage,
            _ => SamplingMode::Aligncvc,
        }
    }

    /// The experiment config for this variant, derived from the base.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let a = &mut c.align;
        match self {
            Variant::TwoStagePretrained | Variant::Pretrained3dAware | Variant::Joint => {}
            Variant::FixedMvg => a.train_mvg = false,
            Variant::FixedRecon => a.train_recon = false,
            Variant::NoReconLoss => a.lambda_recon = 0.0,
            Variant::NoMvgAlign => a.lambda_distill = 0.0,
            Variant::NoReconAlign => a.lambda_gan = 0.0,
            Variant::NoDistributionAlign => {
                a.lambda_distill = 0.0;
                a.lambda_gan = 0.0;
            }
            Variant::HardAlignedMvg => a.objective = MvgObjective::Gan,
            Variant::SoftAlignedRecon => a.recon_objective = ReconObjective::Distill,
            Variant::DiffusionLoss => a.objective = MvgObjective::Diffusion,
            Variant::DiffusionLossNoReconAlign => {
                a.objective = MvgObjective::Diffusion;
                a.lambda_gan = 0.0;
            }
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.iter().copied().find(|v| v.key() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.key()).collect();
            param_err!("unknown variant {s:?}; supported: {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub cvc: f64,
    pub scenes: usize,
    pub failures: usize,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Variant | PSNR | SSIM | CVC proxy |\n|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!("| {} | {:.3} | {:.4} | {:.4} |\n", r.label, r.psnr, r.ssim, r.cvc));
        }
        out
    }
}

/// Trains (when needed) and evaluates each variant from the same pretrained
/// checkpoint and seeds.
pub fn run_ablation(exp: &Experiment, pretrained: &Checkpoint, variants: &[Variant], log: &mut Logger) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &v in variants {
        let start = Instant::now();
        let vexp = Experiment {
            config: v.apply(&exp.config),
            schedule: exp.schedule.clone(),
            plan: exp.plan.clone(),
            geometry: exp.geometry.clone(),
            train: exp.train.clone(),
            eval: exp.eval.clone(),
        };
        let models = if v.trains() {
            run_training(&vexp, pretrained, None, log)?.models
        } else {
            let mut m = vexp.init_models();
            pretrained.apply(&mut m)?;
            m
        };
        let train_seconds = start.elapsed().as_secs_f64();
        let report = vexp.evaluate(&models, v.mode());
        log.log(
            "ablation_row",
            json!({ "variant": v.key(), "psnr": report.psnr, "ssim": report.ssim, "cvc": report.cvc }),
        );
        table.rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            psnr: report.psnr,
            ssim: report.ssim,
            cvc: report.cvc,
            scenes: report.count,
            failures: report.failures.len(),
            train_seconds,
        });
    }
    Ok(table)
}

/// Samples one scene with the configured loop; used by the CLI.
pub fn sample_scene(exp: &Experiment, models: &Models, sample: &Sample, mode: SamplingMode, run_seed: u64) -> Result<SampleOutput> {
    let batch = TrainBatch::from_samples(std::slice::from_ref(sample))?;
    let cond = batch.conditioning();
    let sampler = exp.sampler(models);
    match mode {
        SamplingMode::Aligncvc => sampler.aligncvc(&cond, &exp.plan, run_seed),
        SamplingMode::TwoStage => sampler.two_stage(&cond, &exp.plan, run_seed),
    }
}

/// The pretrained reconstructor weights recorded in a checkpoint.
pub fn pretrained_recon(ck: &Checkpoint) -> Result<&ParamStore<f32>> {
    ck.store(RECON_PRETRAINED).ok_or_else(|| Error::Config("checkpoint has no pretrained reconstructor".into()))
}
