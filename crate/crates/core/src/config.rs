//! Experiment configuration: one tree of sections with dotted keys
//! (`align.lambda_gan`, `sampling.feedback_mix`, ...). Unknown keys are
//! rejected both in files and in `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alignment::{AlignConfig, OptimConfig};
use crate::data::{DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::metrics::{CvcConfig, EvalConfig, SsimConfig};
use crate::pipeline::ModelConfig;
use crate::sampling::SamplingConfig;
use crate::schedule::{build_schedule, make_inference_plan, NoiseSchedule, TimestepPlan};

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "ALIGNCVC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Inference steps `K`.
    pub plan_k: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02, plan_k: 4 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<(NoiseSchedule, TimestepPlan)> {
        let s = build_schedule(self.steps, self.beta_start, self.beta_end)?;
        let plan = make_inference_plan(self.plan_k, &s)?;
        Ok((s, plan))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub recon_steps: usize,
    pub recon_lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { teacher_steps: 3000, teacher_lr: 1e-3, recon_steps: 1000, recon_lr: 1e-3, batch: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub ckpt_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1000, batch: 4, ckpt_every: 250, log_every: 50 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub ssim: SsimConfig,
    pub cvc: CvcConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let m = EvalConfig::default();
        EvalSection { split: Split::Test, ssim: m.ssim, cvc: m.cvc }
    }
}

impl EvalSection {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig { ssim: self.ssim, cvc: self.cvc }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; data, initialization, training noise and evaluation
    /// seeds are all derived from it.
    pub seed: u64,
    /// Number of scenes in the generated dataset (train plus held out).
    pub scene_count: usize,
    pub schedule: ScheduleConfig,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub align: AlignConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scene_count: 200,
            schedule: ScheduleConfig::default(),
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            align: AlignConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn leaves(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every dotted key with its current value, sorted by key.
    pub fn flatten(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        leaves("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Applies one `key=value` override. The value is parsed as JSON when
    /// possible and taken as a string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        if node.is_object() {
            return Err(Error::Config(format!("config key {key:?} names a section, not a value")));
        }
        *node = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid value for {key:?}: {e}")))?;
        Ok(())
    }

    /// Applies the seed environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a = self.flatten();
        let b = other.flatten();
        let mut out = Vec::new();
        for (k, v) in &a {
            match b.iter().find(|(kb, _)| kb == k) {
                Some((_, vb)) if vb == v => {}
                Some((_, vb)) => out.push(format!("{k}: {v} -> {vb}")),
                None => out.push(format!("{k}: {v} -> (missing)")),
            }
        }
        out
    }
}
