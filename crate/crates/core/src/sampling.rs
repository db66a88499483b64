//! Inference loops: the two-stage baseline (denoise fully, reconstruct once)
//! and 3D-aware sampling, where each step's reconstruction is rendered,
//! re-noised and fed back as the next denoising state.

use std::time::Instant;

use gradtape::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, Denoiser, DenoiserParams, NoisePredictor};
use crate::error::{param_err, Error, Result};
use crate::pipeline::Models;
use crate::recon::{Reconstructor, ViewGeometry};
use crate::render::RenderOutput;
use crate::scene::{Scene3D, SceneStats};
use crate::schedule::{eps_from_x0, from_signal, predict_x0, renoise, reproject, NoiseDraw, NoiseSchedule, TimestepPlan};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Weight of the re-noised rendering in the next state; the remainder
    /// comes from the deterministic step of the current state.
    pub feedback_mix: f64,
    pub clip_x0: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { feedback_mix: 1.0, clip_x0: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

impl TensorStats {
    pub fn of(t: &Tensor<f32>) -> Self {
        let d = t.data();
        TensorStats {
            min: d.iter().copied().fold(f32::INFINITY, f32::min),
            max: d.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            mean: (d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64) as f32,
        }
    }
}

/// One denoising step of a sampling run.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub k: usize,
    pub t_k: usize,
    /// Clean estimate in image range `(B * N, R, R, 3)`.
    pub x_hat: Tensor<f32>,
    /// Renders of this step's reconstruction, when one was made.
    pub x_tilde: Option<RenderOutput<f32>>,
    pub scene_stats: Vec<SceneStats>,
    pub seconds_denoise: f64,
    pub seconds_reconstruct: f64,
    pub seconds_render: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SamplingTrace {
    pub records: Vec<StepRecord>,
    pub denoise_calls: usize,
    pub reconstruct_calls: usize,
    pub render_calls: usize,
}

#[derive(Serialize)]
struct RecordLine<'a> {
    k: usize,
    t_k: usize,
    x_hat: TensorStats,
    x_tilde: Option<TensorStats>,
    scenes: &'a [SceneStats],
    seconds_denoise: f64,
    seconds_reconstruct: f64,
    seconds_render: f64,
}

impl SamplingTrace {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = RecordLine {
                k: r.k,
                t_k: r.t_k,
                x_hat: TensorStats::of(&r.x_hat),
                x_tilde: r.x_tilde.as_ref().map(|x| TensorStats::of(&x.rgb)),
                scenes: &r.scene_stats,
                seconds_denoise: r.seconds_denoise,
                seconds_reconstruct: r.seconds_reconstruct,
                seconds_render: r.seconds_render,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_content(&self, other: &Self) -> bool {
        self.denoise_calls == other.denoise_calls
            && self.reconstruct_calls == other.reconstruct_calls
            && self.render_calls == other.render_calls
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.k == b.k
                    && a.t_k == b.t_k
                    && a.x_hat == b.x_hat
                    && a.scene_stats == b.scene_stats
                    && match (&a.x_tilde, &b.x_tilde) {
                        (Some(x), Some(y)) => x.rgb == y.rgb && x.depth == y.depth && x.opacity == y.opacity,
                        (None, None) => true,
                        _ => false,
                    }
            })
    }
}

/// The models a sampling run uses.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub denoiser: &'a Denoiser,
    pub mvg: &'a DenoiserParams,
    /// Apply the student adapter; off evaluates the teacher weights.
    pub use_adapter: bool,
    pub recon: &'a Reconstructor,
    pub recon_params: &'a ParamStore<f32>,
    pub geometry: &'a ViewGeometry<f32>,
    pub schedule: &'a NoiseSchedule,
    pub cfg: SamplingConfig,
}

/// Output of a sampling run over `B` scenes.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Final clean views, image range (two-stage only; the 3D-aware loop
    /// reports the last step's estimate).
    pub views: Tensor<f32>,
    pub scenes: Vec<Scene3D>,
    pub trace: SamplingTrace,
}

impl<'a> Sampler<'a> {
    pub fn new(models: &'a Models, geometry: &'a ViewGeometry<f32>, schedule: &'a NoiseSchedule, cfg: SamplingConfig) -> Self {
        Sampler {
            denoiser: &models.denoiser,
            mvg: &models.mvg,
            use_adapter: true,
            recon: &models.recon,
            recon_params: &models.recon_params,
            geometry,
            schedule,
            cfg,
        }
    }

    fn eps(&self, x: &Tensor<f32>, t: usize, cond: &Conditioning<f32>) -> Result<Tensor<f32>> {
        let ts = vec![t; cond.scenes()];
        if self.use_adapter {
            crate::pipeline::Student { net: self.denoiser, params: self.mvg }.predict_eps(x, &ts, cond)
        } else {
            crate::pipeline::Teacher { net: self.denoiser, params: self.mvg }.predict_eps(x, &ts, cond)
        }
    }

    /// Clean estimate and the noise consistent with it. Clipped elements get
    /// their noise recomputed so reprojection stays on the clipped estimate.
    fn clean(&self, x: &Tensor<f32>, eps: Tensor<f32>, t: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let x0 = predict_x0(x, &eps, t, self.schedule)?;
        if !self.cfg.clip_x0 || x0.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Ok((x0, eps));
        }
        let clipped = x0.map(|v| v.clamp(-1.0, 1.0));
        let implied = eps_from_x0(x, &clipped, t, self.schedule)?;
        let mut eps = eps;
        for ((e, &i), &raw) in eps.data_mut().iter_mut().zip(implied.data()).zip(x0.data()) {
            if !(-1.0..=1.0).contains(&raw) {
                *e = i;
            }
        }
        Ok((clipped, eps))
    }

    fn to_image(x0: &Tensor<f32>) -> Tensor<f32> {
        from_signal(x0).map(|v| v.clamp(0.0, 1.0))
    }

    fn initial_state(&self, cond: &Conditioning<f32>, run_seed: u64) -> Tensor<f32> {
        let r = self.geometry.resolution();
        let shape = [cond.scenes() * cond.views(), r, r, 3];
        NoiseDraw::new(&shape, seed::derive(run_seed, "sample.init", 0)).eps
    }

    fn check_inputs(&self, cond: &Conditioning<f32>) -> Result<()> {
        if cond.poses != *self.geometry.poses() {
            return Err(param_err!("conditioning poses differ from the sampler geometry"));
        }
        Ok(())
    }

    fn reconstruct_and_render(&self, img: &Tensor<f32>, trace: &mut SamplingTrace) -> Result<(Vec<Scene3D>, RenderOutput<f32>, f64, f64)> {
        let t0 = Instant::now();
        let scenes = self.recon.reconstruct(self.recon_params, img, self.geometry)?;
        trace.reconstruct_calls += 1;
        let t1 = Instant::now();
        let stacked = stack_scene_rows(&scenes);
        let out = self.geometry.rig.render_full(&stacked);
        trace.render_calls += 1;
        Ok((scenes, out, (t1 - t0).as_secs_f64(), t1.elapsed().as_secs_f64()))
    }

    /// Full `K`-step deterministic denoising to a clean estimate, then one
    /// reconstruction.
    pub fn two_stage(&self, cond: &Conditioning<f32>, plan: &TimestepPlan, run_seed: u64) -> Result<SampleOutput> {
        self.check_inputs(cond)?;
        let mut trace = SamplingTrace::default();
        let mut x = self.initial_state(cond, run_seed);
        let steps = plan.steps();
        let mut last = None;
        for (i, &t) in steps.iter().enumerate() {
            let k = steps.len() - i;
            let t0 = Instant::now();
            let eps = self.eps(&x, t, cond)?;
            trace.denoise_calls += 1;
            let (x0, eps) = self.clean(&x, eps, t)?;
            finite(&x0, "x_hat", k)?;
            if let Some(&t_next) = steps.get(i + 1) {
                x = reproject(&x0, &eps, t_next, self.schedule)?;
            }
            let img = Self::to_image(&x0);
            trace.records.push(StepRecord {
                k,
                t_k: t,
                x_hat: img.clone(),
                x_tilde: None,
                scene_stats: Vec::new(),
                seconds_denoise: t0.elapsed().as_secs_f64(),
                seconds_reconstruct: 0.0,
                seconds_render: 0.0,
            });
            last = Some(img);
        }
        let views = last.ok_or_else(|| param_err!("empty timestep plan"))?;
        let (scenes, out, sr, sq) = self.reconstruct_and_render(&views, &mut trace)?;
        let rec = trace.records.last_mut().expect("at least one record");
        rec.scene_stats = scenes.iter().map(Scene3D::stats).collect();
        rec.x_tilde = Some(out);
        rec.seconds_reconstruct = sr;
        rec.seconds_render = sq;
        Ok(SampleOutput { views, scenes, trace })
    }

    /// 3D-aware sampling: denoise, reconstruct and render at every step; the
    /// re-noised render becomes the next state.
    pub fn aligncvc(&self, cond: &Conditioning<f32>, plan: &TimestepPlan, run_seed: u64) -> Result<SampleOutput> {
        self.aligncvc_from(cond, plan, run_seed, None)
    }

    /// [`Sampler::aligncvc`] with a hook that may modify the generator's own
    /// deterministic next state before it is blended with the feedback.
    pub fn aligncvc_from(
        &self,
        cond: &Conditioning<f32>,
        plan: &TimestepPlan,
        run_seed: u64,
        perturb: Option<&dyn Fn(usize, &mut Tensor<f32>)>,
    ) -> Result<SampleOutput> {
        self.check_inputs(cond)?;
        let mix = self.cfg.feedback_mix;
        if !(0.0..=1.0).contains(&mix) {
            return Err(param_err!("feedback mix must lie in [0, 1], got {mix}"));
        }
        let mut trace = SamplingTrace::default();
        let mut x = self.initial_state(cond, run_seed);
        let steps = plan.steps();
        let mut final_scenes = Vec::new();
        let mut views = Tensor::zeros(vec![0]);
        for (i, &t) in steps.iter().enumerate() {
            let k = steps.len() - i;
            let t0 = Instant::now();
            let eps = self.eps(&x, t, cond)?;
            trace.denoise_calls += 1;
            let (x0, eps) = self.clean(&x, eps, t)?;
            finite(&x0, "x_hat", k)?;
            let sd = t0.elapsed().as_secs_f64();
            let img = Self::to_image(&x0);
            let (scenes, out, sr, sq) = self.reconstruct_and_render(&img, &mut trace)?;
            finite(&out.rgb, "x_tilde", k)?;
            if let Some(&t_next) = steps.get(i + 1) {
                let fed = renoise(&out.rgb, t_next, seed::derive(run_seed, "sample.renoise", k as u64), self.schedule)?;
                let next = if mix == 1.0 && perturb.is_none() {
                    fed
                } else {
                    let mut own = reproject(&x0, &eps, t_next, self.schedule)?;
                    if let Some(p) = perturb {
                        p(k, &mut own);
                    }
                    let m = mix as f32;
                    fed.zip_map(&own, |f, o| m * f + (1.0 - m) * o)
                };
                x = next;
            }
            trace.records.push(StepRecord {
                k,
                t_k: t,
                x_hat: img.clone(),
                x_tilde: Some(out),
                scene_stats: scenes.iter().map(Scene3D::stats).collect(),
                seconds_denoise: sd,
                seconds_reconstruct: sr,
                seconds_render: sq,
            });
            views = img;
            final_scenes = scenes;
        }
        Ok(SampleOutput { views, scenes: final_scenes, trace })
    }
}

fn finite(t: &Tensor<f32>, what: &str, k: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.to_string(), step: k })
    }
}

pub fn stack_scene_rows(scenes: &[Scene3D]) -> Tensor<f32> {
    let rows: Vec<Tensor<f32>> = scenes.iter().map(|s| s.to_rows()).collect();
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Sampling ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// 3D-aware sampling with the pretrained teacher and reconstructor.
    Pretrained3dAware,
    /// Adapter disabled: generator held at the teacher weights.
    FixedMvg,
    /// Reconstructor held at its pretrained weights.
    FixedRecon,
    /// Two-stage sampling with the trained models.
    NoFeedback,
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained_3daware" => Ok(Self::Pretrained3dAware),
            "fixed_mvg" => Ok(Self::FixedMvg),
            "fixed_recon" => Ok(Self::FixedRecon),
            "no_feedback" => Ok(Self::NoFeedback),
            _ => Err(param_err!(
                "unknown sampling variant {s:?}; supported: pretrained_3daware, fixed_mvg, fixed_recon, no_feedback"
            )),
        }
    }
}

/// Runs one sampling ablation. `pretrained_recon` holds the reconstructor
/// weights before joint training.
pub fn ablation_sample(
    variant: AblationVariant,
    trained: &Sampler,
    pretrained_recon: &ParamStore<f32>,
    cond: &Conditioning<f32>,
    plan: &TimestepPlan,
    run_seed: u64,
) -> Result<SampleOutput> {
    let mut s = *trained;
    match variant {
        AblationVariant::Pretrained3dAware => {
            s.use_adapter = false;
            s.recon_params = pretrained_recon;
            s.aligncvc(cond, plan, run_seed)
        }
        AblationVariant::FixedMvg => {
            s.use_adapter = false;
            s.aligncvc(cond, plan, run_seed)
        }
        AblationVariant::FixedRecon => {
            s.recon_params = pretrained_recon;
            s.aligncvc(cond, plan, run_seed)
        }
        AblationVariant::NoFeedback => s.two_stage(cond, plan, run_seed),
    }
}
