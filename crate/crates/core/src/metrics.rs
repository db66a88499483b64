//! Image metrics, a depth-warp cross-view-consistency score, and report
//! aggregation over a dataset split.

use std::path::Path;
use std::time::Instant;

use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::alignment::TrainBatch;
use crate::camera::{dot, CameraPoseSet, Intrinsics};
use crate::data::Sample;
use crate::error::{param_err, Error, Result};
use crate::sampling::{stack_scene_rows, Sampler};
use crate::schedule::TimestepPlan;

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio over all elements, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(param_err!("psnr shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    if !(peak > 0.0) {
        return Err(param_err!("psnr peak must be positive, got {peak}"));
    }
    let n = a.numel().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Windowed SSIM with a separable Gaussian window, averaged over every
/// fully-contained window position, channel and image. Inputs are
/// `(..., H, W, C)`.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(param_err!("ssim shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let sh = a.shape();
    if sh.len() < 3 {
        return Err(param_err!("ssim expects (..., H, W, C) images, got {sh:?}"));
    }
    let (h, w, c) = (sh[sh.len() - 3], sh[sh.len() - 2], sh[sh.len() - 1]);
    let win = cfg.window;
    if win % 2 == 0 || win == 0 || win > h || win > w {
        return Err(param_err!("ssim window must be odd and fit the {h}x{w} image, got {win}"));
    }
    let g = gaussian_window(win, cfg.sigma);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let images = a.numel() / (h * w * c);
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut total = 0.0;
    for img in 0..images {
        let base = img * h * w * c;
        for ch in 0..c {
            let at = |t: &[f32], y: usize, x: usize| t[base + (y * w + x) * c + ch] as f64;
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (dy, gy) in g.iter().enumerate() {
                        for (dx, gx) in g.iter().enumerate() {
                            let wgt = gy * gx;
                            let va = at(a.data(), y0 + dy, x0 + dx);
                            let vb = at(b.data(), y0 + dy, x0 + dx);
                            ma += wgt * va;
                            mb += wgt * vb;
                            saa += wgt * va * va;
                            sbb += wgt * vb * vb;
                            sab += wgt * va * vb;
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
        }
    }
    Ok(total / (images * c * oh * ow) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvcConfig {
    /// Color difference (mean absolute over channels) at which agreement
    /// reaches zero.
    pub agreement_scale: f64,
    pub opacity_threshold: f64,
    /// Max gap between the warped point's distance to the target camera and
    /// the target's own depth; larger gaps count as occluded.
    pub depth_tolerance: f64,
    pub top_k: usize,
    /// Count missing matches as zero agreement when a pair has fewer than
    /// `top_k` valid pixels.
    pub pad_missing: bool,
    /// Render background; colors are compared after removing its
    /// contribution from partially transparent pixels.
    pub background: [f64; 3],
}

impl Default for CvcConfig {
    fn default() -> Self {
        CvcConfig { agreement_scale: 0.5, opacity_threshold: 0.5, depth_tolerance: 0.03, top_k: 100, pad_missing: false, background: [1.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvcScore {
    pub score: f64,
    /// Set when no pair had a valid warped pixel (including `N = 1`).
    pub no_valid_pixels: bool,
    pub pair_scores: Vec<f64>,
    pub pair_valid: Vec<usize>,
}

/// View pairs compared by the proxy: each view with its successor, wrapping
/// around when there are more than two views.
pub fn adjacent_pairs(n: usize) -> Vec<(usize, usize)> {
    match n {
        0 | 1 => Vec::new(),
        2 => vec![(0, 1)],
        _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
    }
}

/// Cross-view consistency of one scene's views.
///
/// `views` is `(N, R, R, 3)`; `depth` and `opacity` are `(N, R, R)` as
/// returned by the renderer. Every pixel of view `i` with enough opacity is
/// lifted to 3D with its normalized depth, projected into view `j`, and
/// compared with the nearest target pixel when that pixel is opaque and not
/// occluding the point. Colors are compared with the background
/// contribution removed. Each pair's score is the mean of its `top_k` best
/// agreements.
pub fn cvc_proxy(
    views: &Tensor<f32>,
    depth: &Tensor<f32>,
    opacity: &Tensor<f32>,
    poses: &CameraPoseSet,
    intr: &Intrinsics,
    cfg: &CvcConfig,
) -> Result<CvcScore> {
    let n = poses.len();
    let r = intr.resolution;
    if views.shape() != [n, r, r, 3] || depth.shape() != [n, r, r] || opacity.shape() != [n, r, r] {
        return Err(param_err!(
            "cvc_proxy expects views (N,R,R,3) and maps (N,R,R) with N={n}, R={r}; got {:?}, {:?}, {:?}",
            views.shape(),
            depth.shape(),
            opacity.shape()
        ));
    }
    let frames: Vec<_> = poses.poses().iter().map(|p| p.frame()).collect();
    let (v, d, o) = (views.data(), depth.data(), opacity.data());
    let thr = cfg.opacity_threshold;
    let mut pair_scores = Vec::new();
    let mut pair_valid = Vec::new();
    for (i, j) in adjacent_pairs(n) {
        let mut agree = Vec::new();
        for row in 0..r {
            for col in 0..r {
                let p = (i * r + row) * r + col;
                let op = o[p] as f64;
                if op <= thr {
                    continue;
                }
                let dist = d[p] as f64 / op;
                let dir = intr.ray_dir(&frames[i], row, col);
                let f = &frames[i];
                let x = [f.origin[0] + dist * dir[0], f.origin[1] + dist * dir[1], f.origin[2] + dist * dir[2]];
                let Some((pr, pc)) = intr.project(&frames[j], x) else { continue };
                let (qr, qc) = (pr.round(), pc.round());
                if qr < 0.0 || qc < 0.0 || qr >= r as f64 || qc >= r as f64 {
                    continue;
                }
                let q = (j * r + qr as usize) * r + qc as usize;
                let oq = o[q] as f64;
                if oq <= thr {
                    continue;
                }
                let fj = &frames[j];
                let rel = [x[0] - fj.origin[0], x[1] - fj.origin[1], x[2] - fj.origin[2]];
                let seen = dot(rel, rel).sqrt();
                if (seen - d[q] as f64 / oq).abs() > cfg.depth_tolerance {
                    continue;
                }
                let bg = cfg.background;
                let fg = |px: usize, op: f64, c: usize| (v[px * 3 + c] as f64 - (1.0 - op) * bg[c]) / op;
                let diff: f64 = (0..3).map(|c| (fg(p, op, c) - fg(q, oq, c)).abs()).sum::<f64>() / 3.0;
                agree.push((1.0 - diff / cfg.agreement_scale).max(0.0));
            }
        }
        pair_valid.push(agree.len());
        if agree.is_empty() {
            pair_scores.push(0.0);
            continue;
        }
        agree.sort_by(|a, b| b.total_cmp(a));
        let k = cfg.top_k.min(agree.len());
        let denom = if cfg.pad_missing { cfg.top_k } else { k };
        pair_scores.push(agree[..k].iter().sum::<f64>() / denom as f64);
    }
    let no_valid_pixels = pair_valid.iter().all(|&c| c == 0);
    let score = if no_valid_pixels { 0.0 } else { pair_scores.iter().sum::<f64>() / pair_scores.len() as f64 };
    Ok(CvcScore { score, no_valid_pixels, pair_scores, pair_valid })
}

/// Which inference loop an evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Aligncvc,
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub cvc: f64,
    pub cvc_flag: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene_id: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: SamplingMode,
    pub scenes: Vec<SceneMetrics>,
    pub failures: Vec<SceneFailure>,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub cvc: f64,
    pub seconds: f64,
}

impl EvalReport {
    /// Aggregates per-scene entries by plain means.
    pub fn from_scenes(mode: SamplingMode, scenes: Vec<SceneMetrics>, failures: Vec<SceneFailure>) -> Self {
        let n = scenes.len();
        let mean = |f: fn(&SceneMetrics) -> f64| if n == 0 { 0.0 } else { scenes.iter().map(f).sum::<f64>() / n as f64 };
        EvalReport {
            mode,
            count: n,
            psnr: mean(|s| s.psnr),
            ssim: mean(|s| s.ssim),
            cvc: mean(|s| s.cvc),
            seconds: mean(|s| s.seconds),
            scenes,
            failures,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,psnr,ssim,cvc,seconds\n");
        for s in &self.scenes {
            out.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", s.scene_id, s.psnr, s.ssim, s.cvc, s.seconds));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ssim: SsimConfig,
    pub cvc: CvcConfig,
}

/// Scores one reconstruction against its ground-truth views.
pub fn score_scene(
    sampler: &Sampler,
    scene: &crate::scene::Scene3D,
    gt: &Tensor<f32>,
    cfg: &EvalConfig,
) -> Result<(f64, f64, CvcScore)> {
    let out = sampler.geometry.rig.render_full(&stack_scene_rows(std::slice::from_ref(scene)));
    let p = psnr(&out.rgb, gt, 1.0)?;
    let s = ssim(&out.rgb, gt, &cfg.ssim)?;
    let intr = sampler.geometry.rig.config().intrinsics();
    let c = cvc_proxy(&out.rgb, &out.depth, &out.opacity, sampler.geometry.poses(), &intr, &cfg.cvc)?;
    Ok((p, s, c))
}

/// Samples every scene from its condition image, renders the final
/// reconstruction at the ground-truth poses and scores it. Scenes are
/// sampled one at a time with seed `run_seed + scene id`; failures are
/// recorded per scene.
pub fn evaluate(
    sampler: &Sampler,
    samples: &[Sample],
    plan: &TimestepPlan,
    mode: SamplingMode,
    run_seed: u64,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut scenes = Vec::new();
    let mut failures = Vec::new();
    for s in samples {
        let start = Instant::now();
        let res = (|| {
            let batch = TrainBatch::from_samples(std::slice::from_ref(s))?;
            let cond = batch.conditioning();
            let seed = crate::seed::derive(run_seed, "eval.sample", s.id as u64);
            let out = match mode {
                SamplingMode::Aligncvc => sampler.aligncvc(&cond, plan, seed)?,
                SamplingMode::TwoStage => sampler.two_stage(&cond, plan, seed)?,
            };
            let scene = out.scenes.into_iter().next().ok_or_else(|| param_err!("sampler returned no scene"))?;
            score_scene(sampler, &scene, &batch.x_gt, cfg)
        })();
        match res {
            Ok((psnr, ssim, cvc)) => scenes.push(SceneMetrics {
                scene_id: s.id,
                psnr,
                ssim,
                cvc: cvc.score,
                cvc_flag: cvc.no_valid_pixels,
                seconds: start.elapsed().as_secs_f64(),
            }),
            Err(e) => failures.push(SceneFailure { scene_id: s.id, error: e.to_string() }),
        }
    }
    EvalReport::from_scenes(mode, scenes, failures)
}
