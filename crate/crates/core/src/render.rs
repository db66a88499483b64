//! Differentiable emission-absorption rendering of voxel scenes.
//!
//! Sampling positions along every ray of a pose set are fixed once per
//! [`Rig`], so trilinear lookup becomes a sparse linear map from scene rows
//! to sample rows and the whole renderer is two tape ops.

use std::sync::Arc;

use gradtape::kernels::composite_ray;
use gradtape::{Graph, Scalar, SparseMap, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::camera::{axpy, CameraPose, CameraPoseSet, Intrinsics};
use crate::error::{param_err, Result};
use crate::scene::Scene3D;
use crate::views::{MultiViewBatch, Role};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub resolution: usize,
    pub fov_deg: f64,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl RenderConfig {
    /// Near/far planes bracketing the bounding sphere of a grid of half-width
    /// `extent` seen from distance `radius`.
    pub fn bracketing(resolution: usize, radius: f64, extent: f64) -> Self {
        let half = 3f64.sqrt() * extent;
        RenderConfig {
            resolution,
            fov_deg: 40.0,
            samples_per_ray: 32,
            near: (radius - half).max(1e-3),
            far: radius + half,
            background: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(param_err!("samples_per_ray must be >= 2"));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(param_err!("need 0 <= near < far, got {}..{}", self.near, self.far));
        }
        if self.resolution == 0 || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(param_err!("invalid resolution or field of view"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(param_err!("background color must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { resolution: self.resolution, fov_deg: self.fov_deg }
    }

    /// Midpoint distance of each sample along a unit ray.
    pub fn sample_distances(&self) -> Vec<f64> {
        let s = self.samples_per_ray;
        let step = (self.far - self.near) / s as f64;
        (0..s).map(|i| self.near + (i as f64 + 0.5) * step).collect()
    }

    pub fn delta(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }
}

/// Trilinear interpolation taps of point `p` in a `grid^3` lattice over
/// `[-extent, extent]^3`; corners outside the lattice are dropped.
pub fn trilinear_taps(p: [f64; 3], grid: usize, extent: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let g = grid as f64;
    let mut base = [0i64; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let f = (p[a] + extent) / (2.0 * extent) * g - 0.5;
        if !(f > -1.0 && f < g) {
            return;
        }
        let fl = f.floor();
        base[a] = fl as i64;
        frac[a] = f - fl;
    }
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            let i = base[a] + bit as i64;
            if i < 0 || i >= grid as i64 {
                inside = false;
                break;
            }
            idx[a] = i as usize;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if inside && w > 0.0 {
            out.push(((idx[0] * grid + idx[1]) * grid + idx[2], w));
        }
    }
}

/// Precomputed sampling geometry for one pose set, grid size and config.
#[derive(Clone, Debug)]
pub struct Rig<T: Scalar> {
    map: Arc<SparseMap<T>>,
    deltas: Arc<Vec<T>>,
    distances: Vec<T>,
    views: usize,
    grid: usize,
    cfg: RenderConfig,
}

/// Full per-pixel render output: color plus expected depth and opacity.
#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    /// `(scenes * views, R, R, 3)`.
    pub rgb: Tensor<T>,
    /// `(scenes * views, R, R)`, unnormalized expected depth `sum w_i d_i`.
    pub depth: Tensor<T>,
    /// `(scenes * views, R, R)`, `sum w_i`.
    pub opacity: Tensor<T>,
}

impl<T: Scalar> Rig<T> {
    pub fn new(poses: &CameraPoseSet, grid: usize, extent: f64, cfg: &RenderConfig) -> Result<Self> {
        cfg.validate()?;
        let intr = cfg.intrinsics();
        let r = cfg.resolution;
        let dist = cfg.sample_distances();
        let mut b = SparseMap::builder(grid * grid * grid);
        let mut taps = Vec::with_capacity(8);
        for pose in poses.poses() {
            let frame = pose.frame();
            for row in 0..r {
                for col in 0..r {
                    let dir = intr.ray_dir(&frame, row, col);
                    for &t in &dist {
                        trilinear_taps(axpy(t, dir, frame.origin), grid, extent, &mut taps);
                        b.push_row(taps.iter().map(|&(i, w)| (i, T::of(w))));
                    }
                }
            }
        }
        Ok(Rig {
            map: Arc::new(b.finish()),
            deltas: Arc::new(vec![T::of(cfg.delta()); cfg.samples_per_ray]),
            distances: dist.into_iter().map(T::of).collect(),
            views: poses.len(),
            grid,
            cfg: *cfg,
        })
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }

    fn background(&self) -> [T; 3] {
        self.cfg.background.map(T::of)
    }

    /// Differentiable render of `scenes` stacked as `(B * G^3, 4)` rows of
    /// `[sigma, r, g, b]`; returns `(B * views, R, R, 3)`.
    pub fn render(&self, g: &Graph<T>, scene_rows: Var) -> Var {
        let rows = g.shape(scene_rows)[0];
        let b = rows / self.map.in_rows();
        let r = self.cfg.resolution;
        let s = self.cfg.samples_per_ray;
        let samples = g.sparse(scene_rows, &self.map);
        let samples = g.reshape(samples, &[b * self.views * r * r, s, 4]);
        let rgb = g.composite(samples, &self.deltas, self.background());
        g.reshape(rgb, &[b * self.views, r, r, 3])
    }

    /// Non-differentiable render that also reports depth and opacity.
    pub fn render_full(&self, scene_rows: &Tensor<T>) -> RenderOutput<T> {
        let b = scene_rows.shape()[0] / self.map.in_rows();
        let r = self.cfg.resolution;
        let s = self.cfg.samples_per_ray;
        let samples = self.map.apply(scene_rows);
        let rays = b * self.views * r * r;
        let mut rgb = Vec::with_capacity(rays * 3);
        let mut depth = Vec::with_capacity(rays);
        let mut opacity = Vec::with_capacity(rays);
        let bg = self.background();
        for ray in samples.data().chunks_exact(4 * s) {
            let out = composite_ray(ray, &self.deltas, Some(&self.distances), bg);
            rgb.extend_from_slice(&out.rgb);
            depth.push(out.depth);
            opacity.push(out.opacity);
        }
        RenderOutput {
            rgb: Tensor::new(vec![b * self.views, r, r, 3], rgb),
            depth: Tensor::new(vec![b * self.views, r, r], depth),
            opacity: Tensor::new(vec![b * self.views, r, r], opacity),
        }
    }
}

/// Renders one scene from one pose; returns an `(R, R, 3)` image.
pub fn render(scene: &Scene3D, pose: CameraPose, cfg: &RenderConfig) -> Result<Tensor<f32>> {
    let set = CameraPoseSet::new(vec![pose])?;
    let rig = Rig::<f32>::new(&set, scene.grid(), scene.extent() as f64, cfg)?;
    let out = rig.render_full(&scene.to_rows());
    Ok(out.rgb.reshape(vec![cfg.resolution, cfg.resolution, 3]))
}

/// Renders one scene from every pose of a set.
pub fn render_multiview(
    scene: &Scene3D,
    poses: &CameraPoseSet,
    cfg: &RenderConfig,
) -> Result<(MultiViewBatch, RenderOutput<f32>)> {
    let rig = Rig::<f32>::new(poses, scene.grid(), scene.extent() as f64, cfg)?;
    let out = rig.render_full(&scene.to_rows());
    let batch = MultiViewBatch::new(out.rgb.clone(), poses.clone(), Role::Rendered)?;
    Ok((batch, out))
}
