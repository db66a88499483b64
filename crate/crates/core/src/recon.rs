//! Feed-forward reconstruction of a voxel scene from posed views.
//!
//! Each view is encoded by a small conv net, features are unprojected into
//! the grid by bilinear lookup at every cell center's projection, pooled
//! across views (mean and mean of squares), then decoded per cell with two
//! rounds of 3x3x3 neighborhood context into density and color.

use std::sync::Arc;

use gradtape::{Graph, ParamStore, Scalar, SparseMap, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPoseSet;
use crate::error::{param_err, Result};
use crate::nn::{Builder, Conv, Ctx, Linear};
use crate::render::{RenderConfig, Rig};
use crate::scene::Scene3D;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub grid: usize,
    pub extent: f64,
    pub features: usize,
    pub hidden: usize,
    pub pe_freqs: usize,
    /// Density is `density_scale * softplus(raw)`.
    pub density_scale: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig { grid: 16, extent: 1.0, features: 16, hidden: 32, pe_freqs: 2, density_scale: 10.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstructor {
    cfg: ReconConfig,
    enc0: Conv,
    enc1: Conv,
    cell_in: Linear,
    cell_ctx1: Linear,
    cell_ctx2: Linear,
    head: Linear,
}

/// Fixed sparse operators for one pose set: view-to-grid unprojection,
/// grid neighborhood averaging, and the renderer rig.
#[derive(Clone, Debug)]
pub struct ViewGeometry<T: Scalar> {
    poses: CameraPoseSet,
    resolution: usize,
    unproject: Arc<SparseMap<T>>,
    neighbors: Arc<SparseMap<T>>,
    posenc: Tensor<T>,
    pub rig: Rig<T>,
}

impl<T: Scalar> ViewGeometry<T> {
    pub fn new(poses: &CameraPoseSet, cfg: &ReconConfig, render: &RenderConfig) -> Result<Self> {
        let g = cfg.grid;
        let r = render.resolution;
        let n = poses.len();
        let intr = render.intrinsics();
        let center = |i: usize| -cfg.extent + (i as f64 + 0.5) * 2.0 * cfg.extent / g as f64;

        let mut b = SparseMap::builder(n * r * r);
        let frames: Vec<_> = poses.poses().iter().map(|p| p.frame()).collect();
        for ix in 0..g {
            for iy in 0..g {
                for iz in 0..g {
                    let p = [center(ix), center(iy), center(iz)];
                    for (v, f) in frames.iter().enumerate() {
                        let mut taps = Vec::with_capacity(4);
                        if let Some((row, col)) = intr.project(f, p) {
                            bilinear_taps(row, col, r, &mut taps);
                        }
                        b.push_row(taps.into_iter().map(|(px, w)| (v * r * r + px, T::of(w))));
                    }
                }
            }
        }
        let unproject = Arc::new(b.finish());

        let mut nb = SparseMap::builder(g * g * g);
        for ix in 0..g as i64 {
            for iy in 0..g as i64 {
                for iz in 0..g as i64 {
                    let mut taps = Vec::with_capacity(27);
                    for (dx, dy, dz) in (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| (a, b, c)))) {
                        let (x, y, z) = (ix + dx, iy + dy, iz + dz);
                        let inside = |v: i64| (0..g as i64).contains(&v);
                        if inside(x) && inside(y) && inside(z) {
                            taps.push(((x as usize * g + y as usize) * g + z as usize, 1.0));
                        }
                    }
                    let inv = 1.0 / taps.len() as f64;
                    nb.push_row(taps.into_iter().map(|(i, w)| (i, T::of(w * inv))));
                }
            }
        }

        let pe_dim = 3 + 6 * cfg.pe_freqs;
        let mut pe = Vec::with_capacity(g * g * g * pe_dim);
        for ix in 0..g {
            for iy in 0..g {
                for iz in 0..g {
                    let p = [center(ix), center(iy), center(iz)].map(|v| v / cfg.extent);
                    pe.extend(p.iter().map(|&v| T::of(v)));
                    for k in 0..cfg.pe_freqs {
                        let f = std::f64::consts::PI * (1 << k) as f64;
                        pe.extend(p.iter().map(|&v| T::of((f * v).sin())));
                        pe.extend(p.iter().map(|&v| T::of((f * v).cos())));
                    }
                }
            }
        }

        Ok(ViewGeometry {
            poses: poses.clone(),
            resolution: r,
            unproject,
            neighbors: Arc::new(nb.finish()),
            posenc: Tensor::new(vec![g * g * g, pe_dim], pe),
            rig: Rig::new(poses, g, cfg.extent, render)?,
        })
    }

    pub fn poses(&self) -> &CameraPoseSet {
        &self.poses
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

/// Bilinear taps at continuous pixel coordinates (pixel centers at
/// integers); out-of-frame corners are dropped.
fn bilinear_taps(row: f64, col: f64, r: usize, out: &mut Vec<(usize, f64)>) {
    if !(row > -1.0 && row < r as f64 && col > -1.0 && col < r as f64) {
        return;
    }
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            let (y, x) = (r0 as i64 + dr, c0 as i64 + dc);
            let w = wr * wc;
            if y >= 0 && y < r as i64 && x >= 0 && x < r as i64 && w > 0.0 {
                out.push((y as usize * r + x as usize, w));
            }
        }
    }
}

impl Reconstructor {
    pub fn build(cfg: ReconConfig, init_seed: u64) -> (Self, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(init_seed);
        let f = cfg.features;
        let h = cfg.hidden;
        let pe_dim = 3 + 6 * cfg.pe_freqs;
        let s2 = 2f64.sqrt();
        let mut b = Builder { base: &mut store, adapter: None, rng: &mut rng, lora_rank: 0 };
        let net = Reconstructor {
            enc0: b.conv("recon.enc0", 3, f, s2, false),
            enc1: b.conv("recon.enc1", f, f, s2, false),
            cell_in: b.linear("recon.cell_in", 2 * (f + 3) + pe_dim, h, s2, false),
            cell_ctx1: b.linear("recon.cell_ctx1", 2 * h, h, s2, false),
            cell_ctx2: b.linear("recon.cell_ctx2", 2 * h, h, s2, false),
            head: b.linear("recon.head", h, 4, 0.1, false),
            cfg,
        };
        // Start from a nearly empty scene.
        let head_b = net.head.bias;
        store.get_mut(head_b).data_mut()[0] = -2.0;
        (net, store)
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    /// Maps `(B * N, R, R, 3)` images in `[0, 1]` to scene rows
    /// `(B * G^3, 4)` of `[sigma, r, g, b]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, ctx: Ctx, views: Var, geo: &ViewGeometry<T>) -> Result<Var> {
        let s = g.shape(views);
        let n = geo.poses.len();
        let r = geo.resolution;
        if s.len() != 4 || s[0] % n != 0 || s[0] == 0 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(param_err!("expected (B * {n}, {r}, {r}, 3) views, got {s:?}"));
        }
        let b = s[0] / n;
        let cells = self.cfg.grid.pow(3);

        let x = g.affine(views, T::of(2.0), T::of(-1.0));
        let h = g.silu(self.enc0.forward(g, ctx, x));
        let h = g.silu(self.enc1.forward(g, ctx, h));
        let feats = g.concat(&[h, x]);
        let fdim = self.cfg.features + 3;
        let feats = g.reshape(feats, &[b * n * r * r, fdim]);

        let per_view = g.sparse(feats, &geo.unproject);
        let mean = g.group_mean(per_view, n);
        let meansq = g.group_mean(g.sqr(per_view), n);
        let pe = g.constant(geo.posenc.clone());
        let pe = g.concat_rows(&vec![pe; b]);
        let cell = g.concat(&[mean, meansq, pe]);
        debug_assert_eq!(g.shape(cell)[0], b * cells);

        let h = g.silu(self.cell_in.forward(g, ctx, cell));
        let h = g.silu(self.cell_ctx1.forward(g, ctx, g.concat(&[h, g.sparse(h, &geo.neighbors)])));
        let h = g.silu(self.cell_ctx2.forward(g, ctx, g.concat(&[h, g.sparse(h, &geo.neighbors)])));
        let raw = self.head.forward(g, ctx, h);

        let rows = b * cells;
        let raw_sigma = g.reshape(g_slice_cols(g, raw, 0, 1), &[rows, 1]);
        let raw_rgb = g_slice_cols(g, raw, 1, 3);
        let sigma = g.scale(g.softplus(raw_sigma), T::of(self.cfg.density_scale));
        let rgb = g.sigmoid(raw_rgb);
        Ok(g.concat(&[sigma, rgb]))
    }

    /// Reconstructs scenes without recording gradients.
    pub fn reconstruct(&self, params: &ParamStore<f32>, views: &Tensor<f32>, geo: &ViewGeometry<f32>) -> Result<Vec<Scene3D>> {
        let g = Graph::new();
        let bound = params.bind(&g, false);
        let x = g.constant(views.clone());
        let rows = self.forward(&g, Ctx::plain(&bound), x, geo)?;
        let rows = g.value(rows).clone();
        self.split_scenes(&rows)
    }

    pub fn split_scenes<T: Scalar>(&self, rows: &Tensor<T>) -> Result<Vec<Scene3D>> {
        let cells = self.cfg.grid.pow(3);
        rows.data()
            .chunks(4 * cells)
            .map(|c| Scene3D::from_rows(self.cfg.grid, self.cfg.extent as f32, c))
            .collect()
    }
}

/// Column slice `[start, start + len)` of a `(rows, c)` value, as a fixed
/// linear projection so it stays on the tape.
fn g_slice_cols<T: Scalar>(g: &Graph<T>, x: Var, start: usize, len: usize) -> Var {
    let c = g.shape(x)[1];
    let sel = Tensor::from_fn(vec![c, len], |i| {
        let (row, col) = (i / len, i % len);
        if row == start + col { T::one() } else { T::zero() }
    });
    g.linear(x, g.constant(sel))
}
