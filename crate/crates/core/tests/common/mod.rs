//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the code under test beyond plain data
//! accessors.
#![allow(dead_code)]

use std::cell::RefCell;

use aligncvc::camera::{make_pose_set, CameraPose, Intrinsics};
use aligncvc::denoiser::{Conditioning, NoisePredictor};
use aligncvc::error::Result;
use aligncvc::render::{RenderConfig, Rig};
use aligncvc::scene::Scene3D;
use gradtape::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `eps(x; t) = a_t x + b_t` elementwise, recording every call.
#[derive(Default)]
pub struct LinearTeacher {
    pub calls: RefCell<Vec<(Tensor<f64>, usize)>>,
}

pub fn a_t(t: usize) -> f64 {
    0.3 + 0.001 * t as f64
}

pub fn b_t(t: usize) -> f64 {
    (t as f64 / 250.0).sin()
}

impl NoisePredictor<f64> for LinearTeacher {
    fn predict_eps(&self, x_t: &Tensor<f64>, ts: &[usize], _cond: &Conditioning<f64>) -> Result<Tensor<f64>> {
        assert!(ts.iter().all(|&t| t == ts[0]));
        self.calls.borrow_mut().push((x_t.clone(), ts[0]));
        Ok(x_t.map(|x| a_t(ts[0]) * x + b_t(ts[0])))
    }
}

pub fn one_pixel_cond() -> Conditioning<f64> {
    Conditioning { x_c: Tensor::zeros(vec![1, 1, 1, 3]), poses: make_pose_set(&[0.0], 0.0, 2.2).unwrap() }
}

/// `prod (1 - beta_i)` for the default linear schedule.
pub fn abar(t: usize) -> f64 {
    (1..=t).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * (i - 1) as f64 / 999.0)).product()
}

/// Closed-form distillation gradient of the linear teacher for one element.
pub fn linear_teacher_gradient(x: f64, eps: f64, t: usize, t_shifted: usize, omega: f64) -> f64 {
    let xt = abar(t).sqrt() * x + (1.0 - abar(t)).sqrt() * eps;
    let xu = abar(t_shifted).sqrt() * x + (1.0 - abar(t_shifted)).sqrt() * eps;
    omega * ((a_t(t) * xt + b_t(t)) - (a_t(t_shifted) * xu + b_t(t_shifted)))
}

/// `ln sigmoid(z)` clamped like the GAN losses.
pub fn log_sigmoid_clamped(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(1e-6, 1.0 - 1e-6).ln()
}

pub fn small_render_config(resolution: usize, samples: usize) -> RenderConfig {
    RenderConfig { samples_per_ray: samples, ..RenderConfig::bracketing(resolution, 2.2, 1.0) }
}

pub fn random_rows(grid: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![grid * grid * grid, 4], |i| {
        if i % 4 == 0 {
            rng.random_range(0.2..4.0)
        } else {
            rng.random_range(0.0..1.0)
        }
    })
}

/// Worst relative error between autodiff and central differences of a
/// random linear functional of the rendered images, over every grid entry
/// some ray touches. Returns `(worst, entries checked)`.
pub fn render_fd_worst(rig: &Rig<f64>, rows: &Tensor<f64>, seed: u64) -> (f64, usize) {
    let shape = {
        let g = Graph::new();
        let img = rig.render(&g, g.constant(rows.clone()));
        g.shape(img).to_vec()
    };
    let weights = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    };
    let loss_of = |rows: &Tensor<f64>| -> f64 {
        let g = Graph::new();
        let img = rig.render(&g, g.constant(rows.clone()));
        let l = g.sum_all(g.mul(img, g.constant(weights.clone())));
        g.item(l)
    };
    let g = Graph::new();
    let x = g.leaf(rows.clone(), true);
    let img = rig.render(&g, x);
    let l = g.sum_all(g.mul(img, g.constant(weights.clone())));
    let grads = g.backward(l);
    let analytic = grads.get(x).unwrap().clone();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..rows.numel() {
        let mut p = rows.clone();
        p.data_mut()[i] += h;
        let mut m = rows.clone();
        m.data_mut()[i] -= h;
        let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
        let a = analytic.data()[i];
        if fd.abs().max(a.abs()) < 1e-8 {
            continue;
        }
        checked += 1;
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
    }
    (worst, checked)
}

/// Trilinear sample with zero padding outside the cell-center lattice.
pub fn oracle_sample(scene: &Scene3D, p: [f64; 3]) -> (f64, [f64; 3]) {
    let g = scene.grid();
    let e = scene.extent() as f64;
    let u: Vec<f64> = p.iter().map(|&c| (c + e) / (2.0 * e) * g as f64 - 0.5).collect();
    let mut sigma = 0.0;
    let mut rgb = [0.0; 3];
    let lo: Vec<i64> = u.iter().map(|v| v.floor() as i64).collect();
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let idx = [lo[0] + dx, lo[1] + dy, lo[2] + dz];
                if idx.iter().any(|&i| i < 0 || i >= g as i64) {
                    continue;
                }
                let w: f64 = (0..3)
                    .map(|a| {
                        let f = u[a] - lo[a] as f64;
                        if [dx, dy, dz][a] == 1 {
                            f
                        } else {
                            1.0 - f
                        }
                    })
                    .product();
                let cell = scene.index(idx[0] as usize, idx[1] as usize, idx[2] as usize);
                sigma += w * scene.density()[cell] as f64;
                for c in 0..3 {
                    rgb[c] += w * scene.color()[3 * cell + c] as f64;
                }
            }
        }
    }
    (sigma, rgb)
}

/// Emission-absorption march with `steps` midpoint samples between near
/// and far.
pub fn oracle_pixel(scene: &Scene3D, pose: CameraPose, cfg: &RenderConfig, row: usize, col: usize, steps: usize) -> [f64; 3] {
    let f = pose.frame();
    let intr = Intrinsics { resolution: cfg.resolution, fov_deg: cfg.fov_deg };
    let d = intr.ray_dir(&f, row, col);
    let dt = (cfg.far - cfg.near) / steps as f64;
    let mut trans = 1.0;
    let mut out = [0.0; 3];
    for i in 0..steps {
        let t = cfg.near + (i as f64 + 0.5) * dt;
        let p = [f.origin[0] + t * d[0], f.origin[1] + t * d[1], f.origin[2] + t * d[2]];
        let (sigma, rgb) = oracle_sample(scene, p);
        let alpha = 1.0 - (-sigma * dt).exp();
        for c in 0..3 {
            out[c] += trans * alpha * rgb[c];
        }
        trans *= 1.0 - alpha;
    }
    for c in 0..3 {
        out[c] += trans * cfg.background[c];
    }
    out
}

pub fn single_cell_scene(grid: usize, density: f32) -> Scene3D {
    let n = grid * grid * grid;
    let mut dens = vec![0.0f32; n];
    let c = grid / 2;
    let center = (c * grid + c) * grid + c;
    dens[center] = density;
    // Uniform color everywhere, so only the density field shapes the image.
    let color = (0..n).flat_map(|_| [0.2f32, 0.5, 0.8]).collect();
    Scene3D::new(grid, 1.0, dens, color).unwrap()
}

/// Sample mean and variance.
pub fn moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
