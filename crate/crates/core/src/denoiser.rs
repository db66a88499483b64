//! The multi-view noise predictor: a small per-view U-Net with a cross-view
//! averaging layer at the bottleneck and additive conditioning on timestep,
//! camera pose and the condition image.

use gradtape::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPoseSet;
use crate::error::{param_err, Result};
use crate::nn::{sinusoidal, Builder, Conv, Ctx, Linear};
use crate::schedule::NoiseSchedule;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channel width at full resolution; doubles at each of two downsamplings.
    pub width: usize,
    pub lora_rank: usize,
    pub time_dim: usize,
    /// What the last layer regresses; the public output is always noise.
    pub output: Output,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { width: 16, lora_rank: 4, time_dim: 32, output: Output::Velocity }
    }
}

/// Raw network target. With `Velocity` the network regresses
/// `v = sqrt(abar) eps - sqrt(1 - abar) x0` and noise is recovered as
/// `sqrt(abar) v + sqrt(1 - abar) x_t`, which keeps clean estimates
/// well-conditioned near `t = T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Output {
    Eps,
    Velocity,
}

/// Teacher weights plus the student's low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub base: ParamStore<f32>,
    pub adapter: ParamStore<f32>,
}

impl DenoiserParams {
    /// Sets every adapter `B` factor to zero so the student equals the teacher.
    pub fn zero_adapter(&mut self) {
        for (name, t) in self.adapter.iter_mut() {
            if name.ends_with(".lora_b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    enc0: Conv,
    enc1: Conv,
    down1: Linear,
    enc2: Conv,
    down2: Linear,
    time1: Linear,
    time2: Linear,
    pose: Linear,
    cond_local: Linear,
    cond_global: Linear,
    mid1: Conv,
    mix: Linear,
    mid2: Conv,
    up1: Linear,
    dec1: Conv,
    up2: Linear,
    dec0: Conv,
    out: Conv,
    /// `(sqrt(abar_t), sqrt(1 - abar_t))` for `t = 0..=T`.
    coeffs: Vec<(f64, f64)>,
}

/// Inputs shared by every denoiser call on one batch of scenes.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    /// Condition images in signal range, `(B, R, R, 3)`.
    pub x_c: Tensor<T>,
    /// Poses of the `N` generated views (same for every scene of the batch).
    pub poses: CameraPoseSet,
}

impl<T: Scalar> Conditioning<T> {
    pub fn scenes(&self) -> usize {
        self.x_c.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.poses.len()
    }
}

/// Anything that predicts noise for a noised multi-view batch.
pub trait NoisePredictor<T: Scalar> {
    /// `x_t` is `(B * N, R, R, 3)`; `ts` holds one timestep per scene.
    fn predict_eps(&self, x_t: &Tensor<T>, ts: &[usize], cond: &Conditioning<T>) -> Result<Tensor<T>>;
}

impl Denoiser {
    pub fn build(cfg: DenoiserConfig, schedule: &NoiseSchedule, init_seed: u64) -> (Self, DenoiserParams) {
        let mut base = ParamStore::new();
        let mut adapter = ParamStore::new();
        let mut rng = seed::rng(init_seed);
        let c = cfg.width;
        let s2 = 2f64.sqrt();
        let mut b = Builder { base: &mut base, adapter: Some(&mut adapter), rng: &mut rng, lora_rank: cfg.lora_rank };
        let net = Denoiser {
            enc0: b.conv("enc0", 3, c, s2, false),
            enc1: b.conv("enc1", c, c, s2, false),
            down1: b.linear("down1", 4 * c, 2 * c, s2, false),
            enc2: b.conv("enc2", 2 * c, 2 * c, s2, false),
            down2: b.linear("down2", 8 * c, 4 * c, s2, false),
            time1: b.linear("time1", cfg.time_dim, 4 * c, s2, false),
            time2: b.linear("time2", 4 * c, 4 * c, 1.0, false),
            pose: b.linear("pose", 4, 4 * c, 1.0, false),
            cond_local: b.linear("cond_local", 4 * c, 4 * c, 1.0, false),
            cond_global: b.linear("cond_global", 4 * c, 4 * c, 1.0, false),
            mid1: b.conv("mid1", 4 * c, 4 * c, s2, true),
            mix: b.linear("mix", 4 * c, 4 * c, 1.0, true),
            mid2: b.conv("mid2", 4 * c, 4 * c, s2, true),
            up1: b.linear("up1", 4 * c, 8 * c, s2, true),
            dec1: b.conv("dec1", 4 * c, 2 * c, s2, true),
            up2: b.linear("up2", 2 * c, 4 * c, s2, true),
            dec0: b.conv("dec0", 2 * c, c, s2, true),
            out: b.conv("out", c, 3, 0.0, true),
            coeffs: (0..=schedule.steps()).map(|t| schedule.coefficients(t)).collect(),
            cfg,
        };
        (net, DenoiserParams { base, adapter })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn encode<T: Scalar>(&self, g: &Graph<T>, ctx: Ctx, x: Var) -> (Var, Var, Var) {
        let h0 = g.silu(self.enc0.forward(g, ctx, x));
        let h0 = g.silu(self.enc1.forward(g, ctx, h0));
        let h1 = g.silu(self.down1.forward(g, ctx, g.space_to_depth(h0)));
        let h1 = g.silu(self.enc2.forward(g, ctx, h1));
        let h2 = g.silu(self.down2.forward(g, ctx, g.space_to_depth(h1)));
        (h0, h1, h2)
    }

    /// Per-element coefficient tensor shaped like `x_t`, one value per scene.
    fn per_scene<T: Scalar>(&self, shape: &[usize], ts: &[usize], f: impl Fn((f64, f64)) -> f64) -> Tensor<T> {
        let per = shape.iter().product::<usize>() / ts.len();
        let data = ts.iter().flat_map(|&t| std::iter::repeat_n(T::of(f(self.coeffs[t])), per)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    fn check_ts(&self, ts: &[usize]) -> Result<()> {
        match ts.iter().find(|&&t| t == 0 || t >= self.coeffs.len()) {
            Some(t) => Err(param_err!("timestep {t} outside [1, {}]", self.coeffs.len() - 1)),
            None => Ok(()),
        }
    }

    /// Noise prediction for `x_t` `(B * N, R, R, 3)` given per-scene
    /// timesteps and conditioning. `x_c` is a `(B, R, R, 3)` graph value.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        ctx: Ctx,
        x_t: Var,
        ts: &[usize],
        x_c: Var,
        poses: &CameraPoseSet,
    ) -> Result<Var> {
        let raw = self.forward_raw(g, ctx, x_t, ts, x_c, poses)?;
        Ok(match self.cfg.output {
            Output::Eps => raw,
            Output::Velocity => {
                let shape = g.shape(x_t).to_vec();
                let a = g.constant(self.per_scene::<T>(&shape, ts, |c| c.0));
                let sd = g.constant(self.per_scene::<T>(&shape, ts, |c| c.1));
                g.add(g.mul(a, raw), g.mul(sd, x_t))
            }
        })
    }

    /// Regression target of [`Denoiser::forward_raw`] for clean signal `x0`
    /// noised with `eps` at per-scene timesteps.
    pub fn raw_target<T: Scalar>(&self, x0: &Tensor<T>, eps: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        self.check_ts(ts)?;
        if x0.shape() != eps.shape() || x0.shape()[0] % ts.len() != 0 {
            return Err(param_err!("target shapes {:?}/{:?} do not fit {} scenes", x0.shape(), eps.shape(), ts.len()));
        }
        Ok(match self.cfg.output {
            Output::Eps => eps.clone(),
            Output::Velocity => {
                let a = self.per_scene::<T>(x0.shape(), ts, |c| c.0);
                let sd = self.per_scene::<T>(x0.shape(), ts, |c| c.1);
                let ae = a.zip_map(eps, |a, e| a * e);
                let sx = sd.zip_map(x0, |s, x| s * x);
                ae.zip_map(&sx, |p, q| p - q)
            }
        })
    }

    /// The last layer's output before conversion to noise.
    pub fn forward_raw<T: Scalar>(
        &self,
        g: &Graph<T>,
        ctx: Ctx,
        x_t: Var,
        ts: &[usize],
        x_c: Var,
        poses: &CameraPoseSet,
    ) -> Result<Var> {
        self.check_ts(ts)?;
        let xs = g.shape(x_t);
        let cs = g.shape(x_c);
        let n = poses.len();
        let b = ts.len();
        if xs.len() != 4 || xs[3] != 3 || xs[0] != b * n || xs[1] != xs[2] {
            return Err(param_err!("x_t must be ({} scenes * {n} views, R, R, 3), got {xs:?}", b));
        }
        if cs != [b, xs[1], xs[2], 3] {
            return Err(param_err!("condition image shape {cs:?} does not match views {xs:?}"));
        }
        if xs[1] % 4 != 0 {
            return Err(param_err!("resolution must be divisible by 4, got {}", xs[1]));
        }
        let c4 = 4 * self.cfg.width;

        let (s0, s1, h) = self.encode(g, ctx, x_t);

        let temb: Vec<T> = ts
            .iter()
            .flat_map(|&t| sinusoidal(t as f64, self.cfg.time_dim, 10_000.0))
            .map(T::of)
            .collect();
        let temb = g.constant(Tensor::new(vec![b, self.cfg.time_dim], temb));
        let temb = self.time2.forward(g, ctx, g.silu(self.time1.forward(g, ctx, temb)));
        let temb = g.repeat_groups(temb, n);

        let pose_rows: Vec<T> = (0..b)
            .flat_map(|_| poses.poses().iter().flat_map(|p| p.embedding()))
            .map(T::of)
            .collect();
        let pemb = self.pose.forward(g, ctx, g.constant(Tensor::new(vec![b * n, 4], pose_rows)));

        let (_, _, hc) = self.encode(g, ctx, x_c);
        let cglob = self.cond_global.forward(g, ctx, g.mean_middle(hc));
        let clocal = self.cond_local.forward(g, ctx, hc);

        let h = g.add(h, g.repeat_groups(clocal, n));
        let h = g.add_broadcast(h, g.add(g.add(temb, pemb), g.repeat_groups(cglob, n)));

        let h = g.silu(self.mid1.forward(g, ctx, h));
        let shared = self.mix.forward(g, ctx, g.repeat_groups(g.group_mean(h, n), n));
        let h = g.add(h, shared);
        let h = g.silu(self.mid2.forward(g, ctx, h));
        debug_assert_eq!(g.shape(h)[3], c4);

        let u1 = g.depth_to_space(self.up1.forward(g, ctx, h));
        let u1 = g.silu(self.dec1.forward(g, ctx, g.concat(&[u1, s1])));
        let u0 = g.depth_to_space(self.up2.forward(g, ctx, u1));
        let u0 = g.silu(self.dec0.forward(g, ctx, g.concat(&[u0, s0])));
        Ok(self.out.forward(g, ctx, u0))
    }

    /// Evaluates the teacher (`student == false`) or student without
    /// recording gradients.
    pub fn predict<T: Scalar>(
        &self,
        params: &DenoiserParams,
        student: bool,
        x_t: &Tensor<T>,
        ts: &[usize],
        cond: &Conditioning<T>,
    ) -> Result<Tensor<T>> {
        let g = Graph::<T>::new();
        let base = params.base.cast::<T>().bind(&g, false);
        let adapter = params.adapter.cast::<T>().bind(&g, false);
        let ctx = Ctx { base: &base, adapter: student.then_some(&adapter) };
        let x = g.constant(x_t.clone());
        let xc = g.constant(cond.x_c.clone());
        let out = self.forward(&g, ctx, x, ts, xc, &cond.poses)?;
        let v = g.value(out).clone();
        Ok(v)
    }
}
