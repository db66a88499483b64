//! Asynchronous score distillation: the teacher's noise prediction at `t`
//! minus its prediction at the shifted timestep `t + dt`, under one shared
//! noise draw.

use gradtape::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, NoisePredictor};
use crate::error::{param_err, Result};
use crate::schedule::{q_sample, NoiseDraw, NoiseSchedule};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Constant weight `omega(t)`.
    pub omega_const: f64,
    /// Inclusive range of the timestep shift.
    pub delta_t_min: i64,
    pub delta_t_max: i64,
    /// Inclusive sampling range of `t`.
    pub t_min: usize,
    pub t_max: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { omega_const: 1.0, delta_t_min: 50, delta_t_max: 150, t_min: 20, t_max: 980 }
    }
}

impl DistillConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if !(self.omega_const >= 0.0 && self.omega_const.is_finite()) {
            return Err(param_err!("omega_const must be finite and non-negative"));
        }
        if self.delta_t_min > self.delta_t_max {
            return Err(param_err!("delta_t_min must not exceed delta_t_max"));
        }
        if self.t_min < 1 || self.t_min > self.t_max || self.t_max > s.steps() {
            return Err(param_err!("t range must satisfy 1 <= t_min <= t_max <= {}", s.steps()));
        }
        Ok(())
    }
}

/// The gradient with respect to the student's clean prediction, plus the
/// draws that produced it.
#[derive(Clone, Debug)]
pub struct DistillOutput<T> {
    pub grad: Tensor<T>,
    pub t: usize,
    /// `t + dt` after clamping to `[1, T]`.
    pub t_shifted: usize,
    pub noise: NoiseDraw<T>,
}

/// Draws `(t, t + dt)` for one batch.
pub fn draw_timesteps(cfg: &DistillConfig, s: &NoiseSchedule, step_seed: u64) -> (usize, usize) {
    let mut rng = seed::rng(seed::derive(step_seed, "distill.t", 0));
    let t = rng.random_range(cfg.t_min..=cfg.t_max);
    let dt = rng.random_range(cfg.delta_t_min..=cfg.delta_t_max);
    let shifted = (t as i64 + dt).clamp(1, s.steps() as i64) as usize;
    (t, shifted)
}

/// `omega(t) (eps_phi(x_t; t) - eps_phi(x_{t+dt}; t+dt))`, both noised from
/// `x_hat` (signal range, `(B * N, R, R, 3)`) with the same `eps`.
pub fn distill_gradient<T: Scalar, P: NoisePredictor<T>>(
    x_hat: &Tensor<T>,
    cond: &Conditioning<T>,
    teacher: &P,
    s: &NoiseSchedule,
    cfg: &DistillConfig,
    step_seed: u64,
) -> Result<DistillOutput<T>> {
    let (t, t_shifted) = draw_timesteps(cfg, s, step_seed);
    distill_gradient_at(x_hat, cond, teacher, s, cfg.omega_const, t, t_shifted, seed::derive(step_seed, "distill.eps", 0))
}

/// [`distill_gradient`] with explicit timesteps and noise seed.
#[allow(clippy::too_many_arguments)]
pub fn distill_gradient_at<T: Scalar, P: NoisePredictor<T>>(
    x_hat: &Tensor<T>,
    cond: &Conditioning<T>,
    teacher: &P,
    s: &NoiseSchedule,
    omega: f64,
    t: usize,
    t_shifted: usize,
    noise_seed: u64,
) -> Result<DistillOutput<T>> {
    let noise = NoiseDraw::new(x_hat.shape(), noise_seed);
    let b = cond.scenes();
    let x_t = q_sample(x_hat, t, &noise, s)?;
    let x_s = q_sample(x_hat, t_shifted, &noise, s)?;
    let e_t = teacher.predict_eps(&x_t, &vec![t; b], cond)?;
    let e_s = teacher.predict_eps(&x_s, &vec![t_shifted; b], cond)?;
    let w = T::of(omega);
    let grad = e_t.zip_map(&e_s, |a, b| w * (a - b));
    Ok(DistillOutput { grad, t, t_shifted, noise })
}
