//! Discrete DDPM noise schedule, forward diffusion, re-noising and the
//! deterministic few-step denoising arithmetic.
//!
//! Timesteps are 1-based: `t` in `1..=T`. `alpha_bar(0)` is defined as 1 so
//! that a step to `t = 0` lands on the clean prediction.

use gradtape::{Scalar, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear beta schedule with `steps` entries between `beta_start` and
/// `beta_end`; `alpha_bar` is the running product of `1 - beta`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(param_err!("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(param_err!(
            "beta bounds must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        ));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { steps, beta, alpha, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative signal fraction; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(param_err!("timestep {t} outside 1..={}", self.steps))
        } else {
            Ok(())
        }
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// Ordered inference timesteps, strictly decreasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(param_err!("timestep plan must not be empty"));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(param_err!("timestep plan must be strictly decreasing: {steps:?}"));
        }
        if steps.contains(&0) {
            return Err(param_err!("timestep plan entries must be >= 1"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep at 1-based loop index `k` (`k = K` is the first, noisiest).
    pub fn t_k(&self, k: usize) -> usize {
        self.steps[self.steps.len() - k]
    }
}

/// Trailing-uniform plan: `t_i = round(T - i * T / K) - 1`, e.g.
/// `[999, 749, 499, 249]` for `K = 4, T = 1000`.
///
/// The `- 1` offset is dropped when `K = T`, where it would place the last
/// step at 0.
pub fn make_inference_plan(k: usize, schedule: &NoiseSchedule) -> Result<TimestepPlan> {
    let t = schedule.steps();
    if k == 0 || k > t {
        return Err(param_err!("plan length {k} outside 1..={t}"));
    }
    let stride = t as f64 / k as f64;
    let raw: Vec<usize> = (0..k).map(|i| (t as f64 - i as f64 * stride).round() as usize).collect();
    let offset = usize::from(raw.iter().all(|&s| s >= 2));
    TimestepPlan::new(raw.into_iter().map(|s| s - offset).collect())
}

/// Standard normal draw with the shape of the batch it perturbs.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T = f32> {
    pub eps: Tensor<T>,
    pub seed: u64,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn new(shape: &[usize], seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let eps = Tensor::from_fn(shape.to_vec(), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::of(v as f32 as f64)
        });
        Self { eps, seed }
    }
}

/// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    noise: &NoiseDraw<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if x0.shape() != noise.eps.shape() {
        return Err(crate::Error::Shape(format!(
            "noise {:?} vs signal {:?}",
            noise.eps.shape(),
            x0.shape()
        )));
    }
    let (a, s) = schedule.coefficients(t);
    let (a, s) = (T::of(a), T::of(s));
    Ok(x0.zip_map(&noise.eps, |x, e| a * x + s * e))
}

/// Maps images in `[0, 1]` to the model's `[-1, 1]` signal range.
pub fn to_signal<T: Scalar>(images: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    images.map(|v| two * v - T::one())
}

/// Inverse of [`to_signal`].
pub fn from_signal<T: Scalar>(signal: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    signal.map(|v| half * (v + T::one()))
}

/// Re-noises a rendering (values in `[0, 1]`) at `t` with a fresh draw.
pub fn renoise<T: Scalar>(
    rendering: &Tensor<T>,
    t: usize,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let noise = NoiseDraw::new(rendering.shape(), seed);
    q_sample(&to_signal(rendering), t, &noise, schedule)
}

/// Clean-signal estimate from an epsilon prediction.
pub fn predict_x0<T: Scalar>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if x_t.shape() != eps_pred.shape() {
        return Err(crate::Error::Shape(format!(
            "eps {:?} vs x_t {:?}",
            eps_pred.shape(),
            x_t.shape()
        )));
    }
    let (a, s) = schedule.coefficients(t);
    Ok(x_t.zip_map(eps_pred, |x, e| T::of((x.f64() - s * e.f64()) / a)))
}

/// Deterministic (eta = 0) step from `t_from` to `t_to`; `t_to = 0` returns
/// the clean prediction.
pub fn denoise_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t_from: usize,
    t_to: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_from <= t_to {
        return Err(param_err!("denoise step must go down in time: {t_from} -> {t_to}"));
    }
    let x0 = predict_x0(x_t, eps_pred, t_from, schedule)?;
    if t_to == 0 {
        return Ok(x0);
    }
    reproject(&x0, eps_pred, t_to, schedule)
}

/// Places a clean estimate back at `t_to` along the predicted noise
/// direction: `sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn reproject<T: Scalar>(
    x0: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t_to: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != eps_pred.shape() {
        return Err(param_err!("shape mismatch: {:?} vs {:?}", x0.shape(), eps_pred.shape()));
    }
    let (a, s) = schedule.coefficients(t_to);
    Ok(x0.zip_map(eps_pred, |x, e| T::of(a * x.f64() + s * e.f64())))
}

/// Noise implied by a clean estimate at `t`:
/// `(x_t - sqrt(abar) x0) / sqrt(1 - abar)`.
pub fn eps_from_x0<T: Scalar>(x_t: &Tensor<T>, x0: &Tensor<T>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if x_t.shape() != x0.shape() {
        return Err(param_err!("shape mismatch: {:?} vs {:?}", x_t.shape(), x0.shape()));
    }
    let (a, s) = schedule.coefficients(t);
    Ok(x_t.zip_map(x0, |x, c| T::of((x.f64() - a * c.f64()) / s)))
}
