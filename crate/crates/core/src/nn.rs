//! Parameterized layers over the tape, with optional low-rank adapters.

use gradtape::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Bound parameter sets for one forward pass. The adapter is absent for
/// teacher evaluations.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub base: &'a Bound,
    pub adapter: Option<&'a Bound>,
}

impl<'a> Ctx<'a> {
    pub fn plain(base: &'a Bound) -> Self {
        Ctx { base, adapter: None }
    }
}

/// Low-rank factors `A (fan_in, r)` and `B (r, fan_out)` stored in the
/// adapter store; the effective weight is `W + A B`.
#[derive(Clone, Copy, Debug)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub bias: ParamId,
    pub lora: Option<Lora>,
}

/// 3x3 same-padding convolution with weight `(9 * c_in, c_out)`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub bias: ParamId,
    pub lora: Option<Lora>,
}

pub struct Builder<'a, R: Rng> {
    pub base: &'a mut ParamStore<f32>,
    pub adapter: Option<&'a mut ParamStore<f32>>,
    pub rng: &'a mut R,
    pub lora_rank: usize,
}

fn normal(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

impl<R: Rng> Builder<'_, R> {
    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        let t = if gain == 0.0 {
            Tensor::zeros(vec![fan_in, fan_out])
        } else {
            normal(self.rng, vec![fan_in, fan_out], gain / (fan_in as f64).sqrt())
        };
        self.base.add(format!("{name}.w"), t)
    }

    fn lora(&mut self, name: &str, fan_in: usize, fan_out: usize, adapt: bool) -> Option<Lora> {
        if !adapt {
            return None;
        }
        let r = self.lora_rank;
        let a_init = normal(self.rng, vec![fan_in, r], 1.0 / (fan_in as f64).sqrt());
        let store = self.adapter.as_mut()?;
        let a = store.add(format!("{name}.lora_a"), a_init);
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(vec![r, fan_out]));
        Some(Lora { a, b })
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, adapt: bool) -> Linear {
        let w = self.weight(name, fan_in, fan_out, gain);
        let bias = self.base.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        let lora = self.lora(name, fan_in, fan_out, adapt);
        Linear { w, bias, lora }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, gain: f64, adapt: bool) -> Conv {
        let w = self.weight(name, 9 * c_in, c_out, gain);
        let bias = self.base.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        let lora = self.lora(name, 9 * c_in, c_out, adapt);
        Conv { w, bias, lora }
    }
}

fn effective<T: Scalar>(g: &Graph<T>, ctx: Ctx, w: ParamId, lora: Option<Lora>) -> Var {
    let base = ctx.base.var(w);
    match (ctx.adapter, lora) {
        (Some(ad), Some(l)) => g.add(base, g.linear(ad.var(l.a), ad.var(l.b))),
        _ => base,
    }
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, ctx: Ctx, x: Var) -> Var {
        let w = effective(g, ctx, self.w, self.lora);
        g.add_bias(g.linear(x, w), ctx.base.var(self.bias))
    }
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, ctx: Ctx, x: Var) -> Var {
        let w = effective(g, ctx, self.w, self.lora);
        g.add_bias(g.conv3x3(x, w), ctx.base.var(self.bias))
    }
}

/// Sinusoidal features of a scalar, `dim` entries (`dim / 2` frequencies).
pub fn sinusoidal(value: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.push((value * freq).sin());
    }
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.push((value * freq).cos());
    }
    out
}
