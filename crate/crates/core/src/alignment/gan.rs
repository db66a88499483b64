//! Multi-view discriminator and the adversarial and regression losses.
//!
//! Convention: the discriminator maximizes
//! `E[log D(X_gt)] + E[log(1 - D(X_fake))]` by descending its negation.

use gradtape::{Graph, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{Builder, Conv, Ctx, Linear};
use crate::seed;

pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub views: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { width: 16, views: 4 }
    }
}

/// Four strided layers over channel-stacked views, then a pooled logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    conv0: Conv,
    down1: Linear,
    down2: Linear,
    down3: Linear,
    logit: Linear,
}

const SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn build(cfg: DiscriminatorConfig, init_seed: u64) -> (Self, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(init_seed);
        let c = cfg.width;
        let mut b = Builder { base: &mut store, adapter: None, rng: &mut rng, lora_rank: 0 };
        let d = Discriminator {
            conv0: b.conv("disc.conv0", 3 * cfg.views, c, 1.0, false),
            down1: b.linear("disc.down1", 4 * c, 2 * c, 1.0, false),
            down2: b.linear("disc.down2", 8 * c, 4 * c, 1.0, false),
            down3: b.linear("disc.down3", 16 * c, 4 * c, 1.0, false),
            logit: b.linear("disc.logit", 4 * c, 1, 1.0, false),
            cfg,
        };
        (d, store)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Logits `(B, 1)` for `(B * N, R, R, 3)` images in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, ctx: Ctx, views: Var) -> Var {
        let slope = T::of(SLOPE);
        let x = g.affine(views, T::of(2.0), T::of(-1.0));
        let x = g.views_to_channels(x, self.cfg.views);
        let h = g.leaky_relu(self.conv0.forward(g, ctx, x), slope);
        let h = g.leaky_relu(self.down1.forward(g, ctx, g.space_to_depth(h)), slope);
        let h = g.leaky_relu(self.down2.forward(g, ctx, g.space_to_depth(h)), slope);
        let h = g.leaky_relu(self.down3.forward(g, ctx, g.space_to_depth(h)), slope);
        self.logit.forward(g, ctx, g.mean_middle(h))
    }
}

fn log_prob<T: Scalar>(g: &Graph<T>, logits: Var, positive: bool) -> Var {
    let z = if positive { logits } else { g.scale(logits, -T::one()) };
    let p = g.clamp(g.sigmoid(z), T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
    g.mean_all(g.ln(p))
}

/// `E[log D(X_gt)] + E[log(1 - D(X_fake))]` from logits. The discriminator
/// ascends this value.
pub fn gan_loss_discriminator<T: Scalar>(g: &Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    g.add(log_prob(g, real_logits, true), log_prob(g, fake_logits, false))
}

/// Generator-side adversarial loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanVariant {
    /// `-E[log D(X_fake)]`.
    NonSaturating,
    /// `E[log(1 - D(X_fake))]`, the direct minimax term.
    Saturating,
}

pub fn gan_loss_generator<T: Scalar>(g: &Graph<T>, fake_logits: Var, variant: GanVariant) -> Var {
    match variant {
        GanVariant::NonSaturating => g.scale(log_prob(g, fake_logits, true), -T::one()),
        GanVariant::Saturating => log_prob(g, fake_logits, false),
    }
}

/// Mean squared error over every pixel of every view.
pub fn recon_loss<T: Scalar>(g: &Graph<T>, gt: Var, rendered: Var) -> Var {
    g.mean_all(g.sqr(g.sub(rendered, gt)))
}
