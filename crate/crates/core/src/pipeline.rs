//! The full model set: teacher/student denoiser, reconstructor and the
//! discriminators, plus noise-predictor views over the denoiser.

use gradtape::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::alignment::gan::{Discriminator, DiscriminatorConfig};
use crate::camera::CameraPoseSet;
use crate::denoiser::{Conditioning, Denoiser, DenoiserConfig, DenoiserParams, NoisePredictor};
use crate::error::Result;
use crate::recon::{ReconConfig, Reconstructor, ViewGeometry};
use crate::render::RenderConfig;
use crate::schedule::predict_x0;
use crate::schedule::NoiseSchedule;
use crate::seed;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub recon: ReconConfig,
    pub disc: DiscriminatorConfig,
}

#[derive(Clone, Debug)]
pub struct Models {
    pub denoiser: Denoiser,
    pub mvg: DenoiserParams,
    pub recon: Reconstructor,
    pub recon_params: ParamStore<f32>,
    /// Judges rendered view sets.
    pub disc: Discriminator,
    pub disc_params: ParamStore<f32>,
    /// Judges generated view sets directly (hard-aligned generator variant).
    pub disc_mvg: Discriminator,
    pub disc_mvg_params: ParamStore<f32>,
}

impl Models {
    pub fn build(cfg: &ModelConfig, schedule: &NoiseSchedule, init_seed: u64) -> Self {
        let (denoiser, mvg) = Denoiser::build(cfg.denoiser.clone(), schedule, seed::derive(init_seed, "init.denoiser", 0));
        let (recon, recon_params) = Reconstructor::build(cfg.recon.clone(), seed::derive(init_seed, "init.recon", 0));
        let (disc, disc_params) = Discriminator::build(cfg.disc.clone(), seed::derive(init_seed, "init.disc", 0));
        let (disc_mvg, disc_mvg_params) =
            Discriminator::build(cfg.disc.clone(), seed::derive(init_seed, "init.disc_mvg", 0));
        Models { denoiser, mvg, recon, recon_params, disc, disc_params, disc_mvg, disc_mvg_params }
    }

    pub fn teacher(&self) -> Teacher<'_> {
        Teacher { net: &self.denoiser, params: &self.mvg }
    }

    pub fn student(&self) -> Student<'_> {
        Student { net: &self.denoiser, params: &self.mvg }
    }

    pub fn geometry(&self, poses: &CameraPoseSet, render: &RenderConfig) -> Result<ViewGeometry<f32>> {
        ViewGeometry::new(poses, self.recon.config(), render)
    }
}

/// The frozen teacher: base weights only.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub net: &'a Denoiser,
    pub params: &'a DenoiserParams,
}

/// The student: base weights plus adapter.
#[derive(Clone, Copy)]
pub struct Student<'a> {
    pub net: &'a Denoiser,
    pub params: &'a DenoiserParams,
}

impl NoisePredictor<f32> for Teacher<'_> {
    fn predict_eps(&self, x_t: &Tensor<f32>, ts: &[usize], cond: &Conditioning<f32>) -> Result<Tensor<f32>> {
        self.net.predict(self.params, false, x_t, ts, cond)
    }
}

impl NoisePredictor<f32> for Student<'_> {
    fn predict_eps(&self, x_t: &Tensor<f32>, ts: &[usize], cond: &Conditioning<f32>) -> Result<Tensor<f32>> {
        self.net.predict(self.params, true, x_t, ts, cond)
    }
}

impl Student<'_> {
    /// Noise prediction and the implied clean estimate at timestep `t`.
    pub fn denoise(
        &self,
        x_t: &Tensor<f32>,
        t: usize,
        cond: &Conditioning<f32>,
        s: &NoiseSchedule,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let eps = self.predict_eps(x_t, &vec![t; cond.scenes()], cond)?;
        let x0 = predict_x0(x_t, &eps, t, s)?;
        Ok((eps, x0))
    }
}
