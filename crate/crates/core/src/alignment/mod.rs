//! Training objectives for the generator and reconstructor and the joint
//! update that ties them together.

pub mod distill;
pub mod gan;
pub mod step;

pub use distill::{distill_gradient, DistillConfig, DistillOutput};
pub use gan::{gan_loss_discriminator, gan_loss_generator, recon_loss, Discriminator, DiscriminatorConfig, GanVariant};
pub use step::{
    denoising_mse, diffusion_loss_variant, joint_train_step, AlignConfig, LossBundle, MvgObjective, OptimConfig, Optimizers,
    ReconObjective, StepEnv, TrainBatch,
};
