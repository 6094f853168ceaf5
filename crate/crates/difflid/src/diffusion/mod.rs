//! Toy denoising diffusion model: schedule, U-Net, training, sampling.

pub mod schedule;
pub mod train;
pub mod unet;

pub use schedule::{make_schedule, toy_beta_endpoints, NoiseSchedule};
pub use train::{
    ddpm_loss, reverse_sample, reverse_sample_with, stack_images, train_denoiser,
    DiffusionTrainConfig, LossLog,
};
pub use unet::{DenoiserConfig, DenoiserOutput, DenoiserUnet};
