//! Latent diffusion backbone: autoencoder, noise schedule, cross-attention
//! noise predictor, training loss, and a deterministic guided sampler.

pub mod sampler;
pub mod schedule;
pub mod unet;
pub mod vae;

pub use sampler::{sample, sample_traced, sampling_timesteps, AttentionTrace};
pub use schedule::NoiseSchedule;
pub use unet::{
    ldm_loss, ldm_loss_at, unet_denoise, AttnRecord, CrossAttnBlock, DenoiseOutput,
    LocalConditioning, LocalContext, LocalRecord, Unet,
};
pub use vae::{Autoencoder, DOWN_FACTOR};
