//! Latent denoising diffusion: noise schedule, noise-predicting U-Net, training loss and the
//! DDIM sampler with classifier-free guidance.

mod ddim;
mod model;
mod sampler;
mod schedule;
mod unet;

pub use ddim::{cfg_combine, ddim_step, predict_x0, timestep_ladder};
pub use model::{
    drop_captions, training_loss, Denoiser, DiffusionConfig, LatentDiffusion, NoiseDraw,
};
pub use sampler::{generate, sample_latents, SampleStats, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use unet::{UNet, UNetConfig};
