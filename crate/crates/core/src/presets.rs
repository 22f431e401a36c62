//! Small configurations for smoke runs, tests and benchmarks on a CPU.

use crate::autoencoder::AutoencoderConfig;
use crate::corpus::CorpusConfig;
use crate::diffusion::{DiffusionConfig, ScheduleConfig, UNetConfig};
use crate::text_encoder::TextEncoderConfig;
use crate::trainer::TrainConfig;

/// 32x32 images with a four-level encoder, giving 4x4x4 latents.
pub fn micro_autoencoder() -> AutoencoderConfig {
    AutoencoderConfig {
        input_resolution: 32,
        embed_dim: 4,
        base_channels: 8,
        num_res_blocks: 1,
        channel_mult: vec![1, 2, 2, 2],
        norm_groups: 4,
        disc_channels: 8,
        ..AutoencoderConfig::default()
    }
}

pub fn micro_corpus() -> CorpusConfig {
    CorpusConfig {
        resolution: 32,
        vocab_size: 256,
        max_tokens: 32,
        ..CorpusConfig::default()
    }
}

pub fn micro_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        unet: UNetConfig {
            latent_size: 4,
            base_channels: 32,
            num_res_blocks: 1,
            attention_resolutions: vec![2],
            channel_mult: vec![1, 2],
            context_dim: 32,
            time_embed_dim: 64,
            num_heads: 2,
            norm_groups: 8,
            ..UNetConfig::default()
        },
        text: TextEncoderConfig {
            num_layers: 1,
            width: 32,
            num_heads: 2,
            ffn_mult: 2,
            max_len: 32,
            vocab_size: 256,
        },
        schedule: ScheduleConfig::default(),
        p_uncond: 0.1,
    }
}

pub fn micro_autoencoder_training() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 2e-3,
        warmup_steps: 400,
        max_steps: 500,
        checkpoint_every: 100,
        ..TrainConfig::autoencoder()
    }
}

pub fn micro_diffusion_training() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        max_steps: 1000,
        checkpoint_every: 200,
        ..TrainConfig::diffusion()
    }
}
