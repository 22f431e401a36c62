//! Parameter-light models for gradient checks.

use candle_core::{DType, Device, Tensor};
use figgen_core::autoencoder::{
    total_ae_loss, AeLossInputs, Autoencoder, AutoencoderConfig, ConvFeatureExtractor,
    ExtractorKind,
};
use figgen_core::corpus::TokenizedCaption;
use figgen_core::diffusion::{
    training_loss, DiffusionConfig, LatentDiffusion, NoiseDraw, ScheduleConfig, UNetConfig,
};
use figgen_core::nn::ParamStore;
use figgen_core::text_encoder::{ConditioningBatch, TextEncoderConfig};
use figgen_core::{Result, SeedStream};

use super::gradcheck::{check, GradCheck};

pub fn tiny_autoencoder() -> AutoencoderConfig {
    AutoencoderConfig {
        input_resolution: 8,
        embed_dim: 1,
        base_channels: 1,
        num_res_blocks: 0,
        channel_mult: vec![1, 1, 1, 1],
        norm_groups: 1,
        disc_channels: 1,
        ..AutoencoderConfig::default()
    }
}

pub fn tiny_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        unet: UNetConfig {
            in_channels: 2,
            out_channels: 2,
            latent_size: 4,
            base_channels: 2,
            num_res_blocks: 1,
            attention_resolutions: vec![],
            channel_mult: vec![1],
            context_dim: 2,
            time_embed_dim: 4,
            num_heads: 1,
            norm_groups: 1,
            ..UNetConfig::default()
        },
        text: TextEncoderConfig {
            num_layers: 1,
            width: 2,
            num_heads: 1,
            ffn_mult: 2,
            max_len: 4,
            vocab_size: 6,
        },
        schedule: ScheduleConfig::default(),
        p_uncond: 0.5,
    }
}

/// Autoencoder objective (reconstruction, both perceptual terms and KL) with a fixed
/// reparameterization draw.
pub fn autoencoder_gradcheck() -> Result<(usize, GradCheck)> {
    let dev = Device::Cpu;
    let config = tiny_autoencoder();
    let store = ParamStore::new(DType::F64, &dev);
    let ae = Autoencoder::new(&config, &store, 3)?;
    let mut rng = SeedStream::new(17);
    let x = rng
        .uniform_tensor((2, 3, 8, 8), 1.0, DType::F64, &dev)?
        .abs()?;
    let eps = rng.normal_tensor((2, 1, 1, 1), DType::F64, &dev)?;
    let vgg = ConvFeatureExtractor::new(ExtractorKind::Vgg, 1, DType::F64, &dev)?;
    let ocr = ConvFeatureExtractor::new(ExtractorKind::Ocr, 2, DType::F64, &dev)?;
    let loss = || -> Result<Tensor> {
        let dist = ae.encode(&x)?;
        let x_hat = ae.decode(&dist.sample_with(&eps)?)?;
        let inputs = AeLossInputs {
            x: &x,
            x_hat: &x_hat,
            dist: &dist,
            d_fake: None,
            last_layer: None,
            step: 0,
            warmup_steps: 1,
        };
        Ok(total_ae_loss(&config.loss, &vgg, &ocr, &inputs)?.0)
    };
    Ok((store.num_params(), check(&store, &loss)?))
}

/// Noise-prediction MSE through the text encoder and U-Net, with one row on the null caption.
pub fn diffusion_gradcheck() -> Result<(usize, GradCheck)> {
    let dev = Device::Cpu;
    let config = tiny_diffusion();
    let model = LatentDiffusion::new(&config, DType::F64, &dev, 5)?;
    let mut rng = SeedStream::new(23);
    let x0 = rng.normal_tensor((2, 2, 4, 4), DType::F64, &dev)?;
    let draw = NoiseDraw {
        timesteps: vec![37, 640],
        noise: rng.normal_tensor((2, 2, 4, 4), DType::F64, &dev)?,
        uncond: vec![false, true],
    };
    let caption = TokenizedCaption {
        ids: vec![1, 4, 2, 0],
        mask: vec![true, true, true, false],
    };
    let cond = ConditioningBatch::from_captions(&[&caption, &caption], DType::F64, &dev)?;
    let loss = || training_loss(&model, model.schedule(), &x0, &cond, &draw);
    Ok((model.params().num_params(), check(model.params(), &loss)?))
}
