use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{NoiseSchedule, ScheduleConfig, UNet, UNetConfig};
use crate::nn::{ParamBuilder, ParamStore};
use crate::rng::SeedStream;
use crate::text_encoder::{null_caption, ConditioningBatch, TextEncoder, TextEncoderConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub schedule: ScheduleConfig,
    /// Per-sample probability of training on the null caption.
    pub p_uncond: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            text: TextEncoderConfig::base(),
            schedule: ScheduleConfig::default(),
            p_uncond: 0.1,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.text.validate()?;
        self.schedule.build()?;
        if self.text.width != self.unet.context_dim {
            return Err(Error::Config(format!(
                "text width {} must equal unet context_dim {}",
                self.text.width, self.unet.context_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!(
                "p_uncond {} outside [0, 1]",
                self.p_uncond
            )));
        }
        Ok(())
    }
}

/// Anything that maps captions to a context and predicts noise from `(x_t, t, context)`.
pub trait Denoiser {
    fn encode_text(&self, batch: &ConditioningBatch) -> Result<Tensor>;

    fn predict_eps(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        context: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor>;

    /// Token length the encoder expects.
    fn max_len(&self) -> usize;
}

/// Text encoder and U-Net trained jointly, with the latent scale used to normalize inputs.
pub struct LatentDiffusion {
    config: DiffusionConfig,
    params: ParamStore,
    text: TextEncoder,
    unet: UNet,
    schedule: NoiseSchedule,
    latent_scale: f64,
}

impl LatentDiffusion {
    pub fn new(config: &DiffusionConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(dtype, device);
        let b = ParamBuilder::new(&params, seed);
        let text = TextEncoder::new(&config.text, &b.pp("text"))?;
        let unet = UNet::new(&config.unet, &b.pp("unet"))?;
        Ok(Self {
            config: config.clone(),
            params,
            text,
            unet,
            schedule: config.schedule.build()?,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Invalid(format!(
                "latent scale must be positive and finite, got {scale}"
            )));
        }
        self.latent_scale = scale;
        Ok(())
    }
}

impl Denoiser for LatentDiffusion {
    fn encode_text(&self, batch: &ConditioningBatch) -> Result<Tensor> {
        self.text.encode(batch)
    }

    fn predict_eps(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        context: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let t_max = self.schedule.num_timesteps();
        if let Some(t) = timesteps.iter().find(|&&t| t >= t_max) {
            return Err(Error::Invalid(format!("timestep {t} outside [0, {t_max})")));
        }
        self.unet.forward(x_t, timesteps, context, mask)
    }

    fn max_len(&self) -> usize {
        self.config.text.max_len
    }
}

/// Per-sample randomness of one training step.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    /// Rows trained on the null caption.
    pub uncond: Vec<bool>,
}

impl NoiseDraw {
    pub fn sample(
        rng: &mut SeedStream,
        shape: &[usize],
        num_timesteps: usize,
        p_uncond: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let b = shape[0];
        let timesteps = (0..b).map(|_| rng.below(num_timesteps)).collect();
        let uncond = (0..b).map(|_| rng.uniform() < p_uncond).collect();
        let noise = rng.normal_tensor(shape, dtype, device)?;
        Ok(Self {
            timesteps,
            noise,
            uncond,
        })
    }

    pub fn null_rows(&self) -> usize {
        self.uncond.iter().filter(|&&u| u).count()
    }
}

/// Replaces the flagged rows of a caption batch with the null caption.
pub fn drop_captions(cond: &ConditioningBatch, rows: &[bool]) -> Result<ConditioningBatch> {
    let (b, l) = cond.token_ids.dims2()?;
    if rows.len() != b {
        return Err(Error::Shape(format!(
            "{} drop flags for a batch of {b}",
            rows.len()
        )));
    }
    if !rows.iter().any(|&r| r) {
        return Ok(cond.clone());
    }
    let null = null_caption(l);
    let mut ids = cond.token_ids.to_vec2::<u32>()?;
    let dtype = cond.pad_mask.dtype();
    let mut mask = cond.pad_mask.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
        ids[i] = null.ids.clone();
        mask[i] = null
            .mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
    }
    let dev = cond.token_ids.device();
    Ok(ConditioningBatch {
        token_ids: Tensor::from_vec(ids.concat(), (b, l), dev)?,
        pad_mask: Tensor::from_vec(mask.concat(), (b, l), dev)?.to_dtype(dtype)?,
    })
}

/// Mean squared error between the injected noise and the model's prediction of it.
pub fn training_loss(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: &ConditioningBatch,
    draw: &NoiseDraw,
) -> Result<Tensor> {
    if cond.batch_size() != x0.dim(0)? {
        return Err(Error::Shape(
            "caption batch does not match latent batch".into(),
        ));
    }
    let x_t = schedule.q_sample(x0, &draw.timesteps, &draw.noise)?;
    let cond = drop_captions(cond, &draw.uncond)?;
    let context = model.encode_text(&cond)?;
    let eps = model.predict_eps(&x_t, &draw.timesteps, &context, &cond.pad_mask)?;
    Ok((eps - &draw.noise)?.sqr()?.mean_all()?)
}
