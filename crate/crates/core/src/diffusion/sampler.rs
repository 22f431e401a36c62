use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{cfg_combine, ddim_step, timestep_ladder, Denoiser, LatentDiffusion, NoiseSchedule};
use crate::autoencoder::Autoencoder;
use crate::corpus::TokenizedCaption;
use crate::imaging::{unbatch, Image};
use crate::rng::SeedStream;
use crate::text_encoder::ConditioningBatch;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 200,
            eta: 0.0,
            cfg_scale: 5.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, num_timesteps: usize) -> Result<()> {
        timestep_ladder(num_timesteps, self.num_steps)?;
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!(
                "cfg_scale must be finite and >= 0, got {}",
                self.cfg_scale
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be finite and >= 0, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Noise-predictor calls, counting the conditional and unconditional passes separately.
    pub unet_evals: usize,
}

/// Runs the DDIM ladder from Gaussian noise and returns latents in the model's scaled space.
///
/// Row `i` draws its noise from a stream derived from `(seed, i)`, so a caption's sample does not
/// depend on what else is in the batch.
pub fn sample_latents(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    cond: &ConditioningBatch,
    channels: usize,
    side: usize,
) -> Result<(Tensor, SampleStats)> {
    config.validate(schedule.num_timesteps())?;
    let b = cond.batch_size();
    let dtype = cond.pad_mask.dtype();
    let dev = cond.pad_mask.device().clone();
    let mut streams: Vec<SeedStream> = (0..b as u64)
        .map(|i| SeedStream::derive(config.seed, i))
        .collect();
    let draw = |streams: &mut [SeedStream]| -> Result<Tensor> {
        let rows = streams
            .iter_mut()
            .map(|s| s.normal_tensor((1, channels, side, side), dtype, &dev))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    };
    let mut x = draw(&mut streams)?;

    let guided = config.cfg_scale != 1.0;
    // nothing here is differentiated; detaching keeps the ladder from holding every step's graph
    let ctx = model.encode_text(cond)?.detach();
    let null = if guided {
        let n = ConditioningBatch::null(b, cond.token_ids.dim(1)?, dtype, &dev)?;
        let c = model.encode_text(&n)?.detach();
        Some((c, n.pad_mask))
    } else {
        None
    };

    let ladder = timestep_ladder(schedule.num_timesteps(), config.num_steps)?;
    let mut stats = SampleStats::default();
    for (i, &t) in ladder.iter().enumerate() {
        let ts = vec![t; b];
        let eps_c = model.predict_eps(&x, &ts, &ctx, &cond.pad_mask)?;
        stats.unet_evals += 1;
        let eps = match &null {
            Some((nctx, nmask)) => {
                let eps_u = model.predict_eps(&x, &ts, nctx, nmask)?;
                stats.unet_evals += 1;
                cfg_combine(&eps_u, &eps_c, config.cfg_scale)?
            }
            None => eps_c,
        };
        let t_prev = ladder.get(i + 1).copied();
        let noise = if config.eta > 0.0 {
            Some(draw(&mut streams)?)
        } else {
            None
        };
        x = ddim_step(
            schedule,
            &x,
            &eps.detach(),
            t,
            t_prev,
            config.eta,
            noise.as_ref(),
        )?
        .detach();
    }
    Ok((x, stats))
}

/// Samples one image per caption and decodes it with the autoencoder.
pub fn generate(
    model: &LatentDiffusion,
    autoencoder: &Autoencoder,
    captions: &[TokenizedCaption],
    config: &SamplerConfig,
) -> Result<(Vec<Image>, SampleStats)> {
    let unet = &model.config().unet;
    let ae = autoencoder.config();
    if ae.embed_dim != unet.in_channels || ae.latent_resolution() != unet.latent_size {
        return Err(Error::Incompatible {
            fields: vec![format!(
                "autoencoder latent {}x{}x{} vs unet input {}x{}x{}",
                ae.latent_resolution(),
                ae.latent_resolution(),
                ae.embed_dim,
                unet.latent_size,
                unet.latent_size,
                unet.in_channels
            )],
        });
    }
    let params = model.params();
    let refs: Vec<&TokenizedCaption> = captions.iter().collect();
    let cond = ConditioningBatch::from_captions(&refs, params.dtype(), params.device())?;
    let (z, stats) = sample_latents(
        model,
        model.schedule(),
        config,
        &cond,
        unet.in_channels,
        unet.latent_size,
    )?;
    let decoded = autoencoder.decode(&(z / model.latent_scale())?)?;
    Ok((unbatch(&decoded)?, stats))
}
