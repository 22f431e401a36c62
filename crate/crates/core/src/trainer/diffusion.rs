use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde_json::json;

use super::autoencoder::{load_autoencoder, prefixed};
use super::common::{accumulate, ensure_finite, meta_field, EpochOrder};
use super::{Stage, TrainConfig, TrainLogRecord};
use crate::autoencoder::Autoencoder;
use crate::corpus::{PreparedSample, TokenizedCaption, Tokenizer};
use crate::diffusion::{training_loss, DiffusionConfig, LatentDiffusion, NoiseDraw};
use crate::imaging::{batch_tensor, Image};
use crate::nn::{Adam, Archive, Grads, ParamStore};
use crate::rng::{RngState, SeedStream};
use crate::text_encoder::ConditioningBatch;
use crate::{Error, Result};

pub const LDM_MAGIC: &str = "FIGGEN-LDM-v1";

/// Everything needed to sample: the denoiser, its frozen autoencoder and the tokenizer.
pub struct DiffusionBundle {
    pub model: LatentDiffusion,
    pub autoencoder: Autoencoder,
    pub tokenizer: Tokenizer,
    pub step: u64,
}

pub fn load_diffusion(path: &Path, device: &Device) -> Result<DiffusionBundle> {
    let archive = Archive::read(LDM_MAGIC, path, device)?;
    let train: TrainConfig = meta_field(&archive.meta, "train")?;
    let config: DiffusionConfig = meta_field(&archive.meta, "diffusion")?;
    let dtype = train.precision.dtype();
    let mut model = LatentDiffusion::new(&config, dtype, device, 0)?;
    model.params().load(&archive.with_prefix("model."))?;
    model.set_latent_scale(meta_field(&archive.meta, "latent_scale")?)?;
    let ae_store = ParamStore::new(dtype, device);
    let autoencoder = Autoencoder::new(&meta_field(&archive.meta, "autoencoder")?, &ae_store, 0)?;
    ae_store.load(&archive.with_prefix("ae."))?;
    let tokenizer = Tokenizer::from_json(&meta_field::<String>(&archive.meta, "tokenizer")?)?;
    Ok(DiffusionBundle {
        model,
        autoencoder,
        tokenizer,
        step: meta_field(&archive.meta, "step")?,
    })
}

/// Lists every way the autoencoder, tokenizer and data disagree with the diffusion config.
pub fn compatibility_issues(
    config: &DiffusionConfig,
    autoencoder: &Autoencoder,
    tokenizer: &Tokenizer,
    image_side: Option<usize>,
) -> Vec<String> {
    let ae = autoencoder.config();
    let mut issues = Vec::new();
    if ae.embed_dim != config.unet.in_channels {
        issues.push(format!(
            "embed_dim: autoencoder {} vs unet in_channels {}",
            ae.embed_dim, config.unet.in_channels
        ));
    }
    if ae.latent_resolution() != config.unet.latent_size {
        issues.push(format!(
            "latent resolution: autoencoder {} vs unet latent_size {}",
            ae.latent_resolution(),
            config.unet.latent_size
        ));
    }
    if let Some(side) = image_side {
        if side != ae.input_resolution {
            issues.push(format!(
                "resolution: data {side} vs autoencoder input_resolution {}",
                ae.input_resolution
            ));
        }
    }
    if tokenizer.vocab_size() > config.text.vocab_size {
        issues.push(format!(
            "vocab_size: tokenizer {} exceeds text encoder {}",
            tokenizer.vocab_size(),
            config.text.vocab_size
        ));
    }
    if tokenizer.max_len() > config.text.max_len {
        issues.push(format!(
            "max_len: tokenizer {} exceeds text encoder {}",
            tokenizer.max_len(),
            config.text.max_len
        ));
    }
    issues
}

/// Joint training of the text encoder and U-Net on frozen autoencoder latents.
pub struct DiffusionTrainer {
    config: TrainConfig,
    model: LatentDiffusion,
    autoencoder: Autoencoder,
    tokenizer: Tokenizer,
    /// Unscaled posterior-mean latents, one `(1, C, h, w)` tensor per sample.
    latents: Vec<Tensor>,
    captions: Vec<TokenizedCaption>,
    opt: Adam,
    rng: SeedStream,
    order: EpochOrder,
    step: u64,
    started: Instant,
}

impl DiffusionTrainer {
    /// `ae_checkpoint` is an autoencoder archive; `samples` must be tokenized with `tokenizer`.
    pub fn new(
        config: &TrainConfig,
        diffusion: &DiffusionConfig,
        ae_checkpoint: &Path,
        tokenizer: Tokenizer,
        samples: &[PreparedSample],
    ) -> Result<Self> {
        let (autoencoder, _) = load_autoencoder(ae_checkpoint, &Device::Cpu)?;
        Self::with_autoencoder(config, diffusion, autoencoder, tokenizer, samples)
    }

    pub fn with_autoencoder(
        config: &TrainConfig,
        diffusion: &DiffusionConfig,
        autoencoder: Autoencoder,
        tokenizer: Tokenizer,
        samples: &[PreparedSample],
    ) -> Result<Self> {
        config.validate()?;
        diffusion.validate()?;
        if config.stage != Stage::Diffusion {
            return Err(Error::Config(
                "train config is not for the diffusion stage".into(),
            ));
        }
        if samples.is_empty() {
            return Err(Error::Empty("diffusion training set".into()));
        }
        let side = samples[0].image.width();
        let issues = compatibility_issues(diffusion, &autoencoder, &tokenizer, Some(side));
        if !issues.is_empty() {
            return Err(Error::Incompatible { fields: issues });
        }
        let dtype = config.precision.dtype();
        if autoencoder.params().dtype() != dtype {
            return Err(Error::Incompatible {
                fields: vec![format!(
                    "precision: autoencoder {:?} vs run {:?}",
                    autoencoder.params().dtype(),
                    dtype
                )],
            });
        }
        let dev = Device::Cpu;
        let mut latents = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let refs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let z = autoencoder
                .encode(&batch_tensor(&refs, dtype, &dev)?)?
                .mean()
                .detach();
            for i in 0..chunk.len() {
                latents.push(z.narrow(0, i, 1)?);
            }
        }
        let model = LatentDiffusion::new(diffusion, dtype, &dev, config.seed)?;
        let opt = Adam::new(model.params(), config.adam())?;
        let mut t = Self {
            config: config.clone(),
            model,
            autoencoder,
            tokenizer,
            latents,
            captions: samples.iter().map(|s| s.tokens.clone()).collect(),
            opt,
            rng: SeedStream::derive(config.seed, 2),
            order: EpochOrder::default(),
            step: 0,
            started: Instant::now(),
        };
        t.estimate_latent_scale()?;
        Ok(t)
    }

    /// Sets the scale to `1 / std` over the first training batch. The batch is drawn from a
    /// copy of the order and rng so training sees the same sequence either way.
    fn estimate_latent_scale(&mut self) -> Result<()> {
        let mut rng = self.rng.clone();
        let mut order = self.order.clone();
        let idx = order.next_batch(self.latents.len(), self.config.batch_size, &mut rng);
        let batch = Tensor::cat(
            &idx.iter().map(|&i| &self.latents[i]).collect::<Vec<_>>(),
            0,
        )?;
        let v: Vec<f64> = batch.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        self.model.set_latent_scale(scale)
    }

    pub fn resume(
        path: &Path,
        samples: &[PreparedSample],
        config: Option<&TrainConfig>,
    ) -> Result<Self> {
        let archive = Archive::read(LDM_MAGIC, path, &Device::Cpu)?;
        let stored: TrainConfig = meta_field(&archive.meta, "train")?;
        let config = config.cloned().unwrap_or(stored.clone());
        if config.precision != stored.precision || config.seed != stored.seed {
            return Err(Error::Incompatible {
                fields: vec!["precision and seed must match the checkpoint".into()],
            });
        }
        let bundle = load_diffusion(path, &Device::Cpu)?;
        let mut t = Self::with_autoencoder(
            &config,
            bundle.model.config(),
            bundle.autoencoder,
            bundle.tokenizer,
            samples,
        )?;
        t.model.params().load(&archive.with_prefix("model."))?;
        t.model.set_latent_scale(bundle.model.latent_scale())?;
        t.opt.import(
            "opt.",
            meta_field(&archive.meta, "opt_step")?,
            &archive.tensor_map(),
        )?;
        t.rng = SeedStream::from_state(&meta_field::<RngState>(&archive.meta, "rng")?)?;
        t.order = meta_field(&archive.meta, "order")?;
        t.step = bundle.step;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &LatentDiffusion {
        &self.model
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.autoencoder
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    /// Scaled training latents, in sample order.
    pub fn scaled_latents(&self) -> Result<Vec<Tensor>> {
        let s = self.model.latent_scale();
        self.latents.iter().map(|z| Ok((z * s)?)).collect()
    }

    pub fn train_step(&mut self) -> Result<TrainLogRecord> {
        let accum = self.config.grad_accum;
        let w = 1.0 / accum as f64;
        let dtype = self.config.precision.dtype();
        let dev = Device::Cpu;
        let mut acc: Option<Grads> = None;
        let mut mse = 0.0;
        let mut null_rows = 0;
        for _ in 0..accum {
            let idx =
                self.order
                    .next_batch(self.latents.len(), self.config.batch_size, &mut self.rng);
            let x0 = (Tensor::cat(
                &idx.iter().map(|&i| &self.latents[i]).collect::<Vec<_>>(),
                0,
            )? * self.model.latent_scale())?;
            let caps: Vec<&TokenizedCaption> = idx.iter().map(|&i| &self.captions[i]).collect();
            let cond = ConditioningBatch::from_captions(&caps, dtype, &dev)?;
            let draw = NoiseDraw::sample(
                &mut self.rng,
                x0.dims(),
                self.model.schedule().num_timesteps(),
                self.model.config().p_uncond,
                dtype,
                &dev,
            )?;
            null_rows += draw.null_rows();
            let loss = training_loss(&self.model, self.model.schedule(), &x0, &cond, &draw)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            ensure_finite(self.step, "diffusion loss", value)?;
            mse += value * w;
            accumulate(
                &mut acc,
                self.model.params().collect_grads(&loss.backward()?),
                w,
            )?;
        }
        let mut g = acc.expect("grad_accum >= 1");
        let grad_norm = g.norm()?;
        ensure_finite(self.step, "gradient norm", grad_norm)?;
        if let Some(c) = self.config.grad_clip {
            g.clip_norm(c)?;
        }
        self.opt.step(&g)?;
        self.step += 1;
        let record = TrainLogRecord {
            step: self.step,
            losses: [
                ("mse".to_string(), mse),
                ("null_captions".to_string(), null_rows as f64),
            ]
            .into_iter()
            .collect(),
            grad_norm,
            wallclock: self.started.elapsed().as_secs_f64(),
        };
        Ok(record)
    }

    pub fn run(
        &mut self,
        checkpoint: Option<&Path>,
        log: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.max_steps {
            let record = self.train_step()?;
            log(&record)?;
            if let Some(path) = checkpoint {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (opt_step, moments) = self.opt.export("opt.");
        let mut archive = Archive::new(json!({
            "stage": Stage::Diffusion,
            "step": self.step,
            "diffusion": self.model.config(),
            "autoencoder": self.autoencoder.config(),
            "train": self.config,
            "latent_scale": self.model.latent_scale(),
            "tokenizer": self.tokenizer.to_json()?,
            "rng": self.rng.state(),
            "order": self.order,
            "opt_step": opt_step,
            "param_counts": {
                "unet": self.model.config().unet.param_count(),
                "text": self.model.config().text.param_count(),
            },
        }));
        archive.extend(prefixed("model.", self.model.params()));
        archive.extend(prefixed("ae.", self.autoencoder.params()));
        archive.extend(moments);
        archive.write(LDM_MAGIC, path)
    }
}
