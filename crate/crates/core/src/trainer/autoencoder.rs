use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde_json::json;

use super::common::{accumulate, ensure_finite, meta_field, EpochOrder};
use super::{Stage, TrainConfig, TrainLogRecord};
use crate::autoencoder::{
    hinge_losses, l1_loss, total_ae_loss, AeLossInputs, Autoencoder, AutoencoderConfig,
    ConvFeatureExtractor, ExtractorKind, PatchDiscriminator,
};
use crate::imaging::{batch_tensor, Image};
use crate::nn::{Adam, Archive, Grads, ParamStore};
use crate::rng::{RngState, SeedStream};
use crate::{Error, Result};

pub const AE_MAGIC: &str = "FIGGEN-AE-v1";

const VGG_SEED_STREAM: u64 = 0x7661;
const OCR_SEED_STREAM: u64 = 0x6f63;
const DISC_SEED_STREAM: u64 = 0xd15c;

/// Autoencoder weights read back from a checkpoint, ready for inference.
pub fn load_autoencoder(path: &Path, device: &Device) -> Result<(Autoencoder, u64)> {
    let archive = Archive::read(AE_MAGIC, path, device)?;
    let config: AutoencoderConfig = meta_field(&archive.meta, "autoencoder")?;
    let train: TrainConfig = meta_field(&archive.meta, "train")?;
    let step: u64 = meta_field(&archive.meta, "step")?;
    let store = ParamStore::new(train.precision.dtype(), device);
    let ae = Autoencoder::new(&config, &store, 0)?;
    store.load(&archive.with_prefix("ae."))?;
    Ok((ae, step))
}

/// Reconstruction-plus-perceptual training of the autoencoder against a patch discriminator.
pub struct AutoencoderTrainer {
    config: TrainConfig,
    ae: Autoencoder,
    disc: PatchDiscriminator,
    vgg: ConvFeatureExtractor,
    ocr: ConvFeatureExtractor,
    opt_g: Adam,
    opt_d: Adam,
    rng: SeedStream,
    order: EpochOrder,
    step: u64,
    images: Vec<Image>,
    started: Instant,
}

impl AutoencoderTrainer {
    pub fn new(
        config: &TrainConfig,
        ae_config: &AutoencoderConfig,
        images: Vec<Image>,
    ) -> Result<Self> {
        config.validate()?;
        if config.stage != Stage::Autoencoder {
            return Err(Error::Config(
                "train config is not for the autoencoder stage".into(),
            ));
        }
        if images.is_empty() {
            return Err(Error::Empty("autoencoder training set".into()));
        }
        let side = ae_config.input_resolution;
        if let Some(bad) = images
            .iter()
            .find(|i| i.width() != side || i.height() != side)
        {
            return Err(Error::Shape(format!(
                "training images must be {side}x{side}, found {}x{}",
                bad.width(),
                bad.height()
            )));
        }
        let dev = Device::Cpu;
        let dtype = config.precision.dtype();
        let seed = config.seed;
        let ae_store = ParamStore::new(dtype, &dev);
        let ae = Autoencoder::new(ae_config, &ae_store, seed)?;
        let disc_store = ParamStore::new(dtype, &dev);
        let disc = PatchDiscriminator::new(
            &disc_store,
            ae_config.disc_channels,
            seed ^ DISC_SEED_STREAM,
        )?;
        Ok(Self {
            config: config.clone(),
            vgg: ConvFeatureExtractor::new(
                ExtractorKind::Vgg,
                seed ^ VGG_SEED_STREAM,
                dtype,
                &dev,
            )?,
            ocr: ConvFeatureExtractor::new(
                ExtractorKind::Ocr,
                seed ^ OCR_SEED_STREAM,
                dtype,
                &dev,
            )?,
            opt_g: Adam::new(&ae_store, config.adam())?,
            opt_d: Adam::new(&disc_store, config.adam())?,
            ae,
            disc,
            rng: SeedStream::derive(seed, 1),
            order: EpochOrder::default(),
            step: 0,
            images,
            started: Instant::now(),
        })
    }

    /// Rebuilds a trainer from a checkpoint. `config` overrides the stored run settings (for
    /// instance a larger `max_steps`); `None` keeps them.
    pub fn resume(path: &Path, images: Vec<Image>, config: Option<&TrainConfig>) -> Result<Self> {
        let archive = Archive::read(AE_MAGIC, path, &Device::Cpu)?;
        let stored: TrainConfig = meta_field(&archive.meta, "train")?;
        let ae_config: AutoencoderConfig = meta_field(&archive.meta, "autoencoder")?;
        let config = config.cloned().unwrap_or(stored.clone());
        if config.precision != stored.precision || config.seed != stored.seed {
            return Err(Error::Incompatible {
                fields: vec!["precision and seed must match the checkpoint".into()],
            });
        }
        let mut t = Self::new(&config, &ae_config, images)?;
        t.ae.params().load(&archive.with_prefix("ae."))?;
        t.disc.params().load(&archive.with_prefix("disc."))?;
        let tensors = archive.tensor_map();
        t.opt_g
            .import("opt_g.", meta_field(&archive.meta, "opt_g_step")?, &tensors)?;
        t.opt_d
            .import("opt_d.", meta_field(&archive.meta, "opt_d_step")?, &tensors)?;
        t.rng = SeedStream::from_state(&meta_field::<RngState>(&archive.meta, "rng")?)?;
        t.order = meta_field(&archive.meta, "order")?;
        t.step = meta_field(&archive.meta, "step")?;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.ae
    }

    pub fn discriminator(&self) -> &PatchDiscriminator {
        &self.disc
    }

    pub fn generator_learning_rate(&self) -> f64 {
        self.opt_g.learning_rate()
    }

    /// Mean L1 between images and the decoded posterior mean, without touching any state.
    pub fn reconstruction_l1(&self, images: &[Image]) -> Result<f64> {
        let dtype = self.config.precision.dtype();
        let mut total = 0.0;
        for chunk in images.chunks(8) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let x = batch_tensor(&refs, dtype, &Device::Cpu)?;
            let x_hat = self.ae.decode(self.ae.encode(&x)?.mean())?;
            let l = l1_loss(&x, &x_hat)?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
            total += l * chunk.len() as f64;
        }
        Ok(total / images.len() as f64)
    }

    /// One optimizer step over `grad_accum` micro-batches.
    pub fn train_step(&mut self) -> Result<TrainLogRecord> {
        let accum = self.config.grad_accum;
        let adversarial = self.step >= self.config.warmup_steps;
        let last = self
            .ae
            .params()
            .get(Autoencoder::LAST_LAYER)
            .ok_or_else(|| Error::Invalid("autoencoder lacks its last layer".into()))?;
        let mut g_acc: Option<Grads> = None;
        let mut d_acc: Option<Grads> = None;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let w = 1.0 / accum as f64;
        for _ in 0..accum {
            let idx =
                self.order
                    .next_batch(self.images.len(), self.config.batch_size, &mut self.rng);
            let refs: Vec<&Image> = idx.iter().map(|&i| &self.images[i]).collect();
            let x = batch_tensor(&refs, self.config.precision.dtype(), &Device::Cpu)?;
            let dist = self.ae.encode(&x)?;
            let z = dist.sample(&mut self.rng)?;
            let x_hat = self.ae.decode(&z)?;
            let d_fake = if adversarial {
                Some(self.disc.forward(&x_hat)?)
            } else {
                None
            };
            let (loss, br) = total_ae_loss(
                &self.ae.config().loss,
                &self.vgg,
                &self.ocr,
                &AeLossInputs {
                    x: &x,
                    x_hat: &x_hat,
                    dist: &dist,
                    d_fake: d_fake.as_ref(),
                    last_layer: Some(last.as_tensor()),
                    step: self.step,
                    warmup_steps: self.config.warmup_steps,
                },
            )?;
            ensure_finite(self.step, "autoencoder loss", br.total)?;
            accumulate(
                &mut g_acc,
                self.ae.params().collect_grads(&loss.backward()?),
                w,
            )?;

            let mut d_loss_value = 0.0;
            if adversarial {
                let d_real = self.disc.forward(&x)?;
                let d_fake = self.disc.forward(&x_hat.detach())?;
                let (d_loss, _) = hinge_losses(&d_real, &d_fake)?;
                d_loss_value = d_loss
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
                ensure_finite(self.step, "discriminator loss", d_loss_value)?;
                accumulate(
                    &mut d_acc,
                    self.disc.params().collect_grads(&d_loss.backward()?),
                    w,
                )?;
            }
            for (k, v) in [
                ("rec", br.rec),
                ("vgg", br.vgg),
                ("ocr", br.ocr),
                ("kl", br.kl),
                ("adv", br.adv),
                ("adaptive_weight", br.adaptive_weight),
                ("disc_factor", br.disc_factor),
                ("total", br.total),
                ("disc", d_loss_value),
            ] {
                *sums.entry(k.to_string()).or_default() += v * w;
            }
        }

        let mut g = g_acc.expect("grad_accum >= 1");
        let grad_norm = g.norm()?;
        ensure_finite(self.step, "gradient norm", grad_norm)?;
        if let Some(c) = self.config.grad_clip {
            g.clip_norm(c)?;
        }
        self.opt_g.step(&g)?;
        if let Some(mut d) = d_acc {
            if let Some(c) = self.config.grad_clip {
                d.clip_norm(c)?;
            }
            self.opt_d.step(&d)?;
        }
        self.step += 1;
        let record = TrainLogRecord {
            step: self.step,
            losses: sums,
            grad_norm,
            wallclock: self.started.elapsed().as_secs_f64(),
        };
        Ok(record)
    }

    /// Trains until `max_steps`, passing every record to `log` and checkpointing to `checkpoint`
    /// every `checkpoint_every` steps and at the end.
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
        let (g_step, g_moments) = self.opt_g.export("opt_g.");
        let (d_step, d_moments) = self.opt_d.export("opt_d.");
        let mut archive = Archive::new(json!({
            "stage": Stage::Autoencoder,
            "step": self.step,
            "autoencoder": self.ae.config(),
            "train": self.config,
            "rng": self.rng.state(),
            "order": self.order,
            "opt_g_step": g_step,
            "opt_d_step": d_step,
        }));
        archive.extend(prefixed("ae.", self.ae.params()));
        archive.extend(prefixed("disc.", self.disc.params()));
        archive.extend(g_moments);
        archive.extend(d_moments);
        archive.write(AE_MAGIC, path)
    }
}

pub(crate) fn prefixed(prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .snapshot()
        .into_iter()
        .map(|(k, t)| (format!("{prefix}{k}"), t))
        .collect()
}
