use std::collections::BTreeMap;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::nn::AdamConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Autoencoder,
    Diffusion,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Micro-batch size; the effective batch is `batch_size * grad_accum`.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Steps before the adversarial term and discriminator updates switch on.
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; a final one is still written.
    pub checkpoint_every: u64,
    pub grad_clip: Option<f64>,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn autoencoder() -> Self {
        Self {
            stage: Stage::Autoencoder,
            batch_size: 4,
            grad_accum: 1,
            learning_rate: 4.5e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 50_000,
            max_steps: 100_000,
            seed: 0,
            checkpoint_every: 5_000,
            grad_clip: None,
            precision: Precision::F32,
        }
    }

    pub fn diffusion() -> Self {
        Self {
            stage: Stage::Diffusion,
            batch_size: 32,
            warmup_steps: 0,
            learning_rate: 1e-4,
            ..Self::autoencoder()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Autoencoder => Self::autoencoder(),
            Stage::Diffusion => Self::diffusion(),
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive when set");
            }
        }
        Ok(())
    }
}

/// One line of the JSON-Lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Optimizer steps taken so far, including the one this record describes.
    pub step: u64,
    pub losses: BTreeMap<String, f64>,
    pub grad_norm: f64,
    /// Seconds since the current process started this run.
    pub wallclock: f64,
}

impl TrainLogRecord {
    /// Equality ignoring wallclock time.
    pub fn same_values(&self, other: &TrainLogRecord) -> bool {
        self.step == other.step
            && self.losses == other.losses
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
    }
}
