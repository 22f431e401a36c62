use std::fmt;
use std::path::Path;

use figgen_core::{AutoencoderConfig, CorpusConfig, DiffusionConfig, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const CONFIG_ECHO: &str = "config.toml";

/// Rejected configuration. Reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Seed of the frozen feature extractors; scores are only comparable under equal seeds.
    pub extractor_seed: u64,
    pub num_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            extractor_seed: 0,
            num_samples: 16,
        }
    }
}

/// Every setting a run can use. Files are merged over the defaults, then flags override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub autoencoder: AutoencoderConfig,
    pub diffusion: DiffusionConfig,
    pub train_autoencoder: TrainConfig,
    pub train_diffusion: TrainConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            train_autoencoder: TrainConfig::autoencoder(),
            train_diffusion: TrainConfig::diffusion(),
            sampler: SamplerConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Collects the dotted path of every key in `user` that `known` does not define.
fn unknown_keys(
    user: &Map<String, Value>,
    known: &Map<String, Value>,
    prefix: &str,
    out: &mut Vec<String>,
) {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (known.get(key), value) {
            (None, _) => out.push(path),
            (Some(Value::Object(k)), Value::Object(u)) => unknown_keys(u, k, &path, out),
            _ => {}
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        let user = serde_json::to_value(user).map_err(|e| ConfigError(e.to_string()))?;
        let mut resolved = serde_json::to_value(Self::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        if let (Value::Object(u), Value::Object(k)) = (&user, &resolved) {
            unknown_keys(u, k, "", &mut unknown);
        }
        if !unknown.is_empty() {
            return Err(ConfigError(format!("unknown keys: {}", unknown.join(", "))));
        }
        merge(&mut resolved, user);
        serde_json::from_value(resolved).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml_str(&text)
                    .map_err(|e| ConfigError(format!("{}: {}", p.display(), e.0)))
            }
        }
    }

    /// Checks every section and reports all failures together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut check = |section: &str, r: figgen_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("[{section}] {e}"));
            }
        };
        check("corpus", self.corpus.validate());
        check("autoencoder", self.autoencoder.validate());
        check("diffusion", self.diffusion.validate());
        check("train_autoencoder", self.train_autoencoder.validate());
        check("train_diffusion", self.train_diffusion.validate());
        check(
            "sampler",
            self.sampler.validate(self.diffusion.schedule.num_timesteps),
        );
        if self.train_autoencoder.stage != figgen_core::Stage::Autoencoder {
            problems.push("[train_autoencoder] stage must be \"autoencoder\"".into());
        }
        if self.train_diffusion.stage != figgen_core::Stage::Diffusion {
            problems.push("[train_diffusion] stage must be \"diffusion\"".into());
        }
        if self.metrics.num_samples < 2 {
            problems.push("[metrics] num_samples must be at least 2".into());
        }
        if self.autoencoder.input_resolution != self.corpus.resolution {
            problems.push(format!(
                "[autoencoder] input_resolution {} differs from corpus resolution {}",
                self.autoencoder.input_resolution, self.corpus.resolution
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(problems.join("; ")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}
