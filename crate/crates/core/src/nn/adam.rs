use std::collections::{BTreeMap, HashMap};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the parameters of one [`ParamStore`], with exportable moment state.
pub struct Adam {
    config: AdamConfig,
    params: ParamStore,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let moments = params
            .named_vars()
            .into_iter()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok((name, (z.clone(), z)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params: params.clone(),
            step: 0,
            moments,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &Grads) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in self.params.named_vars() {
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .get_mut(&name)
                .ok_or_else(|| Error::Invalid(format!("no optimizer state for {name}")))?;
            *m = ((m.affine(beta1, 0.0)?) + g.affine(1.0 - beta1, 0.0)?)?;
            *v = ((v.affine(beta2, 0.0)?) + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?.affine(learning_rate, 0.0)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`, plus the step count.
    pub fn export(&self, prefix: &str) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((format!("{prefix}m.{name}"), m.clone()));
            out.push((format!("{prefix}v.{name}"), v.clone()));
        }
        (self.step, out)
    }

    /// Restores state produced by [`Adam::export`]; validates everything before mutating.
    pub fn import(
        &mut self,
        prefix: &str,
        step: u64,
        tensors: &HashMap<String, Tensor>,
    ) -> Result<()> {
        let mut restored = BTreeMap::new();
        for (name, (m, _)) in &self.moments {
            let fetch = |key: String| -> Result<Tensor> {
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if t.dims() != m.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state {key} has wrong shape"
                    )));
                }
                Ok(t.to_dtype(m.dtype())?)
            };
            let mm = fetch(format!("{prefix}m.{name}"))?;
            let vv = fetch(format!("{prefix}v.{name}"))?;
            restored.insert(name.clone(), (mm, vv));
        }
        self.moments = restored;
        self.step = step;
        Ok(())
    }
}
