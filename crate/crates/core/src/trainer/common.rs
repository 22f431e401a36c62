use serde::{Deserialize, Serialize};

use crate::nn::Grads;
use crate::rng::SeedStream;
use crate::{Error, Result};

/// Shuffled pass over the dataset that reshuffles whenever it runs out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct EpochOrder {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochOrder {
    pub(crate) fn next_batch(&mut self, n: usize, size: usize, rng: &mut SeedStream) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Running mean of micro-batch gradients.
pub(crate) fn accumulate(acc: &mut Option<Grads>, grads: Grads, weight: f64) -> Result<()> {
    match acc {
        Some(a) => a.add_scaled(&grads, weight),
        None => {
            let mut g = grads;
            g.scale(weight)?;
            *acc = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn ensure_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} became {v} at step {step}; last checkpoint kept"
        )))
    }
}

pub(crate) fn meta_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    key: &str,
) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint header lacks '{key}'")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Checkpoint(format!("bad '{key}' in header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_index_appears_once_per_epoch() {
        let mut rng = SeedStream::new(1);
        let mut order = EpochOrder::default();
        let mut seen = order.next_batch(5, 3, &mut rng);
        seen.extend(order.next_batch(5, 2, &mut rng));
        seen.sort();
        assert_eq!(seen, [0, 1, 2, 3, 4]);
    }
}
