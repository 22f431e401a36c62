use candle_core::{Module, Tensor};

use crate::nn::{Conv2d, ParamBuilder, ParamStore};
use crate::Result;

/// Convolutional critic emitting a grid of real/fake scores.
pub struct PatchDiscriminator {
    params: ParamStore,
    layers: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(params: &ParamStore, channels: usize, seed: u64) -> Result<Self> {
        let b = ParamBuilder::new(params, seed);
        let c = channels;
        let layers = vec![
            Conv2d::new(&b.pp("layer.0"), 3, c, 4, 2, 1)?,
            Conv2d::new(&b.pp("layer.1"), c, 2 * c, 4, 2, 1)?,
            Conv2d::new(&b.pp("layer.2"), 2 * c, 4 * c, 3, 1, 1)?,
            Conv2d::new(&b.pp("head"), 4 * c, 1, 3, 1, 1)?,
        ];
        Ok(Self {
            params: params.clone(),
            layers,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `images`: `(B, 3, H, W)` in `[0, 1]`; returns `(B, 1, H/4, W/4)` logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = ((images * 2.0)? - 1.0)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < last {
                x = x.maximum(&(&x * 0.2)?)?;
            }
        }
        Ok(x)
    }
}

/// Hinge losses `(d_loss, g_loss)`:
/// `d_loss = mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))`, `g_loss = -mean(D(fake))`.
pub fn hinge_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let real_term = (1.0 - d_real)?.relu()?.mean_all()?;
    let fake_term = (d_fake + 1.0)?.relu()?.mean_all()?;
    let d_loss = (real_term + fake_term)?;
    let g_loss = d_fake.mean_all()?.neg()?;
    Ok((d_loss, g_loss))
}
