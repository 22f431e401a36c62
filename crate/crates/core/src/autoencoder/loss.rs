use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, LatentDistribution};
use crate::{Error, Result};

const ADAPTIVE_EPS: f64 = 1e-4;
const ADAPTIVE_MAX: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeLossWeights {
    pub disc: f64,
    pub vgg: f64,
    pub ocr: f64,
    pub kl: f64,
}

impl Default for AeLossWeights {
    fn default() -> Self {
        Self {
            disc: 0.5,
            vgg: 0.2,
            ocr: 0.8,
            kl: 1e-6,
        }
    }
}

impl AeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.disc, self.vgg, self.ocr, self.kl]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Every term before weighting, plus the weights that were applied to the adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeLossBreakdown {
    pub rec: f64,
    pub vgg: f64,
    pub ocr: f64,
    pub kl: f64,
    pub adv: f64,
    pub adaptive_weight: f64,
    pub disc_factor: f64,
    pub total: f64,
}

/// Mean absolute error whose subgradient at zero is zero.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = (a - b)?;
    let sign = (d.gt(0.0)?.to_dtype(d.dtype())? - d.lt(0.0)?.to_dtype(d.dtype())?)?;
    Ok((d * sign.detach())?.mean_all()?)
}

/// `sum_l w_l * mean((phi_l(a) - phi_l(b))^2)`.
pub fn perceptual_loss(extractor: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "perceptual loss inputs differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for ((pa, pb), &w) in fa.iter().zip(&fb).zip(extractor.layer_weights()) {
        let term = (pa - pb)?.sqr()?.mean_all()?;
        total = (total + (term * w)?)?;
    }
    Ok(total)
}

pub struct AeLossInputs<'a> {
    /// Target images `(B, 3, S, S)`.
    pub x: &'a Tensor,
    /// Reconstructions, same shape, attached to the decoder graph.
    pub x_hat: &'a Tensor,
    pub dist: &'a LatentDistribution,
    /// Discriminator logits on `x_hat`, if an adversarial term should be computed.
    pub d_fake: Option<&'a Tensor>,
    /// Decoder output-layer weight, for the adaptive adversarial weight.
    pub last_layer: Option<&'a Tensor>,
    pub step: u64,
    pub warmup_steps: u64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `L1 + w_vgg L_vgg + w_ocr L_ocr + w_kl L_kl + g(step) w_disc lambda L_adv`, where
/// `g(step) = 0` before `warmup_steps` and `lambda` balances the reconstruction and adversarial
/// gradient norms at the decoder's last layer. `lambda` is treated as a constant.
pub fn total_ae_loss(
    weights: &AeLossWeights,
    vgg: &dyn FeatureExtractor,
    ocr: &dyn FeatureExtractor,
    inputs: &AeLossInputs<'_>,
) -> Result<(Tensor, AeLossBreakdown)> {
    let rec = l1_loss(inputs.x, inputs.x_hat)?;
    let vgg_term = perceptual_loss(vgg, inputs.x, inputs.x_hat)?;
    let ocr_term = perceptual_loss(ocr, inputs.x, inputs.x_hat)?;
    let kl = inputs.dist.kl_divergence()?;

    let nll = ((&rec + (&vgg_term * weights.vgg)?)? + (&ocr_term * weights.ocr)?)?;
    let mut total = (&nll + (&kl * weights.kl)?)?;

    let disc_factor = if inputs.step >= inputs.warmup_steps {
        1.0
    } else {
        0.0
    };
    let mut breakdown = AeLossBreakdown {
        rec: scalar(&rec)?,
        vgg: scalar(&vgg_term)?,
        ocr: scalar(&ocr_term)?,
        kl: scalar(&kl)?,
        disc_factor,
        ..Default::default()
    };

    if let Some(d_fake) = inputs.d_fake {
        let g_loss = d_fake.mean_all()?.neg()?;
        breakdown.adv = scalar(&g_loss)?;
        if disc_factor > 0.0 {
            let lambda = match inputs.last_layer {
                Some(last) => adaptive_weight(&nll, &g_loss, last)?,
                None => 0.0,
            };
            breakdown.adaptive_weight = lambda;
            total = (total + (g_loss * (disc_factor * weights.disc * lambda))?)?;
        }
    }
    breakdown.total = scalar(&total)?;
    Ok((total, breakdown))
}

fn adaptive_weight(nll: &Tensor, g_loss: &Tensor, last_layer: &Tensor) -> Result<f64> {
    let norm = |loss: &Tensor| -> Result<f64> {
        let grads = loss.backward()?;
        match grads.get(last_layer) {
            Some(g) => Ok(scalar(&g.sqr()?.sum_all()?)?.sqrt()),
            None => Ok(0.0),
        }
    };
    let rec_norm = norm(nll)?;
    let adv_norm = norm(g_loss)?;
    Ok((rec_norm / (adv_norm + ADAPTIVE_EPS)).clamp(0.0, ADAPTIVE_MAX))
}
