use std::fmt;

use candle_core::{DType, Device, Module, Tensor};
use sha2::{Digest, Sha256};

use crate::nn::{Conv2d, ParamBuilder, ParamStore};
use crate::Result;

/// A frozen map from images to an ordered list of feature maps.
///
/// Implementations must be deterministic and must not expose trainable parameters; gradients
/// flow through them to the input images only.
pub trait FeatureExtractor: Send + Sync {
    /// `images`: `(B, 3, H, W)` in `[0, 1]`. Returns one `(B, C_l, H_l, W_l)` tensor per layer.
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>>;

    /// Non-negative weight of each layer, same length as [`FeatureExtractor::features`].
    fn layer_weights(&self) -> &[f64];

    /// Name plus seed/content hash; scores are only comparable under identical identities.
    fn identity(&self) -> &str;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    /// Generic perceptual features.
    Vgg,
    /// Features of a high-pass filtered input, emphasizing thin glyph strokes.
    Ocr,
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::Vgg => "vgg-style",
            ExtractorKind::Ocr => "ocr-style",
        })
    }
}

const WIDTHS: [usize; 4] = [16, 32, 32, 32];
const STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Seeded, randomly initialized 4-layer ReLU conv stack, frozen at construction.
pub struct ConvFeatureExtractor {
    kind: ExtractorKind,
    high_pass: Option<Tensor>,
    layers: Vec<Conv2d>,
    weights: Vec<f64>,
    identity: String,
}

impl ConvFeatureExtractor {
    pub fn new(kind: ExtractorKind, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(dtype, device);
        let b = ParamBuilder::frozen(&store, seed);
        let mut layers = Vec::with_capacity(WIDTHS.len());
        let mut c_in = 3;
        for (i, (&w, &s)) in WIDTHS.iter().zip(&STRIDES).enumerate() {
            let lb = b.pp(format!("layer.{i}"));
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let weight = lb.normal("weight", (w, c_in, 3, 3), std)?;
            layers.push(Conv2d::from_weights(weight, None, s, 1));
            c_in = w;
        }
        let high_pass = match kind {
            ExtractorKind::Vgg => None,
            // depthwise 3x3 Laplacian
            ExtractorKind::Ocr => {
                let k = [0f32, -1., 0., -1., 4., -1., 0., -1., 0.];
                let k: Vec<f32> = k.iter().copied().cycle().take(27).collect();
                Some(Tensor::from_vec(k, (3, 1, 3, 3), device)?.to_dtype(dtype)?)
            }
        };
        let mut hasher = Sha256::new();
        for (name, t) in store.snapshot() {
            hasher.update(name.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hex::encode(hasher.finalize());
        Ok(Self {
            kind,
            high_pass,
            layers,
            weights: vec![1.0 / WIDTHS.len() as f64; WIDTHS.len()],
            identity: format!("{kind}-conv4:seed={seed}:sha256={}", &digest[..12]),
        })
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = ((images * 2.0)? - 1.0)?;
        if let Some(k) = &self.high_pass {
            x = x.conv2d(k, 1, 1, 1, 3)?;
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }

    fn layer_weights(&self) -> &[f64] {
        &self.weights
    }

    fn identity(&self) -> &str {
        &self.identity
    }
}

/// Single layer returning the images themselves.
pub struct IdentityExtractor {
    weights: [f64; 1],
}

impl IdentityExtractor {
    pub fn new(weight: f64) -> Self {
        Self { weights: [weight] }
    }
}

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![images.clone()])
    }

    fn layer_weights(&self) -> &[f64] {
        &self.weights
    }

    fn identity(&self) -> &str {
        "identity"
    }
}
