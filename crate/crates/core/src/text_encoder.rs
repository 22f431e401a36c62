//! Pre-norm transformer encoder over caption tokens, trained from scratch jointly with the
//! denoiser. The full token sequence is used as cross-attention context.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedCaption, BOS_ID, EOS_ID, PAD_ID};
use crate::nn::{attention, Embedding, LayerNorm, Linear, ParamBuilder, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub num_layers: usize,
    pub width: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl TextEncoderConfig {
    fn with_layers(num_layers: usize) -> Self {
        Self {
            num_layers,
            width: 512,
            num_heads: 8,
            ffn_mult: 4,
            max_len: 256,
            vocab_size: 16384,
        }
    }

    pub fn base() -> Self {
        Self::with_layers(8)
    }

    pub fn mid() -> Self {
        Self::with_layers(32)
    }

    pub fn large() -> Self {
        Self::with_layers(128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config(
                "text encoder needs at least one layer".into(),
            ));
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.num_heads
            )));
        }
        if self.max_len < 2 || self.vocab_size <= EOS_ID as usize || self.ffn_mult == 0 {
            return Err(Error::Config("text encoder sizes are too small".into()));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration, without instantiating it.
    pub fn param_count(&self) -> usize {
        let w = self.width;
        let f = self.ffn_mult * w;
        let per_layer = 2 * (2 * w) + 4 * (w * w + w) + (w * f + f) + (f * w + w);
        self.vocab_size * w + self.max_len * w + self.num_layers * per_layer + 2 * w
    }
}

/// Token ids and padding mask for a batch, as tensors.
#[derive(Clone, Debug)]
pub struct ConditioningBatch {
    /// `(B, L)` u32.
    pub token_ids: Tensor,
    /// `(B, L)` in the model dtype, 1 on non-PAD positions.
    pub pad_mask: Tensor,
}

impl ConditioningBatch {
    pub fn from_captions(
        captions: &[&TokenizedCaption],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let l = captions
            .first()
            .ok_or_else(|| Error::Empty("caption batch".into()))?
            .ids
            .len();
        if captions
            .iter()
            .any(|c| c.ids.len() != l || c.mask.len() != l)
        {
            return Err(Error::Shape(
                "captions in a batch must share a length".into(),
            ));
        }
        let ids: Vec<u32> = captions
            .iter()
            .flat_map(|c| c.ids.iter().copied())
            .collect();
        let mask: Vec<f32> = captions
            .iter()
            .flat_map(|c| c.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
            .collect();
        let b = captions.len();
        Ok(Self {
            token_ids: Tensor::from_vec(ids, (b, l), device)?,
            pad_mask: Tensor::from_vec(mask, (b, l), device)?.to_dtype(dtype)?,
        })
    }

    /// The empty caption `[BOS][EOS]` followed by padding, repeated `batch` times.
    pub fn null(batch: usize, max_len: usize, dtype: DType, device: &Device) -> Result<Self> {
        let caption = null_caption(max_len);
        Self::from_captions(&vec![&caption; batch], dtype, device)
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.dims()[0]
    }
}

pub fn null_caption(max_len: usize) -> TokenizedCaption {
    let mut ids = vec![PAD_ID; max_len];
    ids[0] = BOS_ID;
    ids[1] = EOS_ID;
    let mask = (0..max_len).map(|i| i < 2).collect();
    TokenizedCaption { ids, mask }
}

struct Layer {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

pub struct TextEncoder {
    config: TextEncoderConfig,
    tokens: Embedding,
    positions: Tensor,
    layers: Vec<Layer>,
    final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(config: &TextEncoderConfig, b: &ParamBuilder) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let f = config.ffn_mult * w;
        let layers = (0..config.num_layers)
            .map(|i| {
                let lb = b.pp(format!("layer.{i}"));
                Ok(Layer {
                    norm1: LayerNorm::new(&lb.pp("norm1"), w)?,
                    q: Linear::new(&lb.pp("attn.q"), w, w)?,
                    k: Linear::new(&lb.pp("attn.k"), w, w)?,
                    v: Linear::new(&lb.pp("attn.v"), w, w)?,
                    out: Linear::new(&lb.pp("attn.out"), w, w)?,
                    norm2: LayerNorm::new(&lb.pp("norm2"), w)?,
                    ff_in: Linear::new(&lb.pp("ff.in"), w, f)?,
                    ff_out: Linear::new(&lb.pp("ff.out"), f, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tokens: Embedding::new(&b.pp("token_embedding"), config.vocab_size, w)?,
            positions: b.normal("position_embedding", (config.max_len, w), 0.02)?,
            layers,
            final_norm: LayerNorm::new(&b.pp("final_norm"), w)?,
        })
    }

    /// Standalone encoder with its own parameter store.
    pub fn standalone(config: &TextEncoderConfig, store: &ParamStore, seed: u64) -> Result<Self> {
        Self::new(config, &ParamBuilder::new(store, seed))
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    /// `(B, L, width)` context. Every position attends only to non-PAD positions.
    pub fn encode(&self, batch: &ConditioningBatch) -> Result<Tensor> {
        let (b, l) = batch.token_ids.dims2()?;
        if l > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {l} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if batch.pad_mask.dims() != [b, l] {
            return Err(Error::Shape("pad mask must match token ids".into()));
        }
        let max_id = batch.token_ids.max_all()?.to_scalar::<u32>()?;
        if max_id as usize >= self.config.vocab_size {
            return Err(Error::Invalid(format!(
                "token id {max_id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let mut x = self
            .tokens
            .forward(&batch.token_ids)?
            .broadcast_add(&self.positions.narrow(0, 0, l)?)?;
        for layer in &self.layers {
            let h = layer.norm1.forward(&x)?;
            let a = attention(
                &layer.q.forward(&h)?,
                &layer.k.forward(&h)?,
                &layer.v.forward(&h)?,
                Some(&batch.pad_mask),
                self.config.num_heads,
            )?;
            x = (x + layer.out.forward(&a)?)?;
            let h = layer.norm2.forward(&x)?;
            x = (&x
                + layer
                    .ff_out
                    .forward(&layer.ff_in.forward(&h)?.gelu_erf()?)?)?;
        }
        Ok(self.final_norm.forward(&x)?)
    }

    /// Context of the empty caption, used as the unconditional branch of guidance.
    pub fn null_conditioning(&self, batch: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        self.encode(&ConditioningBatch::null(
            batch,
            self.config.max_len,
            dtype,
            device,
        )?)
    }
}
