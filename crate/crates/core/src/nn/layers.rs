use candle_core::{DType, Module, Tensor, D};

use super::ParamBuilder;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::build(b, in_dim, out_dim, true)
    }

    pub fn no_bias(b: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::build(b, in_dim, out_dim, false)
    }

    fn build(b: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = b.uniform("weight", (out_dim, in_dim), bound)?;
        let bias = if bias {
            Some(b.uniform("bias", out_dim, bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = b.uniform("weight", (out_ch, in_ch, kernel, kernel), bound)?;
        let bias = Some(b.uniform("bias", out_ch, bound)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Wraps fixed (non-parameter) weights.
    pub fn from_weights(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            weight: b.constant("weight", channels, 1.0)?,
            bias: b.constant("bias", channels, 0.0)?,
            eps: 1e-6,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.constant("weight", dim, 1.0)?,
            bias: b.constant("bias", dim, 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(b: &ParamBuilder, count: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.normal("weight", (count, dim), 0.02)?,
        })
    }

    /// Looks up `(B, L)` u32 ids, returning `(B, L, dim)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let flat = self.table.index_select(&ids.flatten_all()?, 0)?;
        Ok(flat.reshape((b, l, self.table.dim(1)?))?)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Multi-head scaled dot-product attention.
///
/// `q`: `(B, Lq, C)`, `k`/`v`: `(B, Lk, C)`, `key_mask`: optional `(B, Lk)` with 1 on keys that
/// may be attended. Queries with no attendable key receive a zero output.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<Tensor> {
    let (b, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "width {c} not divisible by {heads} heads"
        )));
    }
    let hd = c / heads;
    let split = |t: &Tensor, l: usize| -> candle_core::Result<Tensor> {
        t.reshape((b, l, heads, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * heads, l, hd))
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (qh.matmul(&kh.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let weights = match key_mask {
        None => softmax_last(&scores)?,
        Some(mask) => {
            let m = mask
                .to_dtype(scores.dtype())?
                .unsqueeze(1)?
                .unsqueeze(1)?
                .broadcast_as((b, heads, 1, lk))?
                .reshape((b * heads, 1, lk))?;
            let penalty = ((&m - 1.0)? * 1e9)?;
            softmax_last(&scores.broadcast_add(&penalty)?)?.broadcast_mul(&m)?
        }
    };
    let out = weights.matmul(&vh)?;
    Ok(out
        .reshape((b, heads, lq, hd))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, lq, c))?)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(
    timesteps: &[usize],
    dim: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.cos();
            row[half + i] = arg.sin();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}
