use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use super::loss::AeLossWeights;
use crate::nn::{Conv2d, GroupNorm, ParamBuilder, ParamStore};
use crate::rng::SeedStream;
use crate::{Error, Result};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub input_resolution: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    pub num_res_blocks: usize,
    pub channel_mult: Vec<usize>,
    pub downsample_factor: usize,
    pub dropout: f64,
    pub norm_groups: usize,
    pub disc_channels: usize,
    pub loss: AeLossWeights,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_resolution: 512,
            embed_dim: 4,
            base_channels: 128,
            num_res_blocks: 2,
            channel_mult: vec![1, 2, 4, 4],
            downsample_factor: 8,
            dropout: 0.0,
            norm_groups: 32,
            disc_channels: 64,
            loss: AeLossWeights::default(),
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || 1usize << (levels - 1) != self.downsample_factor {
            return Err(Error::Config(format!(
                "channel_mult has {levels} levels, which does not give downsample factor {}",
                self.downsample_factor
            )));
        }
        if self.input_resolution % self.downsample_factor != 0 {
            return Err(Error::Config(format!(
                "input_resolution {} is not divisible by {}",
                self.input_resolution, self.downsample_factor
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("autoencoder dropout is not supported".into()));
        }
        if self.embed_dim == 0
            || self.base_channels == 0
            || self.disc_channels == 0
            || self.norm_groups == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for m in &self.channel_mult {
            if (self.base_channels * m) % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "norm_groups {} does not divide {} channels",
                    self.norm_groups,
                    self.base_channels * m
                )));
            }
        }
        self.loss.validate()
    }

    pub fn latent_resolution(&self) -> usize {
        self.input_resolution / self.downsample_factor
    }
}

/// Diagonal Gaussian over the latent grid. Tensors are `(B, embed_dim, h, w)`.
#[derive(Clone, Debug)]
pub struct LatentDistribution {
    mean: Tensor,
    logvar: Tensor,
}

impl LatentDistribution {
    /// Clamps `logvar` into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self> {
        if mean.dims() != logvar.dims() {
            return Err(Error::Shape("mean and logvar shapes differ".into()));
        }
        let logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(Self { mean, logvar })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn logvar(&self) -> &Tensor {
        &self.logvar
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok((&self.logvar * 0.5)?.exp()?)
    }

    /// Reparameterized draw `mean + std * eps`.
    pub fn sample_with(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + self.std()?.mul(eps)?)?)
    }

    pub fn sample(&self, rng: &mut SeedStream) -> Result<Tensor> {
        let eps = rng.normal_tensor(self.mean.shape(), self.mean.dtype(), self.mean.device())?;
        self.sample_with(&eps)
    }

    /// KL to the standard normal, averaged over every latent element.
    pub fn kl_divergence(&self) -> Result<Tensor> {
        let var = self.logvar.exp()?;
        let kl = ((self.mean.sqr()? + var)? - 1.0)?.sub(&self.logvar)?;
        Ok((kl.mean_all()? * 0.5)?)
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &ParamBuilder, groups: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), groups, c_in)?,
            conv1: Conv2d::new(&b.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            norm2: GroupNorm::new(&b.pp("norm2"), groups, c_out)?,
            conv2: Conv2d::new(&b.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&b.pp("skip"), c_in, c_out, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Stride-2 conv with (0, 1) padding on each spatial axis.
struct Downsample(Conv2d);

impl Downsample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.pad_with_zeros(2, 0, 1)?.pad_with_zeros(3, 0, 1)?;
        Ok(self.0.forward(&x)?)
    }
}

struct Upsample(Conv2d);

impl Upsample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.0.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}

struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(Vec<ResBlock>, Option<Downsample>)>,
    mid: [ResBlock; 2],
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

struct Decoder {
    conv_in: Conv2d,
    mid: [ResBlock; 2],
    levels: Vec<(Vec<ResBlock>, Option<Upsample>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamStore,
    encoder: Encoder,
    quant_conv: Conv2d,
    post_quant_conv: Conv2d,
    decoder: Decoder,
}

impl Autoencoder {
    pub fn new(config: &AutoencoderConfig, params: &ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let b = ParamBuilder::new(params, seed);
        let g = config.norm_groups;
        let ch = config.base_channels;
        let z = config.embed_dim;
        let levels = config.channel_mult.len();

        let eb = b.pp("encoder");
        let mut c = ch;
        let mut enc_levels = Vec::with_capacity(levels);
        for (i, m) in config.channel_mult.iter().enumerate() {
            let lb = eb.pp(format!("down.{i}"));
            let mut blocks = Vec::new();
            for j in 0..config.num_res_blocks {
                blocks.push(ResBlock::new(&lb.pp(format!("block.{j}")), g, c, ch * m)?);
                c = ch * m;
            }
            let down = if i + 1 < levels {
                Some(Downsample(Conv2d::new(
                    &lb.pp("downsample"),
                    c,
                    c,
                    3,
                    2,
                    0,
                )?))
            } else {
                None
            };
            enc_levels.push((blocks, down));
        }
        let encoder = Encoder {
            conv_in: Conv2d::new(&eb.pp("conv_in"), 3, ch, 3, 1, 1)?,
            levels: enc_levels,
            mid: [
                ResBlock::new(&eb.pp("mid.block_1"), g, c, c)?,
                ResBlock::new(&eb.pp("mid.block_2"), g, c, c)?,
            ],
            norm_out: GroupNorm::new(&eb.pp("norm_out"), g, c)?,
            conv_out: Conv2d::new(&eb.pp("conv_out"), c, 2 * z, 3, 1, 1)?,
        };

        let db = b.pp("decoder");
        let top = ch * config.channel_mult[levels - 1];
        let mut c = top;
        let mut dec_levels = Vec::with_capacity(levels);
        for (i, m) in config.channel_mult.iter().enumerate().rev() {
            let lb = db.pp(format!("up.{i}"));
            let mut blocks = Vec::new();
            for j in 0..=config.num_res_blocks {
                blocks.push(ResBlock::new(&lb.pp(format!("block.{j}")), g, c, ch * m)?);
                c = ch * m;
            }
            let up = if i > 0 {
                Some(Upsample(Conv2d::new(&lb.pp("upsample"), c, c, 3, 1, 1)?))
            } else {
                None
            };
            dec_levels.push((blocks, up));
        }
        let decoder = Decoder {
            conv_in: Conv2d::new(&db.pp("conv_in"), z, top, 3, 1, 1)?,
            mid: [
                ResBlock::new(&db.pp("mid.block_1"), g, top, top)?,
                ResBlock::new(&db.pp("mid.block_2"), g, top, top)?,
            ],
            levels: dec_levels,
            norm_out: GroupNorm::new(&db.pp("norm_out"), g, c)?,
            conv_out: Conv2d::new(&db.pp("conv_out"), c, 3, 3, 1, 1)?,
        };

        Ok(Self {
            config: config.clone(),
            params: params.clone(),
            encoder,
            quant_conv: Conv2d::new(&b.pp("quant_conv"), 2 * z, 2 * z, 1, 1, 0)?,
            post_quant_conv: Conv2d::new(&b.pp("post_quant_conv"), z, z, 1, 1, 0)?,
            decoder,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Name of the decoder's final convolution weight, used for the adaptive GAN weight.
    pub const LAST_LAYER: &'static str = "decoder.conv_out.weight";

    /// `images`: `(B, 3, S, S)` in `[0, 1]`.
    pub fn encode(&self, images: &Tensor) -> Result<LatentDistribution> {
        let (_, c, h, w) = images.dims4()?;
        let f = self.config.downsample_factor;
        if c != 3 || h != w || h % f != 0 {
            return Err(Error::Shape(format!(
                "encoder expects square 3-channel images with side divisible by {f}, got {:?}",
                images.dims()
            )));
        }
        let enc = &self.encoder;
        let mut x = enc.conv_in.forward(&((images * 2.0)? - 1.0)?)?;
        for (blocks, down) in &enc.levels {
            for blk in blocks {
                x = blk.forward(&x)?;
            }
            if let Some(d) = down {
                x = d.forward(&x)?;
            }
        }
        for blk in &enc.mid {
            x = blk.forward(&x)?;
        }
        let x = enc.conv_out.forward(&enc.norm_out.forward(&x)?.silu()?)?;
        let moments = self.quant_conv.forward(&x)?;
        let z = self.config.embed_dim;
        LatentDistribution::new(moments.narrow(1, 0, z)?, moments.narrow(1, z, z)?)
    }

    /// Latents `(B, embed_dim, h, w)` to images `(B, 3, h*f, w*f)`. Outputs are in pixel units
    /// (nominally `[0, 1]`) but not clamped; clamping happens when converting to [`crate::imaging::Image`].
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {c}",
                self.config.embed_dim
            )));
        }
        let dec = &self.decoder;
        let mut x = dec
            .conv_in
            .forward(&self.post_quant_conv.forward(latents)?)?;
        for blk in &dec.mid {
            x = blk.forward(&x)?;
        }
        for (blocks, up) in &dec.levels {
            for blk in blocks {
                x = blk.forward(&x)?;
            }
            if let Some(u) = up {
                x = u.forward(&x)?;
            }
        }
        let x = dec.conv_out.forward(&dec.norm_out.forward(&x)?.silu()?)?;
        Ok(((x + 1.0)? * 0.5)?)
    }
}
