use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{
    attention, timestep_embedding, Conv2d, GroupNorm, LayerNorm, Linear, ParamBuilder,
};
use crate::{Error, Result};

const FF_MULT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial side of the latent input.
    pub latent_size: usize,
    pub base_channels: usize,
    pub num_res_blocks: usize,
    /// Feature-map sides (not downsample factors) that carry attention blocks.
    pub attention_resolutions: Vec<usize>,
    pub channel_mult: Vec<usize>,
    pub dropout: f64,
    pub context_dim: usize,
    pub time_embed_dim: usize,
    pub num_heads: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 4,
            latent_size: 64,
            base_channels: 256,
            num_res_blocks: 3,
            attention_resolutions: vec![64, 32, 16],
            channel_mult: vec![1, 2, 4, 4],
            dropout: 0.0,
            context_dim: 512,
            time_embed_dim: 1024,
            num_heads: 8,
            norm_groups: 32,
        }
    }
}

impl UNetConfig {
    /// Feature-map side at each level of the downsampling chain.
    pub fn level_sizes(&self) -> Vec<usize> {
        (0..self.channel_mult.len())
            .map(|i| self.latent_size >> i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return bad("unet channel counts must be positive".into());
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult must be non-empty and positive".into());
        }
        let levels = self.channel_mult.len();
        if self.latent_size == 0 || self.latent_size % (1 << (levels - 1)) != 0 {
            return bad(format!(
                "latent_size {} must be divisible by {}",
                self.latent_size,
                1 << (levels - 1)
            ));
        }
        let sizes = self.level_sizes();
        if let Some(r) = self
            .attention_resolutions
            .iter()
            .find(|r| !sizes.contains(r))
        {
            return bad(format!(
                "attention resolution {r} is not one of the feature-map sizes {sizes:?}"
            ));
        }
        if self.dropout != 0.0 {
            return bad("only dropout = 0 is supported".into());
        }
        if self.base_channels % 2 != 0 {
            return bad("base_channels must be even for the sinusoidal embedding".into());
        }
        if self.context_dim == 0 || self.time_embed_dim == 0 {
            return bad("context_dim and time_embed_dim must be positive".into());
        }
        if self.num_heads == 0 || self.norm_groups == 0 {
            return bad("num_heads and norm_groups must be positive".into());
        }
        for &m in &self.channel_mult {
            let c = m * self.base_channels;
            if c % self.norm_groups != 0 || c % self.num_heads != 0 {
                return bad(format!(
                    "{c} channels not divisible by norm_groups {} and num_heads {}",
                    self.norm_groups, self.num_heads
                ));
            }
        }
        Ok(())
    }

    /// Parameter count computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let lin = |i: usize, o: usize| i * o + o;
        let ted = self.time_embed_dim;
        let res = |i: usize, o: usize| {
            2 * i
                + conv(i, o, 3)
                + lin(ted, o)
                + 2 * o
                + conv(o, o, 3)
                + if i != o { conv(i, o, 1) } else { 0 }
        };
        let attn = |c: usize| {
            let d = self.context_dim;
            2 * c
                + conv(c, c, 1)
                + 2 * c
                + 3 * c * c
                + lin(c, c)
                + 2 * c
                + c * c
                + 2 * d * c
                + lin(c, c)
                + 2 * c
                + lin(c, FF_MULT * c)
                + lin(FF_MULT * c, c)
                + conv(c, c, 1)
        };
        let base = self.base_channels;
        let sizes = self.level_sizes();
        let has_attn = |s: usize| self.attention_resolutions.contains(&s);
        let mut n = lin(base, ted) + lin(ted, ted) + conv(self.in_channels, base, 3);
        let mut ch = base;
        let mut skips = vec![ch];
        for (lvl, &m) in self.channel_mult.iter().enumerate() {
            for _ in 0..self.num_res_blocks {
                n += res(ch, m * base);
                ch = m * base;
                if has_attn(sizes[lvl]) {
                    n += attn(ch);
                }
                skips.push(ch);
            }
            if lvl + 1 < self.channel_mult.len() {
                n += conv(ch, ch, 3);
                skips.push(ch);
            }
        }
        n += 2 * res(ch, ch) + attn(ch);
        for (lvl, &m) in self.channel_mult.iter().enumerate().rev() {
            for i in 0..=self.num_res_blocks {
                let skip = skips.pop().unwrap_or(0);
                n += res(ch + skip, m * base);
                ch = m * base;
                if has_attn(sizes[lvl]) {
                    n += attn(ch);
                }
                if lvl > 0 && i == self.num_res_blocks {
                    n += conv(ch, ch, 3);
                }
            }
        }
        n + 2 * ch + conv(ch, self.out_channels, 3)
    }
}

struct TimeResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    fn new(b: &ParamBuilder, groups: usize, c_in: usize, c_out: usize, ted: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), groups, c_in)?,
            conv1: Conv2d::new(&b.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            time_proj: Linear::new(&b.pp("time_proj"), ted, c_out)?,
            norm2: GroupNorm::new(&b.pp("norm2"), groups, c_out)?,
            conv2: Conv2d::new(&b.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&b.pp("skip"), c_in, c_out, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self
            .time_proj
            .forward(&temb.silu()?)?
            .unsqueeze(2)?
            .unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Self-attention over spatial positions, then cross-attention into the text context, then a
/// feed-forward layer, all residual and wrapped in 1x1 projections.
struct AttentionBlock {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln_self: LayerNorm,
    self_qkv: [Linear; 3],
    self_out: Linear,
    ln_cross: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    proj_out: Conv2d,
    heads: usize,
}

impl AttentionBlock {
    fn new(
        b: &ParamBuilder,
        groups: usize,
        c: usize,
        context_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&b.pp("norm"), groups, c)?,
            proj_in: Conv2d::new(&b.pp("proj_in"), c, c, 1, 1, 0)?,
            ln_self: LayerNorm::new(&b.pp("ln_self"), c)?,
            self_qkv: [
                Linear::no_bias(&b.pp("self.q"), c, c)?,
                Linear::no_bias(&b.pp("self.k"), c, c)?,
                Linear::no_bias(&b.pp("self.v"), c, c)?,
            ],
            self_out: Linear::new(&b.pp("self.out"), c, c)?,
            ln_cross: LayerNorm::new(&b.pp("ln_cross"), c)?,
            cross_q: Linear::no_bias(&b.pp("cross.q"), c, c)?,
            cross_k: Linear::no_bias(&b.pp("cross.k"), context_dim, c)?,
            cross_v: Linear::no_bias(&b.pp("cross.v"), context_dim, c)?,
            cross_out: Linear::new(&b.pp("cross.out"), c, c)?,
            ln_ff: LayerNorm::new(&b.pp("ln_ff"), c)?,
            ff_in: Linear::new(&b.pp("ff.in"), c, FF_MULT * c)?,
            ff_out: Linear::new(&b.pp("ff.out"), FF_MULT * c, c)?,
            proj_out: Conv2d::new(&b.pp("proj_out"), c, c, 1, 1, 0)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = self
            .proj_in
            .forward(&self.norm.forward(x)?)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;

        let n = self.ln_self.forward(&t)?;
        let [q, k, v] = &self.self_qkv;
        let a = attention(
            &q.forward(&n)?,
            &k.forward(&n)?,
            &v.forward(&n)?,
            None,
            self.heads,
        )?;
        let t = (t + self.self_out.forward(&a)?)?;

        let n = self.ln_cross.forward(&t)?;
        let a = attention(
            &self.cross_q.forward(&n)?,
            &self.cross_k.forward(context)?,
            &self.cross_v.forward(context)?,
            Some(mask),
            self.heads,
        )?;
        let t = (&t + self.cross_out.forward(&a)?)?;

        let n = self.ln_ff.forward(&t)?;
        let t = (&t + self.ff_out.forward(&self.ff_in.forward(&n)?.gelu_erf()?)?)?;

        let t = t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + self.proj_out.forward(&t)?)?)
    }
}

struct Block {
    res: TimeResBlock,
    attn: Option<AttentionBlock>,
}

impl Block {
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, ctx, mask),
            None => Ok(h),
        }
    }
}

struct Level {
    blocks: Vec<Block>,
    resample: Option<Conv2d>,
}

/// Time- and text-conditioned noise predictor over latents.
pub struct UNet {
    config: UNetConfig,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid_in: TimeResBlock,
    mid_attn: AttentionBlock,
    mid_out: TimeResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: &UNetConfig, b: &ParamBuilder) -> Result<Self> {
        config.validate()?;
        let base = config.base_channels;
        let ted = config.time_embed_dim;
        let g = config.norm_groups;
        let sizes = config.level_sizes();
        let attn_at = |lvl: usize, pb: &ParamBuilder, c: usize| -> Result<Option<AttentionBlock>> {
            if config.attention_resolutions.contains(&sizes[lvl]) {
                Ok(Some(AttentionBlock::new(
                    pb,
                    g,
                    c,
                    config.context_dim,
                    config.num_heads,
                )?))
            } else {
                Ok(None)
            }
        };

        let mut ch = base;
        let mut skips = vec![ch];
        let mut down = Vec::new();
        for (lvl, &m) in config.channel_mult.iter().enumerate() {
            let lb = b.pp(format!("down.{lvl}"));
            let mut blocks = Vec::new();
            for i in 0..config.num_res_blocks {
                let bb = lb.pp(format!("block.{i}"));
                blocks.push(Block {
                    res: TimeResBlock::new(&bb.pp("res"), g, ch, m * base, ted)?,
                    attn: attn_at(lvl, &bb.pp("attn"), m * base)?,
                });
                ch = m * base;
                skips.push(ch);
            }
            let resample = if lvl + 1 < config.channel_mult.len() {
                skips.push(ch);
                Some(Conv2d::new(&lb.pp("downsample"), ch, ch, 3, 2, 1)?)
            } else {
                None
            };
            down.push(Level { blocks, resample });
        }

        let mid = b.pp("mid");
        let mid_in = TimeResBlock::new(&mid.pp("res_in"), g, ch, ch, ted)?;
        let mid_attn =
            AttentionBlock::new(&mid.pp("attn"), g, ch, config.context_dim, config.num_heads)?;
        let mid_out = TimeResBlock::new(&mid.pp("res_out"), g, ch, ch, ted)?;

        let mut up = Vec::new();
        for (lvl, &m) in config.channel_mult.iter().enumerate().rev() {
            let lb = b.pp(format!("up.{lvl}"));
            let mut blocks = Vec::new();
            for i in 0..=config.num_res_blocks {
                let skip = skips.pop().expect("skip stack matches block count");
                let bb = lb.pp(format!("block.{i}"));
                blocks.push(Block {
                    res: TimeResBlock::new(&bb.pp("res"), g, ch + skip, m * base, ted)?,
                    attn: attn_at(lvl, &bb.pp("attn"), m * base)?,
                });
                ch = m * base;
            }
            let resample = if lvl > 0 {
                Some(Conv2d::new(&lb.pp("upsample"), ch, ch, 3, 1, 1)?)
            } else {
                None
            };
            up.push(Level { blocks, resample });
        }

        Ok(Self {
            config: config.clone(),
            time_in: Linear::new(&b.pp("time.in"), base, ted)?,
            time_out: Linear::new(&b.pp("time.out"), ted, ted)?,
            conv_in: Conv2d::new(&b.pp("conv_in"), config.in_channels, base, 3, 1, 1)?,
            down,
            mid_in,
            mid_attn,
            mid_out,
            up,
            norm_out: GroupNorm::new(&b.pp("norm_out"), g, ch)?,
            conv_out: Conv2d::new(&b.pp("conv_out"), ch, config.out_channels, 3, 1, 1)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Predicts the noise in `x_t` (`(B, C, S, S)`) given one timestep per row and a
    /// `(B, L, context_dim)` context with its `(B, L)` key mask.
    pub fn forward(
        &self,
        x: &Tensor,
        timesteps: &[usize],
        context: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.config.latent_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "expected ({}, {s}, {s}) latents, got ({c}, {h}, {w})",
                self.config.in_channels
            )));
        }
        if timesteps.len() != b {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {b}",
                timesteps.len()
            )));
        }
        let (cb, cl, cd) = context.dims3()?;
        if cd != self.config.context_dim {
            return Err(Error::Shape(format!(
                "context width {cd} does not match context_dim {}",
                self.config.context_dim
            )));
        }
        if cb != b || mask.dims() != [cb, cl] {
            return Err(Error::Shape(
                "context and mask must match the latent batch".into(),
            ));
        }

        let temb = timestep_embedding(timesteps, self.config.base_channels, x.dtype(), x.device())?;
        let temb = self
            .time_out
            .forward(&self.time_in.forward(&temb)?.silu()?)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for level in &self.down {
            for block in &level.blocks {
                h = block.forward(&h, &temb, context, mask)?;
                skips.push(h.clone());
            }
            if let Some(down) = &level.resample {
                h = down.forward(&h)?;
                skips.push(h.clone());
            }
        }
        h = self.mid_in.forward(&h, &temb)?;
        h = self.mid_attn.forward(&h, context, mask)?;
        h = self.mid_out.forward(&h, &temb)?;
        for level in &self.up {
            for block in &level.blocks {
                let skip = skips.pop().expect("skip stack matches block count");
                h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, context, mask)?;
            }
            if let Some(up) = &level.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = up.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::SeedStream;
    use candle_core::{DType, Device};

    pub(crate) fn small() -> UNetConfig {
        UNetConfig {
            latent_size: 8,
            base_channels: 8,
            num_res_blocks: 1,
            attention_resolutions: vec![4],
            channel_mult: vec![1, 2],
            context_dim: 6,
            time_embed_dim: 16,
            num_heads: 2,
            norm_groups: 4,
            ..UNetConfig::default()
        }
    }

    fn build(config: &UNetConfig, seed: u64) -> (ParamStore, UNet) {
        let store = ParamStore::new(DType::F64, &Device::Cpu);
        let net = UNet::new(config, &ParamBuilder::new(&store, seed)).unwrap();
        (store, net)
    }

    fn inputs(config: &UNetConfig, b: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let dev = Device::Cpu;
        let mut rng = SeedStream::new(seed);
        let s = config.latent_size;
        let x = rng
            .normal_tensor((b, config.in_channels, s, s), DType::F64, &dev)
            .unwrap();
        let ctx = rng
            .normal_tensor((b, 5, config.context_dim), DType::F64, &dev)
            .unwrap();
        let mask = Tensor::ones((b, 5), DType::F64, &dev).unwrap();
        (x, ctx, mask)
    }

    fn gap(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
            .sqrt()
    }

    #[test]
    fn default_config_is_the_base_architecture() {
        let c = UNetConfig::default();
        assert_eq!((c.latent_size, c.in_channels, c.out_channels), (64, 4, 4));
        assert_eq!(c.base_channels, 256);
        assert_eq!(c.num_res_blocks, 3);
        assert_eq!(c.attention_resolutions, [64, 32, 16]);
        assert_eq!(c.channel_mult, [1, 2, 4, 4]);
        assert_eq!(c.dropout, 0.0);
        assert_eq!(c.context_dim, 512);
        c.validate().unwrap();
        assert_eq!(c.level_sizes(), [64, 32, 16, 8]);
    }

    #[test]
    fn analytic_param_count_matches_instantiation() {
        for config in [
            small(),
            UNetConfig {
                attention_resolutions: vec![8, 4],
                num_res_blocks: 2,
                ..small()
            },
        ] {
            let (store, _) = build(&config, 1);
            assert_eq!(store.num_params(), config.param_count());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_attn = UNetConfig {
            attention_resolutions: vec![3],
            ..small()
        };
        assert!(bad_attn.validate().is_err());
        let bad_groups = UNetConfig {
            norm_groups: 3,
            ..small()
        };
        assert!(bad_groups.validate().is_err());
        let bad_size = UNetConfig {
            latent_size: 7,
            ..small()
        };
        assert!(bad_size.validate().is_err());
    }

    #[test]
    fn output_shape_matches_input_and_is_deterministic() {
        let config = small();
        let (_, net) = build(&config, 3);
        let (x, ctx, mask) = inputs(&config, 2, 4);
        let a = net.forward(&x, &[10, 900], &ctx, &mask).unwrap();
        let b = net.forward(&x, &[10, 900], &ctx, &mask).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert_eq!(gap(&a, &b), 0.0);
    }

    #[test]
    fn sixty_four_side_latent_keeps_its_shape() {
        // narrow network with the full-size latent and attention at 64x64
        let config = UNetConfig {
            base_channels: 4,
            num_res_blocks: 1,
            attention_resolutions: vec![64, 32, 16],
            context_dim: 8,
            time_embed_dim: 8,
            num_heads: 1,
            norm_groups: 4,
            ..UNetConfig::default()
        };
        let store = ParamStore::new(DType::F32, &Device::Cpu);
        let net = UNet::new(&config, &ParamBuilder::new(&store, 0)).unwrap();
        let dev = Device::Cpu;
        let x = SeedStream::new(1)
            .normal_tensor((1, 4, 64, 64), DType::F32, &dev)
            .unwrap();
        let ctx = Tensor::zeros((1, 3, 8), DType::F32, &dev).unwrap();
        let mask = Tensor::ones((1, 3), DType::F32, &dev).unwrap();
        let y = net.forward(&x, &[500], &ctx, &mask).unwrap();
        assert_eq!(y.dims(), [1, 4, 64, 64]);
    }

    #[test]
    fn context_is_live_and_masked_context_is_inert() {
        let config = small();
        let (_, net) = build(&config, 5);
        let (x, ctx_a, mask) = inputs(&config, 1, 6);
        let (_, ctx_b, _) = inputs(&config, 1, 7);
        let ya = net.forward(&x, &[300], &ctx_a, &mask).unwrap();
        let yb = net.forward(&x, &[300], &ctx_b, &mask).unwrap();
        assert!(gap(&ya, &yb) > 0.0);

        let off = mask.zeros_like().unwrap();
        let za = net.forward(&x, &[300], &ctx_a, &off).unwrap();
        let zb = net.forward(&x, &[300], &ctx_b, &off).unwrap();
        let zero_ctx = ctx_a.zeros_like().unwrap();
        let zz = net.forward(&x, &[300], &zero_ctx, &off).unwrap();
        assert_eq!(gap(&za, &zb), 0.0);
        assert_eq!(gap(&za, &zz), 0.0);
    }

    #[test]
    fn timestep_changes_prediction() {
        let config = small();
        let (_, net) = build(&config, 8);
        let (x, ctx, mask) = inputs(&config, 1, 9);
        let a = net.forward(&x, &[1], &ctx, &mask).unwrap();
        let b = net.forward(&x, &[999], &ctx, &mask).unwrap();
        assert!(gap(&a, &b) > 0.0);
    }

    #[test]
    fn wrong_context_width_and_latent_size_are_errors() {
        let config = small();
        let (_, net) = build(&config, 10);
        let (x, ctx, mask) = inputs(&config, 1, 11);
        let wide = Tensor::zeros((1, 5, 7), DType::F64, &Device::Cpu).unwrap();
        assert!(net.forward(&x, &[0], &wide, &mask).is_err());
        let big = Tensor::zeros((1, 4, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(net.forward(&big, &[0], &ctx, &mask).is_err());
        assert!(net.forward(&x, &[0, 1], &ctx, &mask).is_err());
    }
}
