//! Epsilon-prediction UNet over the latent grid.
//!
//! Three resolutions (full, 1/2, 1/4 of the latent grid). Self-attention runs
//! at the lowest resolution and cross-attention to the text sequence at the
//! two lowest. The timestep embedding is sinusoidal; the three-channel variant
//! adds a separate embedding of the augmentation level to it.

use candle_core::{Module, Tensor};
use candle_nn::{group_norm, linear, Conv2d, GroupNorm, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv3x3, sinusoidal_embedding, ResBlock, SpatialAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub cond_channels: usize,
    /// Channel widths at the three resolutions.
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub context_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub aug_embedding: bool,
}

impl UNetConfig {
    pub fn desk(latent_channels: usize, cond_channels: usize, context_dim: usize, aug_embedding: bool) -> Self {
        Self {
            latent_channels,
            cond_channels,
            widths: [32, 64, 64],
            emb_dim: 64,
            context_dim,
            heads: 4,
            groups: 8,
            aug_embedding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.latent_channels + self.cond_channels
    }

    fn validate(&self) -> Result<()> {
        let ok = self.latent_channels > 0
            && self.widths.iter().all(|&w| w > 0 && w % self.groups == 0 && w % self.heads == 0)
            && self.emb_dim >= 2
            && self.context_dim > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid denoiser shape {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
struct EmbeddingMlp {
    fc1: Linear,
    fc2: Linear,
    freq_dim: usize,
}

impl EmbeddingMlp {
    fn new(freq_dim: usize, emb_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            fc1: linear(freq_dim, emb_dim, vb.pp("fc1"))?,
            fc2: linear(emb_dim, emb_dim, vb.pp("fc2"))?,
            freq_dim,
        })
    }

    fn forward(&self, values: &[f64], like: &Tensor) -> candle_core::Result<Tensor> {
        let e = sinusoidal_embedding(values, self.freq_dim, like.device())?.to_dtype(like.dtype())?;
        self.fc2.forward(&self.fc1.forward(&e)?.silu()?)
    }
}

#[derive(Debug, Clone)]
struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    time_mlp: EmbeddingMlp,
    aug_mlp: Option<EmbeddingMlp>,
    conv_in: Conv2d,
    down0: ResBlock,
    pool0: Conv2d,
    down1: ResBlock,
    down1_cross: SpatialAttention,
    pool1: Conv2d,
    down2: ResBlock,
    down2_self: SpatialAttention,
    down2_cross: SpatialAttention,
    mid: ResBlock,
    up2: ResBlock,
    up2_cross: SpatialAttention,
    lift1: Upsample,
    up1: ResBlock,
    up1_cross: SpatialAttention,
    lift0: Upsample,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let [c0, c1, c2] = config.widths;
        let (e, g, ctx, heads) = (Some(config.emb_dim), config.groups, Some(config.context_dim), config.heads);
        let res = |cin, cout, name: &str| ResBlock::new(cin, cout, e, g, vb.pp(name));
        let cross = |c, name: &str| SpatialAttention::new(c, ctx, heads, g, vb.pp(name));
        Ok(Self {
            config,
            time_mlp: EmbeddingMlp::new(c0, config.emb_dim, vb.pp("time"))?,
            aug_mlp: config
                .aug_embedding
                .then(|| EmbeddingMlp::new(c0, config.emb_dim, vb.pp("aug")))
                .transpose()?,
            conv_in: conv3x3(config.in_channels(), c0, 1, vb.pp("conv_in"))?,
            down0: res(c0, c0, "down0")?,
            pool0: conv3x3(c0, c0, 2, vb.pp("pool0"))?,
            down1: res(c0, c1, "down1")?,
            down1_cross: cross(c1, "down1_cross")?,
            pool1: conv3x3(c1, c1, 2, vb.pp("pool1"))?,
            down2: res(c1, c2, "down2")?,
            down2_self: SpatialAttention::new(c2, None, heads, g, vb.pp("down2_self"))?,
            down2_cross: cross(c2, "down2_cross")?,
            mid: res(c2, c2, "mid")?,
            up2: res(2 * c2, c2, "up2")?,
            up2_cross: cross(c2, "up2_cross")?,
            lift1: Upsample {
                conv: conv3x3(c2, c2, 1, vb.pp("lift1"))?,
            },
            up1: res(c2 + c1, c1, "up1")?,
            up1_cross: cross(c1, "up1_cross")?,
            lift0: Upsample {
                conv: conv3x3(c1, c1, 1, vb.pp("lift0"))?,
            },
            up0: res(c1 + c0, c0, "up0")?,
            norm_out: group_norm(g, c0, 1e-5, vb.pp("norm_out"))?,
            conv_out: conv3x3(c0, config.latent_channels, 1, vb.pp("conv_out"))?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// `x`: `(B, c_z + k, h, w)`, `t`: one timestep per item, `context`:
    /// `(B, L, d_txt)`. Returns `(B, c_z, h, w)`.
    pub fn forward(&self, x: &Tensor, t: &[f64], aug: Option<&[f64]>, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.config.in_channels() {
            return Err(Error::shape(format!("{} input channels", self.config.in_channels()), c));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidInput(format!("latent grid {h}x{w} must be divisible by 4")));
        }
        if t.len() != b {
            return Err(Error::shape(format!("{b} timesteps"), t.len()));
        }
        let (cb, _, cd) = context.dims3()?;
        if cb != b || cd != self.config.context_dim {
            return Err(Error::shape((b, "L", self.config.context_dim), context.dims()));
        }
        let mut emb = self.time_mlp.forward(t, x)?;
        match (&self.aug_mlp, aug) {
            (Some(mlp), Some(levels)) if levels.len() == b => emb = (emb + mlp.forward(levels, x)?)?,
            (None, None) => {}
            (Some(_), _) => return Err(Error::InvalidInput("denoiser needs one aug_level per item".into())),
            (None, Some(_)) => return Err(Error::InvalidInput("this denoiser takes no aug_level".into())),
        }
        let emb = Some(&emb);
        let ctx = Some(context);

        let h0 = self.down0.forward(&self.conv_in.forward(x)?, emb)?;
        let h1 = self.down1.forward(&self.pool0.forward(&h0)?, emb)?;
        let h1 = self.down1_cross.forward(&h1, ctx)?;
        let h2 = self.down2.forward(&self.pool1.forward(&h1)?, emb)?;
        let h2 = self.down2_cross.forward(&self.down2_self.forward(&h2, None)?, ctx)?;

        let m = self.mid.forward(&h2, emb)?;
        let u2 = self.up2.forward(&Tensor::cat(&[&m, &h2], 1)?, emb)?;
        let u2 = self.up2_cross.forward(&u2, ctx)?;
        let u1 = self.up1.forward(&Tensor::cat(&[&self.lift1.forward(&u2)?, &h1], 1)?, emb)?;
        let u1 = self.up1_cross.forward(&u1, ctx)?;
        let u0 = self.up0.forward(&Tensor::cat(&[&self.lift0.forward(&u1)?, &h0], 1)?, emb)?;
        Ok(self.conv_out.forward(&self.norm_out.forward(&u0)?.silu()?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn output_drops_condition_channels() {
        let store = ParamStore::new(5);
        let cfg = UNetConfig {
            widths: [8, 8, 8],
            emb_dim: 8,
            heads: 2,
            groups: 4,
            ..UNetConfig::desk(4, 1, 6, false)
        };
        let net = UNet::new(cfg, store.var_builder(DType::F32, &Device::Cpu)).unwrap();
        let x = Tensor::ones((2, 5, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let ctx = Tensor::ones((2, 3, 6), DType::F32, &Device::Cpu).unwrap();
        let y = net.forward(&x, &[1.0, 7.0], None, &ctx).unwrap();
        assert_eq!(y.dims(), &[2, 4, 8, 8]);
        let bad = Tensor::ones((2, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&bad, &[1.0, 7.0], None, &ctx).is_err());
        assert!(net.forward(&x, &[1.0, 7.0], Some(&[0.0, 0.0]), &ctx).is_err());
    }
}
