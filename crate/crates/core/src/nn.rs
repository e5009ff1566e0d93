//! Layers shared by the autoencoder, the text encoder and the denoiser.

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{conv2d, group_norm, linear, linear_no_bias, Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder};

pub(crate) fn conv3x3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    conv2d(cin, cout, 3, cfg, vb)
}

pub(crate) fn conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(cin, cout, 1, Conv2dConfig::default(), vb)
}

/// Sinusoidal embedding of scalar positions, `(N, dim)` with sines first.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize, device: &Device) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f32>, Vec<f32>) = freqs
            .map(|f| ((p * f).sin() as f32, (p * f).cos() as f32))
            .unzip();
        data.extend(sin);
        data.extend(cos);
        data.extend(std::iter::repeat_n(0f32, dim - 2 * half));
    }
    Tensor::from_vec(data, (positions.len(), dim), device)
}

/// GroupNorm → SiLU → conv → (+ projected embedding) → GroupNorm → SiLU →
/// conv, with a 1×1 projection on the skip path when widths differ.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    emb_proj: Option<Linear>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        groups: usize,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: group_norm(groups, cin, 1e-5, vb.pp("norm1"))?,
            conv1: conv3x3(cin, cout, 1, vb.pp("conv1"))?,
            norm2: group_norm(groups, cout, 1e-5, vb.pp("norm2"))?,
            conv2: conv3x3(cout, cout, 1, vb.pp("conv2"))?,
            emb_proj: emb_dim
                .map(|d| linear(d, cout, vb.pp("emb_proj")))
                .transpose()?,
            skip: (cin != cout)
                .then(|| conv1x1(cin, cout, vb.pp("skip")))
                .transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(emb)) = (&self.emb_proj, emb) {
            let e = proj.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&e)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        h + skip
    }
}

/// Multi-head attention over the spatial positions of a feature map, either
/// to itself or to an external context sequence; residual output.
#[derive(Debug, Clone)]
pub(crate) struct SpatialAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SpatialAttention {
    pub fn new(
        channels: usize,
        context_dim: Option<usize>,
        heads: usize,
        groups: usize,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        let kv_dim = context_dim.unwrap_or(channels);
        if channels % heads != 0 {
            candle_core::bail!("{channels} channels cannot be split into {heads} heads");
        }
        Ok(Self {
            norm: group_norm(groups, channels, 1e-5, vb.pp("norm"))?,
            q: linear_no_bias(channels, channels, vb.pp("q"))?,
            k: linear_no_bias(kv_dim, channels, vb.pp("k"))?,
            v: linear_no_bias(kv_dim, channels, vb.pp("v"))?,
            out: linear(channels, channels, vb.pp("out"))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .flatten_from(2)?
            .transpose(1, 2)?
            .contiguous()?;
        let ctx = context.unwrap_or(&tokens);
        let attended = multi_head_attention(
            &self.q.forward(&tokens)?,
            &self.k.forward(ctx)?,
            &self.v.forward(ctx)?,
            self.heads,
        )?;
        let out = self
            .out
            .forward(&attended)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        x + out
    }
}

/// Scaled dot-product attention; inputs `(B, L, C)` with `C` split into heads.
pub(crate) fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> candle_core::Result<Tensor> {
    let (b, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    let hd = c / heads;
    let split = |t: &Tensor, l: usize| -> candle_core::Result<Tensor> {
        t.reshape((b, l, heads, hd))?.transpose(1, 2)?.contiguous()
    };
    let (q, k, v) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    weights
        .matmul(&v)?
        .transpose(1, 2)?
        .reshape((b, lq, c))
}
