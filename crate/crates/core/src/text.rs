//! Word vocabulary and a toy text encoder with a learned null condition.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, sinusoidal_embedding};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const NULL: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<null>"];
const VOCAB_HEADER: &str = "#s2p-vocab v1";

/// Lowercased words; anything other than letters, digits, `-` and `'`
/// separates words, and stray hyphens/apostrophes at word ends are dropped.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|w| w.trim_matches(|c| c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidInput("vocabulary must start with the special tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Header line followed by one token per line in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::InvalidInput("missing vocabulary header".into()));
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }

    /// Hex SHA-256 of the serialized form.
    pub fn checksum(&self) -> String {
        crate::params::hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Keeps the `max_size` most frequent words (ties lexicographic) after the
/// three specials.
pub fn build_vocab<S: AsRef<str>>(captions: &[S], max_size: usize) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for w in words(c.as_ref()) {
            if !SPECIALS.contains(&w.as_str()) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(max_size).map(|(w, _)| w))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Exactly `len` ids: unknown words map to [`UNK`], the tail is [`PAD`].
pub fn tokenize(text: &str, vocab: &Vocabulary, len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = words(text)
        .iter()
        .take(len)
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect();
    ids.resize(len, PAD);
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub seq_len: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            width: 64,
            heads: 4,
        }
    }
}

/// Layer norm over the last dimension built from differentiable primitives.
#[derive(Debug, Clone)]
struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Token embeddings plus sinusoidal positions, then one pre-norm
/// transformer block. The null condition is a separate learned table.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    vocab_size: usize,
    tokens: Tensor,
    positions: Tensor,
    null: Tensor,
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, vocab_size: usize, vb: VarBuilder) -> Result<Self> {
        let TextEncoderConfig { seq_len, width, heads } = config;
        if seq_len == 0 || width == 0 || heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "invalid text encoder shape: L={seq_len}, d={width}, heads={heads}"
            )));
        }
        let init = candle_nn::Init::Randn {
            mean: 0.0,
            stdev: 0.5,
        };
        let positions = sinusoidal_embedding(
            &(0..seq_len).map(|i| i as f64).collect::<Vec<_>>(),
            width,
            vb.device(),
        )?
        .to_dtype(vb.dtype())?;
        Ok(Self {
            config,
            vocab_size,
            tokens: vb.get_with_hints((vocab_size, width), "tokens", init)?,
            positions,
            null: vb.get_with_hints((seq_len, width), "null", init)?,
            norm1: Norm::new(width, vb.pp("norm1"))?,
            qkv: linear(width, 3 * width, vb.pp("qkv"))?,
            proj: linear(width, width, vb.pp("proj"))?,
            norm2: Norm::new(width, vb.pp("norm2"))?,
            fc1: linear(width, 2 * width, vb.pp("fc1"))?,
            fc2: linear(2 * width, width, vb.pp("fc2"))?,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        self.tokens.device()
    }

    /// `(B, L)` ids → `(B, L, d)`.
    pub fn embed_batch(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let l = self.config.seq_len;
        let mut flat = Vec::with_capacity(ids.len() * l);
        for seq in ids {
            if seq.len() != l {
                return Err(Error::shape(format!("{l} token ids"), seq.len()));
            }
            if let Some(bad) = seq.iter().find(|&&i| i as usize >= self.vocab_size) {
                return Err(Error::InvalidInput(format!(
                    "token id {bad} out of range for vocabulary of {}",
                    self.vocab_size
                )));
            }
            flat.extend_from_slice(seq);
        }
        let idx = Tensor::from_vec(flat, ids.len() * l, self.device())?;
        let x = self
            .tokens
            .index_select(&idx, 0)?
            .reshape((ids.len(), l, self.config.width))?
            .broadcast_add(&self.positions)?;
        Ok(self.block(&x)?)
    }

    pub fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        Ok(self.embed_batch(&[ids.to_vec()])?.squeeze(0)?)
    }

    /// The `(L, d)` null condition.
    pub fn null_embedding(&self) -> Tensor {
        self.null.clone()
    }

    fn block(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let d = self.config.width;
        let h = self.qkv.forward(&self.norm1.forward(x)?)?;
        let (q, k, v) = (h.narrow(2, 0, d)?, h.narrow(2, d, d)?, h.narrow(2, 2 * d, d)?);
        let x = (x + self.proj.forward(&multi_head_attention(&q, &k, &v, self.config.heads)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        x + h
    }
}
