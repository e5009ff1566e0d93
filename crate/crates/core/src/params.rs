//! Seeded parameter storage and the random-number plumbing shared by
//! training and sampling.
//!
//! Layers are built through a [`ParamStore`]: each variable is initialized
//! from a stream keyed by `(seed, name)`, independent of construction order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut impl Rng, shape: impl Into<Shape>, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f32> = (0..shape.elem_count())
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Named trainable variables with deterministic initialization.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
        }
    }

    /// Pre-populates the store so that building a model picks up saved values.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let store = Self::new(0);
        {
            let mut map = store.inner.lock().unwrap();
            for (name, t) in tensors {
                map.insert(name, Var::from_tensor(&t)?);
            }
        }
        Ok(store)
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// Variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.inner.lock().unwrap().values().cloned().collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.inner
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parameter_count(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for d in t.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex(&hasher.finalize()))
    }

    fn init_tensor(&self, name: &str, shape: &Shape, init: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut rng = seeded_rng(self.seed ^ fnv1a(name));
        let n = shape.elem_count();
        let sample_uniform = |rng: &mut SeededRng, lo: f64, up: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..up)).collect()
        };
        let sample_normal = |rng: &mut SeededRng, mean: f64, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let values = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => sample_uniform(&mut rng, lo, up),
            Init::Randn { mean, stdev } => sample_normal(&mut rng, mean, stdev),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        sample_uniform(&mut rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => sample_normal(&mut rng, 0.0, std),
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)?)
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut map = self.inner.lock().unwrap();
        if let Some(v) = map.get(name) {
            if v.shape() != &s {
                candle_core::bail!(
                    "parameter {name}: stored shape {:?} does not match requested {:?}",
                    v.shape(),
                    s
                );
            }
            if v.dtype() != dtype {
                let converted = Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?;
                map.insert(name.to_string(), converted.clone());
                return Ok(converted.as_tensor().clone());
            }
            return Ok(v.as_tensor().clone());
        }
        let t = self
            .init_tensor(name, &s, h, dtype, dev)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let var = Var::from_tensor(&t)?;
        map.insert(name.to_string(), var.clone());
        Ok(var.as_tensor().clone())
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.inner.lock().unwrap().get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("missing parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.lock().unwrap().contains_key(name)
    }
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Checks that a freshly loaded store covers exactly the parameters a model
/// asked for; extra or missing entries mean the checkpoint and config disagree.
pub(crate) fn expect_count(store: &ParamStore, expected: usize, what: &str) -> Result<()> {
    if store.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{what}: checkpoint holds {} tensors, model uses {expected}",
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_seeded_and_order_independent() {
        let dev = Device::Cpu;
        let build = |order: &[&str]| {
            let store = ParamStore::new(7);
            let vb = store.var_builder(DType::F32, &dev);
            for name in order {
                vb.get_with_hints((3, 4), name, candle_nn::init::DEFAULT_KAIMING_NORMAL)
                    .unwrap();
            }
            store.fingerprint().unwrap()
        };
        assert_eq!(build(&["a", "b"]), build(&["b", "a"]));
        let other = ParamStore::new(8);
        other
            .var_builder(DType::F32, &dev)
            .get_with_hints((3, 4), "a", candle_nn::init::DEFAULT_KAIMING_NORMAL)
            .unwrap();
        assert_ne!(build(&["a"]), other.fingerprint().unwrap());
    }

    #[test]
    fn existing_values_are_reused() {
        let dev = Device::Cpu;
        let t = Tensor::ones((2, 2), DType::F32, &dev).unwrap();
        let store = ParamStore::from_tensors(vec![("w".into(), t)]).unwrap();
        let got = store
            .var_builder(DType::F32, &dev)
            .get_with_hints((2, 2), "w", candle_nn::init::ZERO)
            .unwrap();
        assert_eq!(got.sum_all().unwrap().to_scalar::<f32>().unwrap(), 4.0);
        assert!(store
            .var_builder(DType::F32, &dev)
            .get_with_hints((3, 2), "w", candle_nn::init::ZERO)
            .is_err());
    }
}
