//! Thin layer over candle: deterministic parameter stores, optimizers and the
//! small networks used throughout (encoders, MLPs).
//!
//! candle's own initializers draw from an unseedable CPU RNG, so every
//! trainable network here is built through [`Params`], which overwrites the
//! freshly created variables from a ChaCha stream in sorted-name order.

mod encoders;
mod optim;

pub use encoders::{ConvEncoder, Encoder, EncoderKind, MlpEncoder, ResNetEncoder};
pub use optim::{adam, cosine_lr, SgdMomentum};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::seed;

/// Initial value rule for a single parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

/// PyTorch-style defaults: `U(±1/sqrt(fan_in))` for weights, zero biases,
/// unit scale and variance for normalization layers.
pub fn default_init(name: &str, shape: &[usize]) -> Init {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match (leaf, shape.len()) {
        ("running_var", _) => Init::Const(1.0),
        ("running_mean", _) => Init::Const(0.0),
        ("weight", 1) => Init::Const(1.0),
        ("weight", _) => {
            let fan_in: usize = shape[1..].iter().product();
            Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
        }
        _ => Init::Const(0.0),
    }
}

/// A named set of trainable variables.
pub struct Params {
    map: VarMap,
    device: Device,
}

impl Params {
    pub fn new(device: &Device) -> Self {
        Self { map: VarMap::new(), device: device.clone() }
    }

    pub fn vb(&self) -> VarBuilder<'static> {
        VarBuilder::from_varmap(&self.map, DType::F32, &self.device)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var_map(&self) -> &VarMap {
        &self.map
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.map.data().lock().expect("var map poisoned").get(name).cloned()
    }

    fn sorted(&self) -> Vec<(String, Var)> {
        let data = self.map.data().lock().expect("var map poisoned");
        let mut v: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Re-initialize every variable from `seed` using `rule`.
    pub fn init_with(&self, seed: u64, rule: impl Fn(&str, &[usize]) -> Init) -> Result<()> {
        let mut rng = seed::rng(seed);
        for (name, var) in self.sorted() {
            let shape = var.dims().to_vec();
            let n: usize = shape.iter().product();
            let values: Vec<f32> = match rule(&name, &shape) {
                Init::Const(c) => vec![c as f32; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b) as f32).collect(),
                Init::Normal(s) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * s) as f32
                    })
                    .collect(),
            };
            var.set(&Tensor::from_vec(values, shape, &self.device)?)?;
        }
        Ok(())
    }

    pub fn init(&self, seed: u64) -> Result<()> {
        self.init_with(seed, default_init)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.sorted().into_iter().map(|(_, v)| v).collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_under(&self, prefix: &str) -> Vec<Var> {
        self.sorted().into_iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v).collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.sorted().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect()
    }

    /// Hex SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> Result<String> {
        digest_tensors(&self.tensors())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Copy values from a safetensors file into existing variables.
    pub fn load_into(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.sorted() {
            let t = loaded
                .get(&name)
                .ok_or_else(|| crate::Error::Schema(format!("{}: missing tensor `{name}`", path.display())))?;
            var.set(t)?;
        }
        Ok(())
    }
}

pub fn digest_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Load a safetensors file as frozen (non-trainable) weights.
pub fn frozen_vb(path: &Path, device: &Device) -> Result<VarBuilder<'static>> {
    let map = candle_core::safetensors::load(path, device)?;
    Ok(VarBuilder::from_tensors(map, DType::F32, device))
}

/// Copy of the current values, detached from any variable.
pub fn snapshot(params: &Params) -> Result<BTreeMap<String, Tensor>> {
    params.tensors().into_iter().map(|(k, t)| Ok((k, t.copy()?.detach()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_digest_tracks_values() -> Result<()> {
        let build = |seed| -> Result<String> {
            let p = Params::new(&Device::Cpu);
            let _ = candle_nn::linear(4, 3, p.vb().pp("a"))?;
            let _ = candle_nn::linear(3, 2, p.vb().pp("b"))?;
            p.init(seed)?;
            p.digest()
        };
        assert_eq!(build(1)?, build(1)?);
        assert_ne!(build(1)?, build(2)?);
        Ok(())
    }

    #[test]
    fn default_rule_matches_layer_roles() {
        assert_eq!(default_init("bn.running_var", &[4]), Init::Const(1.0));
        assert_eq!(default_init("bn.weight", &[4]), Init::Const(1.0));
        assert_eq!(default_init("fc.bias", &[4]), Init::Const(0.0));
        assert_eq!(default_init("fc.weight", &[2, 16]), Init::Uniform(0.25));
    }
}
