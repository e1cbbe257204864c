//! Name-indexed parameter store with per-tensor trainable flags.
//!
//! Every parameter is a [`Var`] registered under a slash-separated name
//! ("unet/enc/0/res/conv1/weight"). Initialization is seeded per name, so a
//! model built twice from the same seed is bitwise identical regardless of
//! construction order. Layers hold clones of the underlying tensors, which
//! share storage with the store; optimizer updates are therefore visible to
//! every holder at once.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Result};

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Fresh variable holding a copy of the given tensor's values.
    Copy(Tensor),
}

#[derive(Clone)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

#[derive(Clone)]
pub struct ParamStore {
    params: Arc<Mutex<BTreeMap<String, Param>>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
            copy_from: None,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Param>> {
        self.params.lock().expect("parameter store poisoned")
    }

    pub fn contains(&self, name: &str) -> bool {
        self.lock().contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.lock().get(name).map(|p| p.var.as_tensor().clone())
    }

    pub fn get_param(&self, name: &str) -> Option<Param> {
        self.lock().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    /// Register (or overwrite) a parameter with explicit values.
    pub fn insert(&self, name: &str, value: &Tensor, trainable: bool) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        let mut params = self.lock();
        match params.get(name) {
            Some(p) if p.var.shape() == value.shape() => {
                p.var.set(&value)?;
                let var = p.var.clone();
                params.insert(name.to_string(), Param { var, trainable });
            }
            Some(p) => {
                return Err(dim_err!(
                    "parameter {name}: stored shape {:?}, new value {:?}",
                    p.var.shape(),
                    value.shape()
                ))
            }
            None => {
                let var = Var::from_tensor(&value.copy()?)?;
                params.insert(name.to_string(), Param { var, trainable });
            }
        }
        Ok(())
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: &Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![*c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, *std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(bound) => {
                if *bound == 0.0 {
                    vec![0.0; n]
                } else {
                    let dist = Uniform::new_inclusive(-bound, *bound).expect("finite bound");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            }
            Init::Copy(src) => {
                if src.dims() != shape {
                    return Err(dim_err!(
                        "copy-init of {name}: source shape {:?}, target {:?}",
                        src.dims(),
                        shape
                    ));
                }
                return Ok(src.to_dtype(self.dtype)?.copy()?);
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Fetch `name`, creating it with `init` when absent. Existing entries
    /// (for instance loaded from an archive) win over the initializer.
    pub fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(p) = self.get_param(name) {
            if p.var.dims() != shape {
                return Err(dim_err!(
                    "parameter {name}: stored shape {:?}, requested {:?}",
                    p.var.dims(),
                    shape
                ));
            }
            // Frozen parameters are handed out detached so backward passes
            // skip their weight gradients.
            return Ok(if p.trainable {
                p.var.as_tensor().clone()
            } else {
                p.var.as_tensor().detach()
            });
        }
        let value = self.init_tensor(name, shape, &init)?;
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.lock().insert(
            name.to_string(),
            Param {
                var,
                trainable: true,
            },
        );
        Ok(t)
    }

    /// Set the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable(&self, prefix: &str, trainable: bool) {
        for (name, p) in self.lock().iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.lock()
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    /// Number of scalar parameters, optionally restricted to a name prefix.
    pub fn num_params(&self, prefix: &str) -> usize {
        self.lock()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.lock()
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// SHA-256 over the names and raw values of the selected parameters.
    pub fn digest(&self, filter: impl Fn(&str, &Param) -> bool) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, p) in self.lock().iter() {
            if !filter(name, p) {
                continue;
            }
            hasher.update(name.as_bytes());
            let flat = p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for v in flat.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Digest of every frozen parameter.
    pub fn frozen_digest(&self) -> Result<String> {
        self.digest(|_, p| !p.trainable)
    }
}

/// Scoped view into a [`ParamStore`].
///
/// With `copy_from` set, parameters are initialized from the tensor of the
/// same relative name under that other prefix whenever it exists; this is how
/// the control encoder mirrors the denoising U-Net encoder.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    copy_from: Option<String>,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let join = |p: &str| {
            if p.is_empty() {
                name.to_string()
            } else {
                format!("{p}/{name}")
            }
        };
        Self {
            store: self.store.clone(),
            prefix: join(&self.prefix),
            copy_from: self.copy_from.as_deref().map(join),
        }
    }

    pub fn copy_from(&self, prefix: &str) -> Self {
        Self {
            store: self.store.clone(),
            prefix: self.prefix.clone(),
            copy_from: Some(prefix.to_string()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let init = match &self.copy_from {
            Some(src) => match self.store.get(&format!("{src}/{name}")) {
                Some(t) => Init::Copy(t),
                None => init,
            },
            None => init,
        };
        self.store.get_or_init(&self.full(name), shape, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let x1 = a.root().get("x", &[3, 2], Init::Normal(1.0)).unwrap();
        let _ = a.root().get("y", &[4], Init::Normal(1.0)).unwrap();
        let _ = b.root().get("y", &[4], Init::Normal(1.0)).unwrap();
        let x2 = b.root().get("x", &[3, 2], Init::Normal(1.0)).unwrap();
        assert_eq!(x1.to_vec2::<f32>().unwrap(), x2.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn copy_from_mirrors_existing_and_falls_back() {
        let s = ParamStore::new(1, DType::F32);
        let src = s.root().pp("unet").pp("conv");
        let w = src.get("weight", &[2, 2], Init::Normal(1.0)).unwrap();
        let dst = s.root().pp("control").copy_from("unet").pp("conv");
        let w2 = dst.get("weight", &[2, 2], Init::Normal(1.0)).unwrap();
        let z = dst.get("zero", &[2], Init::Zeros).unwrap();
        assert_eq!(w.to_vec2::<f32>().unwrap(), w2.to_vec2::<f32>().unwrap());
        assert_ne!(w.id(), w2.id());
        assert_eq!(z.to_vec1::<f32>().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let s = ParamStore::new(1, DType::F32);
        s.root().get("w", &[2], Init::Zeros).unwrap();
        assert!(s.root().get("w", &[3], Init::Zeros).is_err());
    }

    #[test]
    fn frozen_flags_filter_trainable_vars() {
        let s = ParamStore::new(1, DType::F32);
        s.root().pp("a").get("w", &[2], Init::Zeros).unwrap();
        s.root().pp("b").get("w", &[3], Init::Zeros).unwrap();
        s.set_trainable("a", false);
        assert_eq!(s.trainable_vars().len(), 1);
        assert_eq!(s.num_trainable(), 3);
        assert_eq!(s.num_params(""), 5);
    }
}
