use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

/// Named parameters and buffers of one network.
///
/// Every tensor is initialised from its own RNG stream keyed by
/// `(seed, name)`, so adding or removing a layer never shifts the
/// initial values of the others.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
    seed: u64,
}

/// FNV-1a, used only to derive per-parameter seeds.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
            device,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.params.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Trainable tensor drawn from `U(-bound, bound)`.
    pub fn uniform<S: Into<Shape>>(&mut self, name: &str, shape: S, bound: f64) -> Result<Var> {
        let shape = shape.into();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let vals: Vec<f64> = (0..shape.elem_count())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::from_vec(vals, shape, &self.device)?;
        self.insert(name, t, true)
    }

    pub fn constant<S: Into<Shape>>(&mut self, name: &str, shape: S, value: f64, trainable: bool) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t, trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// Overwrites every stored tensor from `tensors`, which must hold exactly
    /// the same names and shapes.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::data(format!("checkpoint is missing tensor `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::data(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::data(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect()
    }
}
