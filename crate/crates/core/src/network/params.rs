//! Named, seeded parameter storage.
//!
//! Candle's CPU random initializers draw from a thread-local generator that
//! cannot be seeded, so parameters are created here from a ChaCha stream
//! instead. Creation order is fixed by model construction, which makes the
//! initial weights a pure function of the seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { mean: f64, std: f64 },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

#[derive(Debug)]
pub struct VarStore {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter {name} created twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Normal { mean, std } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::InvalidArgument(format!("init {name}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.params.insert(name, Param { var, trainable });
        Ok(tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// All parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k, &p.var))
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place, checking the shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let param = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if param.var.dims() != value.dims() {
            return Err(Error::WeightMismatch {
                layer: name.to_string(),
                expected: param.var.dims().to_vec(),
                found: value.dims().to_vec(),
            });
        }
        param
            .var
            .set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().detach().copy()?)))
            .collect()
    }
}

/// A prefix into a [`VarStore`]; names are joined with `.`.
pub struct Scope<'a> {
    store: &'a mut VarStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full(name);
        self.store.create(full, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full(name);
        self.store.create(full, shape, init, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}
