//! Safetensors checkpoints: model parameters, momentum buffers and a JSON
//! manifest describing the model and the training position.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{feature_census, CgpnModel, FeatureSpec, ModelConfig};
use crate::variant::Variant;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";
const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub variant: Variant,
    pub model: ModelConfig,
    pub census: Vec<FeatureSpec>,
    /// Optimizer steps completed.
    pub step: usize,
    /// Epoch and batch position of the next step.
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub seed: u64,
    /// Person id of each classifier output.
    pub class_ids: Vec<i64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: BTreeMap<String, Tensor>,
    pub momentum: BTreeMap<String, Tensor>,
}

fn corrupt(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn from_view(path: &Path, name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(corrupt(path, format!("tensor {name} has unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in &self.params {
            let (dtype, bytes) = to_bytes(t)?;
            owned.push((name.clone(), dtype, t.dims().to_vec(), bytes));
        }
        for (name, t) in &self.momentum {
            let (dtype, bytes) = to_bytes(t)?;
            owned.push((format!("{MOMENTUM_PREFIX}{name}"), dtype, t.dims().to_vec(), bytes));
        }
        let views = owned
            .iter()
            .map(|(name, dtype, shape, bytes)| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.as_str(), v))
                    .map_err(|e| Error::InvalidArgument(format!("tensor {name}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = serde_json::to_string(&self.manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let meta = HashMap::from([(MANIFEST_KEY.to_string(), manifest)]);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(views, Some(meta), &tmp)
            .map_err(|e| Error::io(&tmp, std::io::Error::other(e.to_string())))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(path, e))?;
        let manifest_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| corrupt(path, "no manifest"))?;
        let manifest: Manifest = serde_json::from_str(manifest_json).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "{}: checkpoint format {} (this build reads {FORMAT_VERSION})",
                path.display(),
                manifest.format_version
            )));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e))?;
        let mut params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (name, view) in st.iter() {
            let t = from_view(path, name, &view)?;
            match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(param) => momentum.insert(param.to_string(), t),
                None => params.insert(name.to_string(), t),
            };
        }
        Ok(Self {
            manifest,
            params,
            momentum,
        })
    }

    /// The recorded census must equal the one the recorded layout produces.
    pub fn check_census(&self, path: &Path) -> Result<()> {
        let expected = feature_census(&self.manifest.model)?;
        if expected != self.manifest.census || self.manifest.variant != self.manifest.model.variant {
            return Err(Error::Compatibility(format!(
                "{}: recorded census ({} features) does not match the {} layout ({} features)",
                path.display(),
                self.manifest.census.len(),
                self.manifest.model.variant,
                expected.len()
            )));
        }
        Ok(())
    }

    /// Rebuild the model and load every parameter.
    pub fn restore(&self, path: &Path) -> Result<CgpnModel> {
        self.check_census(path)?;
        let model = CgpnModel::new(self.manifest.model.clone(), 0)?;
        load_params(&model, &self.params, path)?;
        Ok(model)
    }
}

/// Copy `params` into `model`, requiring the exact same name set.
pub fn load_params(model: &CgpnModel, params: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let store = model.store();
    for (name, _) in store.iter() {
        if !params.contains_key(name) {
            return Err(corrupt(path, format!("parameter {name} missing")));
        }
    }
    for (name, t) in params {
        if store.get(name).is_none() {
            return Err(corrupt(path, format!("unexpected tensor {name}")));
        }
        store.assign(name, t)?;
    }
    Ok(())
}

/// Checkpoint file names under `<output>/checkpoints`.
pub fn checkpoint_path(output_dir: &Path, label: &str) -> PathBuf {
    output_dir.join("checkpoints").join(format!("{label}.safetensors"))
}
