use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schedule::TrainSchedule;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::TripletBatchSpec;
use crate::network::{BackboneConfig, HeadOptions, REDUCED_DIM};
use crate::variant::Variant;

/// Where training images come from. Exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `train`/`query`/`gallery` (or `bounding_box_*`) folders.
    pub root: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub blocks: [usize; 4],
    pub last_stride: usize,
    pub reduced_dim: usize,
    /// ImageNet weights for the trunk, as a safetensors file with
    /// torchvision parameter names.
    pub pretrained: Option<PathBuf>,
    pub heads: HeadOptions,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::canonical();
        Self {
            base_width: b.base_width,
            blocks: b.blocks,
            last_stride: b.last_stride,
            reduced_dim: REDUCED_DIM,
            pretrained: None,
            heads: HeadOptions::default(),
        }
    }
}

impl ModelSection {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            base_width: self.base_width,
            blocks: self.blocks,
            last_stride: self.last_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub margin: f64,
    /// Also apply the triplet term to every local feature.
    pub triplet_on_locals: bool,
    /// Divide the supervision term by the feature length as well as the
    /// batch size, i.e. a per-element mean instead of a squared norm.
    pub mse_per_element: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            margin: TripletBatchSpec::default().margin,
            triplet_on_locals: false,
            mse_per_element: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub p: usize,
    pub k: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = TripletBatchSpec::default();
        Self { p: s.p, k: s.k }
    }
}

/// Everything a training run needs, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub loss: LossSection,
    pub sampler: SamplerSection,
    pub schedule: TrainSchedule,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Cgpn,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            sampler: SamplerSection::default(),
            schedule: TrainSchedule::default(),
            checkpoint_every: 40,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn triplet_spec(&self) -> TripletBatchSpec {
        TripletBatchSpec {
            p: self.sampler.p,
            k: self.sampler.k,
            margin: self.loss.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.root, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("set either data.root or data.synthetic, not both".into())),
            (None, None) => return Err(Error::Config("no dataset: set data.root or data.synthetic".into())),
            _ => {}
        }
        self.model.backbone().validate()?;
        self.triplet_spec().validate()?;
        self.schedule.validate()
    }
}
