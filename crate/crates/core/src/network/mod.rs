//! The three-branch model: shared trunk, per-branch global and local parts,
//! reduction blocks and identity classifiers.

pub mod backbone;
pub mod heads;
pub mod layers;
pub mod params;

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneConfig, INPUT_HEIGHT, INPUT_WIDTH, NUM_BRANCHES};
pub use heads::{ClassifierHead, GlobalHead, GlobalHeadOutput, Reducer};
pub use params::VarStore;

use crate::error::{Error, Result};
use crate::partition::{enumerate_windows_with, local_features, uniform_strips, BranchSpec, FeatureMap, StripWindow, WindowPolicy};
use crate::variant::{LocalMode, Variant, VariantConfig};

pub const REDUCED_DIM: usize = 256;

/// Switches for choices the model layout leaves open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadOptions {
    /// Batch norm and rectifier after the global 1x1 convolutions.
    pub conv1x1_bn_relu: bool,
    /// Classifiers read pooled features instead of reduced ones.
    pub softmax_on_pooled: bool,
    /// Emit the full-height window as an extra local feature.
    pub include_full_height: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub reduced_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub heads: HeadOptions,
}

impl ModelConfig {
    pub fn new(variant: Variant, backbone: BackboneConfig, num_classes: usize) -> Self {
        Self {
            variant,
            backbone,
            reduced_dim: REDUCED_DIM,
            num_classes,
            heads: HeadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Global,
    Local,
}

/// One named feature of the embedding bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub role: Role,
    pub branch: usize,
    pub window: Option<StripWindow>,
    /// Length before reduction: `2c` for globals, `c` for locals.
    pub pooled_dim: usize,
}

/// Local windows of each branch for a variant.
pub fn branch_windows(config: &ModelConfig) -> Result<Vec<Vec<StripWindow>>> {
    let vc = config.variant.config();
    let policy = WindowPolicy {
        include_full_height: config.heads.include_full_height,
        ..WindowPolicy::default()
    };
    BranchSpec::canonical()
        .iter()
        .map(|spec| match (vc.has_local, vc.local_mode) {
            (false, _) | (_, None) => Ok(Vec::new()),
            (true, Some(LocalMode::Coarse)) => enumerate_windows_with(spec.num_strips, &policy),
            (true, Some(LocalMode::Fine)) => uniform_strips(spec.num_strips),
        })
        .collect()
}

/// Ordered feature list: branch globals first, then locals in branch and
/// window order. This is also the order of the concatenated embedding.
pub fn feature_census(config: &ModelConfig) -> Result<Vec<FeatureSpec>> {
    let vc = config.variant.config();
    let c = config.backbone.out_channels();
    let mut out = Vec::new();
    if vc.has_global {
        for b in 1..=NUM_BRANCHES {
            out.push(FeatureSpec {
                name: format!("f{b}_g"),
                role: Role::Global,
                branch: b,
                window: None,
                pooled_dim: 2 * c,
            });
        }
    }
    for (i, windows) in branch_windows(config)?.into_iter().enumerate() {
        let b = i + 1;
        for (j, w) in windows.into_iter().enumerate() {
            out.push(FeatureSpec {
                name: format!("f{b}_l{}", j + 1),
                role: Role::Local,
                branch: b,
                window: Some(w),
                pooled_dim: c,
            });
        }
    }
    Ok(out)
}

/// Named reduced features of one forward pass.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub census: Vec<FeatureSpec>,
    /// `(b, reduced_dim)` per feature, census order.
    pub reduced: Vec<Tensor>,
}

impl EmbeddingBundle {
    pub fn len(&self) -> usize {
        self.reduced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reduced.is_empty()
    }

    /// Concatenated embedding, shape `(b, n * reduced_dim)`.
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&self.reduced, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub bundle: EmbeddingBundle,
    /// `(b, pooled_dim)` per feature, census order.
    pub pooled: Vec<Tensor>,
    /// One entry per branch when the variant has global parts.
    pub supervision: Vec<GlobalHeadOutput>,
    /// `(b, num_classes)` per feature; empty outside training mode.
    pub logits: Vec<Tensor>,
}

#[derive(Debug)]
pub struct CgpnModel {
    config: ModelConfig,
    vconfig: VariantConfig,
    census: Vec<FeatureSpec>,
    windows: Vec<Vec<StripWindow>>,
    store: VarStore,
    backbone: backbone::Backbone,
    global_heads: Vec<GlobalHead>,
    reducers: Vec<Reducer>,
    classifiers: Vec<ClassifierHead>,
}

impl CgpnModel {
    /// Randomly initialized model; all initial weights are a function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if config.reduced_dim == 0 {
            return Err(Error::Config("reduced_dim must be positive".into()));
        }
        let vconfig = config.variant.config();
        let census = feature_census(&config)?;
        let windows = branch_windows(&config)?;
        let (h, _) = config.backbone.output_hw();
        for ws in &windows {
            if let Some(w) = ws.first() {
                if h % w.total != 0 {
                    return Err(Error::NotDivisible { height: h, divisor: w.total });
                }
            }
        }
        let c = config.backbone.out_channels();
        let mut store = VarStore::new(seed, dtype);
        let mut root = store.root();
        let backbone = backbone::Backbone::new(&mut root, config.backbone)?;
        let mut global_heads = Vec::new();
        if vconfig.has_global {
            for b in 1..=NUM_BRANCHES {
                global_heads.push(GlobalHead::new(
                    &mut root.pp(format!("branch{b}")).pp("global"),
                    c,
                    config.heads.conv1x1_bn_relu,
                )?);
            }
        }
        let mut reducers = Vec::with_capacity(census.len());
        let mut classifiers = Vec::with_capacity(census.len());
        for f in &census {
            reducers.push(Reducer::new(
                &mut root.pp("reduce").pp(&f.name),
                f.pooled_dim,
                config.reduced_dim,
            )?);
            let cls_in = if config.heads.softmax_on_pooled {
                f.pooled_dim
            } else {
                config.reduced_dim
            };
            classifiers.push(ClassifierHead::new(
                &mut root.pp("classifier").pp(&f.name),
                cls_in,
                config.num_classes,
            )?);
        }
        Ok(Self {
            config,
            vconfig,
            census,
            windows,
            store,
            backbone,
            global_heads,
            reducers,
            classifiers,
        })
    }

    /// Random init followed by ImageNet weights for the backbone.
    pub fn with_pretrained(config: ModelConfig, seed: u64, weights: &Path) -> Result<Self> {
        let model = Self::new(config, seed)?;
        backbone::load_pretrained(&model.store, weights)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant_config(&self) -> &VariantConfig {
        &self.vconfig
    }

    pub fn census(&self) -> &[FeatureSpec] {
        &self.census
    }

    pub fn windows(&self) -> &[Vec<StripWindow>] {
        &self.windows
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn embedding_dim(&self) -> usize {
        self.census.len() * self.config.reduced_dim
    }

    pub fn forward_branches(&self, images: &Tensor, train: bool) -> Result<Vec<FeatureMap>> {
        self.backbone.forward_branches(images, train)
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<ModelOutput> {
        let maps = self.forward_branches(images, train)?;
        let mut supervision = Vec::new();
        let mut pooled = Vec::with_capacity(self.census.len());
        for (map, head) in maps.iter().zip(&self.global_heads) {
            let out = head.forward(map, train)?;
            pooled.push(out.f_g.clone());
            supervision.push(out);
        }
        for (map, windows) in maps.iter().zip(&self.windows) {
            for (_, v) in local_features(map, windows)? {
                pooled.push(v);
            }
        }
        debug_assert_eq!(pooled.len(), self.census.len());
        let reduced = pooled
            .iter()
            .zip(&self.reducers)
            .map(|(p, r)| r.forward(p, train))
            .collect::<Result<Vec<_>>>()?;
        let logits = if train {
            let inputs = if self.config.heads.softmax_on_pooled {
                &pooled
            } else {
                &reduced
            };
            inputs
                .iter()
                .zip(&self.classifiers)
                .map(|(x, cls)| cls.forward(x))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(ModelOutput {
            bundle: EmbeddingBundle {
                census: self.census.clone(),
                reduced,
            },
            pooled,
            supervision,
            logits,
        })
    }

    /// Inference embedding `(b, embedding_dim)` in evaluation mode.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.forward(images, false)?.bundle.concat()
    }
}
