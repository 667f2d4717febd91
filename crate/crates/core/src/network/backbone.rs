//! 50-layer bottleneck residual trunk, split into three branches after the
//! first block of the fourth stage.
//!
//! Parameter names follow the torchvision layout (`layer3.1.conv2.weight`,
//! `downsample.1.running_var`, ...) under a `backbone.` prefix for the shared
//! stem and a `branch{b}.` prefix for the per-branch copies, so ImageNet
//! weights can be mapped in by stripping the prefix.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool_nonneg, Conv2d, Norm};
use super::params::{Scope, VarStore};
use crate::error::{Error, Result};
use crate::partition::FeatureMap;

pub const INPUT_HEIGHT: usize = 384;
pub const INPUT_WIDTH: usize = 128;
pub const NUM_BRANCHES: usize = 3;

/// Bottleneck expansion factor.
const EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of the stem; 64 for the canonical network.
    pub base_width: usize,
    /// Bottleneck blocks per stage.
    pub blocks: [usize; 4],
    /// Stride of the last stage: 2 keeps the canonical 12x4 branch maps, 1
    /// doubles them to 24x8.
    pub last_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl BackboneConfig {
    pub fn canonical() -> Self {
        Self {
            base_width: 64,
            blocks: [3, 4, 6, 3],
            last_stride: 2,
        }
    }

    /// Same depth, `base_width` channels in the stem instead of 64.
    pub fn width_reduced(base_width: usize) -> Self {
        Self {
            base_width,
            ..Self::canonical()
        }
    }

    pub fn out_channels(&self) -> usize {
        self.base_width * 8 * EXPANSION
    }

    /// Height and width of each branch output for the fixed input size.
    pub fn output_hw(&self) -> (usize, usize) {
        let f = 16 * self.last_stride;
        (INPUT_HEIGHT / f, INPUT_WIDTH / f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config(format!("every stage needs a block, got {:?}", self.blocks)));
        }
        if !matches!(self.last_stride, 1 | 2) {
            return Err(Error::Config(format!("last_stride must be 1 or 2, got {}", self.last_stride)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: Norm,
    conv2: Conv2d,
    bn2: Norm,
    conv3: Conv2d,
    bn3: Norm,
    downsample: Option<(Conv2d, Norm)>,
}

impl Bottleneck {
    fn new(scope: &mut Scope<'_>, in_ch: usize, planes: usize, stride: usize) -> Result<Self> {
        let out_ch = planes * EXPANSION;
        let conv1 = Conv2d::new(&mut scope.pp("conv1"), in_ch, planes, 1, 1, 0)?;
        let bn1 = Norm::new(&mut scope.pp("bn1"), planes)?;
        let conv2 = Conv2d::new(&mut scope.pp("conv2"), planes, planes, 3, stride, 1)?;
        let bn2 = Norm::new(&mut scope.pp("bn2"), planes)?;
        let conv3 = Conv2d::new(&mut scope.pp("conv3"), planes, out_ch, 1, 1, 0)?;
        let bn3 = Norm::new(&mut scope.pp("bn3"), out_ch)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            let mut ds = scope.pp("downsample");
            let conv = Conv2d::new(&mut ds.pp(0), in_ch, out_ch, 1, stride, 0)?;
            let bn = Norm::new(&mut ds.pp(1), out_ch)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

fn stage(
    scope: &mut Scope<'_>,
    name: &str,
    blocks: std::ops::Range<usize>,
    in_ch: usize,
    planes: usize,
    first_stride: usize,
) -> Result<Vec<Bottleneck>> {
    let mut layer = scope.pp(name);
    let mut out = Vec::with_capacity(blocks.len());
    for i in blocks {
        let (cin, stride) = if i == 0 {
            (in_ch, first_stride)
        } else {
            (planes * EXPANSION, 1)
        };
        out.push(Bottleneck::new(&mut layer.pp(i), cin, planes, stride)?);
    }
    Ok(out)
}

/// Shared stem up to and including the first block of the fourth stage.
#[derive(Debug, Clone)]
struct Trunk {
    conv1: Conv2d,
    bn1: Norm,
    layers: Vec<Bottleneck>,
}

/// Remaining fourth-stage blocks and the fifth stage, one copy per branch.
#[derive(Debug, Clone)]
struct BranchStages {
    layers: Vec<Bottleneck>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    trunk: Trunk,
    branches: Vec<BranchStages>,
}

impl Backbone {
    pub fn new(root: &mut Scope<'_>, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let [b1, b2, b3, b4] = config.blocks;
        let trunk = {
            let mut s = root.pp("backbone");
            let conv1 = Conv2d::new(&mut s.pp("conv1"), 3, w, 7, 2, 3)?;
            let bn1 = Norm::new(&mut s.pp("bn1"), w)?;
            let mut layers = stage(&mut s, "layer1", 0..b1, w, w, 1)?;
            layers.extend(stage(&mut s, "layer2", 0..b2, w * EXPANSION, w * 2, 2)?);
            layers.extend(stage(&mut s, "layer3", 0..1, w * 2 * EXPANSION, w * 4, 2)?);
            Trunk { conv1, bn1, layers }
        };
        let mut branches = Vec::with_capacity(NUM_BRANCHES);
        for b in 1..=NUM_BRANCHES {
            let mut s = root.pp(format!("branch{b}"));
            let mut layers = stage(&mut s, "layer3", 1..b3, w * 4 * EXPANSION, w * 4, 1)?;
            layers.extend(stage(
                &mut s,
                "layer4",
                0..b4,
                w * 4 * EXPANSION,
                w * 8,
                config.last_stride,
            )?);
            branches.push(BranchStages { layers });
        }
        Ok(Self {
            config,
            trunk,
            branches,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Shared stem output, shape `(b, 4 * base_width * 4, 24, 8)`.
    fn forward_trunk(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        check_input(images)?;
        let t = &self.trunk;
        let x = t.bn1.forward(&t.conv1.forward(images)?, train)?.relu()?;
        let mut x = max_pool_nonneg(&x, 3, 2, 1)?;
        for block in &t.layers {
            x = block.forward(&x, train)?;
        }
        Ok(x)
    }

    /// Three branch maps of shape `(b, c, h, w)`.
    pub fn forward_branches(&self, images: &Tensor, train: bool) -> Result<Vec<FeatureMap>> {
        let shared = self.forward_trunk(images, train)?;
        self.branches
            .iter()
            .map(|branch| {
                let mut x = shared.clone();
                for block in &branch.layers {
                    x = block.forward(&x, train)?;
                }
                FeatureMap::new(x)
            })
            .collect()
    }
}

fn check_input(images: &Tensor) -> Result<()> {
    let dims = images.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!(
            "expected image batch (b, 3, {INPUT_HEIGHT}, {INPUT_WIDTH}), got {dims:?}"
        )));
    }
    if dims[2] != INPUT_HEIGHT || dims[3] != INPUT_WIDTH {
        return Err(Error::Shape(format!(
            "expected {INPUT_HEIGHT}x{INPUT_WIDTH} input, got {}x{}",
            dims[2], dims[3]
        )));
    }
    Ok(())
}

/// Name of the ImageNet tensor that initializes a backbone parameter, or
/// `None` for parameters outside the backbone.
pub fn pretrained_source_name(param: &str) -> Option<&str> {
    if let Some(rest) = param.strip_prefix("backbone.") {
        return Some(rest);
    }
    let rest = param.strip_prefix("branch")?;
    let (idx, tail) = rest.split_once('.')?;
    idx.parse::<usize>().ok()?;
    (tail.starts_with("layer3.") || tail.starts_with("layer4.")).then_some(tail)
}

/// Copy ImageNet weights (torchvision naming, safetensors file) into the
/// backbone. Every branch receives the same weights for the layers after the
/// split. The classifier (`fc.*`) and `num_batches_tracked` entries in the file
/// are ignored. Returns the number of parameters assigned.
pub fn load_pretrained(store: &VarStore, path: &Path) -> Result<usize> {
    let tensors = candle_core::safetensors::load(path, store.device()).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut assigned = 0;
    let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    for name in names {
        let Some(source) = pretrained_source_name(&name) else {
            continue;
        };
        let value = tensors.get(source).ok_or_else(|| Error::MissingWeight {
            layer: source.to_string(),
            path: path.to_path_buf(),
        })?;
        store.assign(&name, value).map_err(|e| match e {
            Error::WeightMismatch { expected, found, .. } => Error::WeightMismatch {
                layer: source.to_string(),
                expected,
                found,
            },
            other => other,
        })?;
        assigned += 1;
    }
    Ok(assigned)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_names() {
        assert_eq!(pretrained_source_name("backbone.conv1.weight"), Some("conv1.weight"));
        assert_eq!(
            pretrained_source_name("branch2.layer4.0.downsample.1.running_var"),
            Some("layer4.0.downsample.1.running_var")
        );
        assert_eq!(pretrained_source_name("branch1.global.conv_upper.weight"), None);
        assert_eq!(pretrained_source_name("reduce.f1_g.proj.weight"), None);
    }

    #[test]
    fn output_geometry() {
        assert_eq!(BackboneConfig::canonical().output_hw(), (12, 4));
        assert_eq!(BackboneConfig::canonical().out_channels(), 2048);
        let s1 = BackboneConfig {
            last_stride: 1,
            ..BackboneConfig::canonical()
        };
        assert_eq!(s1.output_hw(), (24, 8));
        assert!(BackboneConfig {
            last_stride: 3,
            ..BackboneConfig::canonical()
        }
        .validate()
        .is_err());
    }
}
