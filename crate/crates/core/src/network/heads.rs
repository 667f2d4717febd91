use candle_core::Tensor;

use super::layers::{Conv2d, Linear, Norm};
use super::params::{Init, Scope};
use crate::error::{Error, Result};
use crate::partition::{pool_window, FeatureMap};

/// Output of a branch's global part.
#[derive(Debug, Clone)]
pub struct GlobalHeadOutput {
    /// Pooled output of the convolution supervised by the upper half.
    pub f_g1: Tensor,
    /// Pooled output of the convolution supervised by the bottom half.
    pub f_g2: Tensor,
    /// Upper-half target, detached from the graph.
    pub f_gl1: Tensor,
    /// Bottom-half target, detached from the graph.
    pub f_gl2: Tensor,
    /// `concat(f_g1, f_g2)` along the feature dimension.
    pub f_g: Tensor,
}

/// Two learned 1x1 convolutions over the whole branch map, each pooled into a
/// c-channel vector, and the half-map pooling targets that supervise them.
#[derive(Debug, Clone)]
pub struct GlobalHead {
    conv_upper: Conv2d,
    conv_lower: Conv2d,
    norm: Option<(Norm, Norm)>,
    channels: usize,
}

impl GlobalHead {
    pub fn new(scope: &mut Scope<'_>, channels: usize, bn_relu: bool) -> Result<Self> {
        let conv_upper = Conv2d::new(&mut scope.pp("conv_upper"), channels, channels, 1, 1, 0)?;
        let conv_lower = Conv2d::new(&mut scope.pp("conv_lower"), channels, channels, 1, 1, 0)?;
        let norm = if bn_relu {
            Some((
                Norm::new(&mut scope.pp("bn_upper"), channels)?,
                Norm::new(&mut scope.pp("bn_lower"), channels)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv_upper,
            conv_lower,
            norm,
            channels,
        })
    }

    /// Build a head from explicit 1x1 kernels of shape `(c, c, 1, 1)`.
    pub fn from_kernels(upper: Tensor, lower: Tensor) -> Result<Self> {
        let channels = upper.dim(0)?;
        Ok(Self {
            conv_upper: Conv2d::from_weight(upper, 1, 0)?,
            conv_lower: Conv2d::from_weight(lower, 1, 0)?,
            norm: None,
            channels,
        })
    }

    pub fn forward(&self, fmap: &FeatureMap, train: bool) -> Result<GlobalHeadOutput> {
        let h = fmap.height();
        if !h.is_multiple_of(2) {
            return Err(Error::NotDivisible { height: h, divisor: 2 });
        }
        if fmap.channels() != self.channels {
            return Err(Error::Shape(format!(
                "global head expects {} channels, got {}",
                self.channels,
                fmap.channels()
            )));
        }
        let x = batched(fmap)?;
        let mut up = self.conv_upper.forward(&x)?;
        let mut low = self.conv_lower.forward(&x)?;
        if let Some((bn_u, bn_l)) = &self.norm {
            up = bn_u.forward(&up, train)?.relu()?;
            low = bn_l.forward(&low, train)?.relu()?;
        }
        let f_g1 = pool_window(&FeatureMap::new(up)?)?;
        let f_g2 = pool_window(&FeatureMap::new(low)?)?;
        let target = FeatureMap::new(x)?.detach();
        let f_gl1 = pool_window(&target.rows(0, h / 2)?)?;
        let f_gl2 = pool_window(&target.rows(h / 2, h)?)?;
        let f_g = Tensor::cat(&[&f_g1, &f_g2], 1)?;
        let out = GlobalHeadOutput {
            f_g1,
            f_g2,
            f_gl1,
            f_gl2,
            f_g,
        };
        if fmap.is_batched() {
            Ok(out)
        } else {
            Ok(GlobalHeadOutput {
                f_g1: out.f_g1.squeeze(0)?,
                f_g2: out.f_g2.squeeze(0)?,
                f_gl1: out.f_gl1.squeeze(0)?,
                f_gl2: out.f_gl2.squeeze(0)?,
                f_g: out.f_g.squeeze(0)?,
            })
        }
    }
}

fn batched(fmap: &FeatureMap) -> Result<Tensor> {
    if fmap.is_batched() {
        Ok(fmap.tensor().clone())
    } else {
        Ok(fmap.tensor().unsqueeze(0)?)
    }
}

/// Projection to the embedding dimension followed by batch normalization and a
/// rectifier.
#[derive(Debug, Clone)]
pub struct Reducer {
    proj: Linear,
    norm: Norm,
    out_dim: usize,
}

impl Reducer {
    pub fn new(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let std = (2.0 / in_dim as f64).sqrt();
        let proj = Linear::new(&mut scope.pp("proj"), in_dim, out_dim, Init::Normal { mean: 0.0, std }, false)?;
        let norm = Norm::new(&mut scope.pp("bn"), out_dim)?;
        Ok(Self { proj, norm, out_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.proj.in_features()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `feature` has shape `(b, in_dim)`.
    pub fn forward(&self, feature: &Tensor, train: bool) -> Result<Tensor> {
        let (_, d) = feature.dims2()?;
        if d != self.in_dim() {
            return Err(Error::Shape(format!(
                "reducer expects length {}, got {d}",
                self.in_dim()
            )));
        }
        let y = self.proj.forward(feature)?;
        Ok(self.norm.forward(&y, train)?.relu()?)
    }
}

/// Per-feature identity classifier.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    linear: Linear,
}

impl ClassifierHead {
    pub fn new(scope: &mut Scope<'_>, in_dim: usize, num_classes: usize) -> Result<Self> {
        let linear = Linear::new(scope, in_dim, num_classes, Init::Normal { mean: 0.0, std: 0.001 }, true)?;
        Ok(Self { linear })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.linear.forward(x)
    }
}
