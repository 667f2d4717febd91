//! Convolution, normalization and pooling built from differentiable candle
//! primitives.
//!
//! Candle's native conv backward on CPU computes the kernel gradient as a
//! convolution whose kernel is the whole output map, and its max-pool backward
//! only supports `kernel == stride`. Lowering both to shifted slices plus a
//! matmul (or elementwise maximum) keeps every backward pass on fast kernels.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::BatchNorm;

use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// `count` indices `start, start + step, ...` along `dim`. The caller
/// guarantees `start + count * step <= size`.
pub(crate) fn take_strided(x: &Tensor, dim: usize, start: usize, count: usize, step: usize) -> Result<Tensor> {
    if step == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let span = x.narrow(dim, start, count * step)?;
    let mut dims = span.dims().to_vec();
    dims[dim] = count;
    dims.insert(dim + 1, step);
    let split = span.reshape(dims)?;
    Ok(split.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

fn output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "input extent {input} too small for kernel {kernel} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Every `kernel x kernel` shifted view of `x` after zero padding, in
/// row-major kernel order. Each view has shape `(b, c, out_h, out_w)`.
fn shifted_views(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<(Vec<Tensor>, usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    let out_h = output_len(h, kernel, stride, padding)?;
    let out_w = output_len(w, kernel, stride, padding)?;
    let extra = stride - 1;
    let padded = if padding + extra > 0 {
        x.pad_with_zeros(2, padding, padding + extra)?
            .pad_with_zeros(3, padding, padding + extra)?
    } else {
        x.clone()
    };
    let mut views = Vec::with_capacity(kernel * kernel);
    for ky in 0..kernel {
        let rows = take_strided(&padded, 2, ky, out_h, stride)?;
        for kx in 0..kernel {
            views.push(take_strided(&rows, 3, kx, out_w, stride)?);
        }
    }
    Ok((views, out_h, out_w))
}

/// Bias-free 2-d convolution with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        // Kaiming normal, fan-out, for rectifier networks.
        let std = (2.0 / (out_channels * kernel * kernel) as f64).sqrt();
        Self::with_init(
            scope,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            Init::Normal { mean: 0.0, std },
        )
    }

    pub fn with_init(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = scope.param("weight", &[out_channels, in_channels, kernel, kernel], init)?;
        Ok(Self {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Wrap an existing `(out, in, k, k)` kernel.
    pub fn from_weight(weight: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (out_channels, in_channels, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::Shape(format!("square kernel expected, got {kh}x{kw}")));
        }
        Ok(Self {
            weight,
            in_channels,
            out_channels,
            kernel: kh,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (cols, out_h, out_w) = if self.kernel == 1 && self.padding == 0 {
            let sub = if self.stride == 1 {
                x.clone()
            } else {
                shifted_views(x, 1, self.stride, 0)?.0.remove(0)
            };
            let (oh, ow) = (sub.dim(2)?, sub.dim(3)?);
            (sub.contiguous()?.reshape((b, c, oh * ow))?, oh, ow)
        } else {
            let (views, oh, ow) = shifted_views(x, self.kernel, self.stride, self.padding)?;
            // (b, c, k*k, oh, ow) flattens to the (c, ky, kx) order of the weight.
            let cols = Tensor::stack(&views, 2)?.reshape((b, c * self.kernel * self.kernel, oh * ow))?;
            (cols, oh, ow)
        };
        let w2 = self
            .weight
            .reshape((self.out_channels, self.in_channels * self.kernel * self.kernel))?;
        let y = w2.broadcast_matmul(&cols)?;
        Ok(y.reshape((b, self.out_channels, out_h, out_w))?)
    }
}

/// Batch normalization over dim 1 with running statistics stored as buffers.
#[derive(Debug, Clone)]
pub struct Norm {
    inner: BatchNorm,
}

impl Norm {
    pub fn new(scope: &mut Scope<'_>, features: usize) -> Result<Self> {
        let weight = scope.param("weight", &[features], Init::Const(1.0))?;
        let bias = scope.param("bias", &[features], Init::Const(0.0))?;
        let mean = scope.buffer("running_mean", &[features], Init::Const(0.0))?;
        let var = scope.buffer("running_var", &[features], Init::Const(1.0))?;
        let inner = BatchNorm::new(features, mean, var, weight, bias, 1e-5)?;
        Ok(Self { inner })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.inner.forward_t(x, train)?)
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
    in_features: usize,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, in_features: usize, out_features: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = scope.param("weight", &[out_features, in_features], init)?;
        let bias = if bias {
            Some(scope.param("bias", &[out_features], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            inner: candle_nn::Linear::new(weight, bias),
            in_features,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Max pooling with zero padding. Only valid for non-negative inputs (after a
/// rectifier), where zero padding is equivalent to negative-infinity padding.
pub fn max_pool_nonneg(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (views, _, _) = shifted_views(x, kernel, stride, padding)?;
    let mut acc = views[0].clone();
    for v in &views[1..] {
        acc = acc.maximum(v)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::VarStore;
    use candle_core::{DType, Device, Var};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar()
            .unwrap()
    }

    #[test]
    fn conv_matches_native_candle() {
        for &(cin, cout, k, s, p, h, w) in &[
            (3, 4, 7, 2, 3, 20, 12),
            (4, 5, 3, 1, 1, 9, 7),
            (4, 5, 3, 2, 1, 10, 8),
            (6, 3, 1, 1, 0, 5, 4),
            (6, 3, 1, 2, 0, 6, 4),
        ] {
            let mut vs = VarStore::new(1, DType::F32);
            let conv = Conv2d::new(&mut vs.root(), cin, cout, k, s, p).unwrap();
            let x = random(&[2, cin, h, w], 5);
            let ours = conv.forward(&x).unwrap();
            let native = x.conv2d(conv.weight(), p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), native.dims(), "k={k} s={s}");
            assert!(max_abs_diff(&ours, &native) < 1e-5, "k={k} s={s}");
        }
    }

    #[test]
    fn conv_kernel_gradient_matches_native() {
        let mut vs = VarStore::new(1, DType::F32);
        let conv = Conv2d::new(&mut vs.root(), 3, 4, 3, 2, 1).unwrap();
        let x = random(&[2, 3, 8, 6], 9);
        let var = vs.get("weight").unwrap().var.clone();
        let g_ours = conv.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g_native = x
            .conv2d(var.as_tensor(), 1, 2, 1, 1)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let a = g_ours.get(var.as_tensor()).unwrap();
        let b = g_native.get(var.as_tensor()).unwrap();
        assert!(max_abs_diff(a, b) < 1e-4);
    }

    #[test]
    fn max_pool_matches_native_on_nonnegative_input() {
        let x = random(&[2, 3, 12, 8], 4).relu().unwrap();
        let ours = max_pool_nonneg(&x, 3, 2, 1).unwrap();
        let native = x
            .pad_with_zeros(2, 1, 1)
            .unwrap()
            .pad_with_zeros(3, 1, 1)
            .unwrap()
            .max_pool2d_with_stride(3, 2)
            .unwrap();
        assert_eq!(ours.dims(), &[2, 3, 6, 4]);
        assert_eq!(ours.dims(), native.dims());
        assert!(max_abs_diff(&ours, &native) < 1e-7);
    }

    #[test]
    fn max_pool_backward_runs() {
        let x = Var::from_tensor(&random(&[1, 2, 8, 4], 2).relu().unwrap()).unwrap();
        let y = max_pool_nonneg(x.as_tensor(), 3, 2, 1).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(x.as_tensor()).unwrap().dims(), &[1, 2, 8, 4]);
    }
}
