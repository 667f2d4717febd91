use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::network::VarStore;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay,
/// following the usual framework convention:
///
/// ```text
/// g = grad + wd * p
/// v = g                (first update)
/// v = momentum * v + g (afterwards)
/// p = p - lr * v
/// ```
///
/// Weight decay applies to every trainable parameter, including
/// normalization scales and biases. Parameters without a gradient are left
/// untouched, momentum included.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }

    /// Apply one update; returns the number of parameters that moved.
    pub fn step(&mut self, store: &VarStore, grads: &GradStore, lr: f64) -> Result<usize> {
        let mut updated = 0;
        for (name, var) in store.trainable() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = grad.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            let v = match self.buffers.get(name) {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(&p - (&v * lr)?)?)?;
            self.buffers.insert(name.to_string(), v);
            updated += 1;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    use crate::network::params::Init;

    fn store() -> VarStore {
        let mut s = VarStore::new(0, DType::F64);
        let mut root = s.root();
        root.param("w", &[3], Init::Normal { mean: 0.0, std: 1.0 }).unwrap();
        root.param("unused", &[2], Init::Const(1.0)).unwrap();
        s
    }

    fn values(s: &VarStore, name: &str) -> Vec<f64> {
        s.get(name).unwrap().var.as_tensor().to_vec1().unwrap()
    }

    #[test]
    fn matches_hand_rolled_update() {
        let s = store();
        let w = s.get("w").unwrap().var.as_tensor().clone();
        let mut opt = Sgd::new(0.9, 0.1);
        let p0 = values(&s, "w");
        // loss = sum(w^2) / 2, gradient w
        let grads = (w.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap().backward().unwrap();
        assert_eq!(opt.step(&s, &grads, 0.5).unwrap(), 1);
        let v0: Vec<f64> = p0.iter().map(|p| p + 0.1 * p).collect();
        let p1: Vec<f64> = p0.iter().zip(&v0).map(|(p, v)| p - 0.5 * v).collect();
        for (a, b) in values(&s, "w").iter().zip(&p1) {
            assert!((a - b).abs() < 1e-15);
        }
        let grads = (w.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap().backward().unwrap();
        opt.step(&s, &grads, 0.5).unwrap();
        let p2: Vec<f64> = p1
            .iter()
            .zip(&v0)
            .map(|(p, v)| p - 0.5 * (0.9 * v + (p + 0.1 * p)))
            .collect();
        for (a, b) in values(&s, "w").iter().zip(&p2) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(values(&s, "unused"), vec![1.0, 1.0]);
        assert!(!opt.buffers().contains_key("unused"));
    }

    #[test]
    fn zero_rate_is_identity() {
        let s = store();
        let w = s.get("w").unwrap().var.as_tensor().clone();
        let before = values(&s, "w");
        let mut opt = Sgd::new(0.9, 5e-4);
        for _ in 0..3 {
            let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&s, &grads, 0.0).unwrap();
        }
        let after = values(&s, "w");
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
