//! Seeded inputs shared by the benchmarks.

use candle_core::{Device, Tensor};
use cgpn::evaluation::Meta;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(rows, cols)` uniform values in [-1, 1).
pub fn uniform_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let v: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (rows, cols), &Device::Cpu).unwrap()
}

pub fn uniform_array(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Metadata over `ids` identities and two cameras, with a few junk entries.
pub fn metas(rng: &mut impl Rng, n: usize, ids: i64) -> Vec<Meta> {
    (0..n)
        .map(|_| Meta {
            person_id: if rng.random_bool(0.02) { -1 } else { rng.random_range(1..=ids) },
            camera_id: rng.random_range(1..=2),
        })
        .collect()
}

/// Labels of a P x K batch.
pub fn pk_labels(p: usize, k: usize) -> Vec<u32> {
    (0..p * k).map(|i| (i / k) as u32).collect()
}
