#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use cgpn::data::SyntheticSpec;
use cgpn::trainer::{DataConfig, TrainConfig, TrainSchedule};
use cgpn::Variant;

/// Width of the reduced backbone used for fast tests.
pub const TEST_WIDTH: usize = 8;

/// A small synthetic run: `ids` identities, P = K = 2, constant rate.
pub fn toy_config(variant: Variant, steps: usize, lr: f64, out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        seed: 7,
        output_dir: out.to_path_buf(),
        data: DataConfig {
            root: None,
            synthetic: Some(SyntheticSpec::new(4, 4, 7)),
        },
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    cfg.model.base_width = TEST_WIDTH;
    cfg.sampler.p = 2;
    cfg.sampler.k = 2;
    cfg.schedule = TrainSchedule::constant(lr, 1000);
    cfg.schedule.max_steps = Some(steps);
    cfg
}

pub fn bits(t: &candle_core::Tensor) -> Vec<u32> {
    t.flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .into_iter()
        .map(f32::to_bits)
        .collect()
}
