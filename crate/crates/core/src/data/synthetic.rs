use std::path::PathBuf;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::stream_seed;
use super::{Dataset, DatasetIndex, ImageRecord, Split};
use crate::error::{Error, Result};

const WIDTH: u32 = 64;
const HEIGHT: u32 = 128;
const CAMERAS: u32 = 2;

/// Toy dataset parameters. Identities are numbered from 1 (0 is the
/// distractor id of the evaluation protocol).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    /// Train images per identity, alternating between the two cameras.
    pub imgs_per_id: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub query_per_camera: usize,
    #[serde(default = "two")]
    pub gallery_per_camera: usize,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl SyntheticSpec {
    pub fn new(num_ids: usize, imgs_per_id: usize, seed: u64) -> Self {
        Self {
            num_ids,
            imgs_per_id,
            seed,
            query_per_camera: 1,
            gallery_per_camera: 2,
        }
    }
}

/// Appearance shared by every image of one identity.
struct Appearance {
    bands: [[u8; 3]; 4],
    stripe: [u8; 3],
    stripe_period: u32,
}

impl Appearance {
    fn sample(rng: &mut impl Rng) -> Self {
        let mut color = || [rng.random(), rng.random(), rng.random()];
        let bands = [color(), color(), color(), color()];
        let stripe = color();
        Self {
            bands,
            stripe,
            stripe_period: rng.random_range(4..=12),
        }
    }
}

fn render(app: &Appearance, camera: u32, rng: &mut impl Rng) -> RgbImage {
    let dy: i32 = rng.random_range(-4..=4);
    let dx: i32 = rng.random_range(-3..=3);
    let cam_shift: i32 = if camera == 1 { 0 } else { -15 } + rng.random_range(-4..=4);
    let bg: u8 = rng.random_range(90..=150);
    let bounds = [0.0, 0.18, 0.55, 0.9, 1.0];
    let mut img = RgbImage::new(WIDTH, HEIGHT);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let sx = x as i32 - dx;
            let sy = y as i32 - dy;
            let inside = (10..(WIDTH as i32 - 10)).contains(&sx) && (4..(HEIGHT as i32 - 2)).contains(&sy);
            let base = if inside {
                let fy = sy as f64 / HEIGHT as f64;
                let band = bounds.windows(2).position(|w| fy >= w[0] && fy < w[1]).unwrap_or(3);
                if band == 1 && (sx as u32 / app.stripe_period) % 2 == 1 {
                    app.stripe
                } else {
                    app.bands[band]
                }
            } else {
                [bg; 3]
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let noise: i32 = rng.random_range(-12..=12);
                px[c] = (base[c] as i32 + cam_shift + noise).clamp(0, 255) as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Deterministic toy re-identification set.
///
/// Every identity gets `imgs_per_id` train images alternating over two
/// cameras, plus held-out query and gallery images in both cameras.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_ids < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 2 identities, got {}",
            spec.num_ids
        )));
    }
    let mut records = Vec::new();
    let mut images = Vec::new();
    for id in 1..=spec.num_ids {
        let mut id_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &[id as u64]));
        let app = Appearance::sample(&mut id_rng);
        let plan = [
            (Split::Train, spec.imgs_per_id),
            (Split::Query, spec.query_per_camera * CAMERAS as usize),
            (Split::Gallery, spec.gallery_per_camera * CAMERAS as usize),
        ];
        for (si, (split, count)) in plan.into_iter().enumerate() {
            for j in 0..count {
                let camera = (j as u32 % CAMERAS) + 1;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &[id as u64, si as u64 + 1, j as u64]));
                images.push(render(&app, camera, &mut rng));
                records.push(ImageRecord {
                    path: PathBuf::from(format!("{id:04}_c{camera}s1_{:06}_00.jpg", j + 1)),
                    person_id: id as i64,
                    camera_id: camera,
                    split,
                });
            }
        }
    }
    Dataset::in_memory(DatasetIndex::new(records)?, images)
}
