use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;

use crate::error::Result;
use crate::network::{INPUT_HEIGHT, INPUT_WIDTH};

/// ImageNet channel statistics, matching the pretrained backbone.
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Resize to 384x128 (bilinear), flip horizontally with probability 1/2 in
/// training mode, and normalize. Returns a `(3, 384, 128)` tensor.
///
/// In evaluation mode `rng` is not touched.
pub fn augment(image: &RgbImage, train_mode: bool, rng: &mut impl Rng) -> Result<Tensor> {
    let mut resized = if image.dimensions() == (INPUT_WIDTH as u32, INPUT_HEIGHT as u32) {
        image.clone()
    } else {
        imageops::resize(image, INPUT_WIDTH as u32, INPUT_HEIGHT as u32, FilterType::Triangle)
    };
    if train_mode && rng.random_bool(0.5) {
        imageops::flip_horizontal_in_place(&mut resized);
    }
    to_tensor(&resized)
}

/// Channel-first normalized float tensor of an RGB image.
pub fn to_tensor(image: &RgbImage) -> Result<Tensor> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = (px[c] as f32 / 255.0 - NORM_MEAN[c]) / NORM_STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Mirror the last (width) dimension.
pub fn flip_tensor_horizontal(t: &Tensor) -> Result<Tensor> {
    Ok(t.flip(&[t.rank() - 1])?)
}
