//! Ranking grids: the query followed by its top-k gallery images, framed
//! green for a correct match and red otherwise.

use cgpn::data::Dataset;
use image::{imageops, Rgb, RgbImage};

const THUMB_W: u32 = 64;
const THUMB_H: u32 = 128;
const BORDER: u32 = 4;
const GAP: u32 = 8;

const GREEN: Rgb<u8> = Rgb([0, 170, 0]);
const RED: Rgb<u8> = Rgb([210, 0, 0]);
const GREY: Rgb<u8> = Rgb([128, 128, 128]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

fn framed(img: &RgbImage, color: Rgb<u8>) -> RgbImage {
    let thumb = imageops::resize(img, THUMB_W, THUMB_H, imageops::FilterType::Triangle);
    let mut out = RgbImage::from_pixel(THUMB_W + 2 * BORDER, THUMB_H + 2 * BORDER, color);
    imageops::overlay(&mut out, &thumb, BORDER as i64, BORDER as i64);
    out
}

/// One row with `k` gallery slots; missing entries stay blank.
pub fn render_row(dataset: &Dataset, query: usize, gallery: &[(usize, bool)], k: usize) -> cgpn::Result<RgbImage> {
    let cell_w = THUMB_W + 2 * BORDER;
    let cell_h = THUMB_H + 2 * BORDER;
    let width = (k as u32 + 1) * cell_w + (k as u32 + 1) * GAP + GAP;
    let mut canvas = RgbImage::from_pixel(width, cell_h + 2 * GAP, BACKGROUND);
    let q = framed(&dataset.image(query)?, GREY);
    imageops::overlay(&mut canvas, &q, GAP as i64, GAP as i64);
    // Extra gap between the query and its ranking.
    let mut x = 2 * GAP + cell_w + GAP;
    for &(g, is_match) in gallery.iter().take(k) {
        let cell = framed(&dataset.image(g)?, if is_match { GREEN } else { RED });
        imageops::overlay(&mut canvas, &cell, x as i64, GAP as i64);
        x += cell_w + GAP;
    }
    Ok(canvas)
}
