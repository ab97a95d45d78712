//! Blue-white-red heatmaps scaled by the largest absolute value.

use std::path::Path;

use concept_probe_core::{Error as CoreError, Tensor};
use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::pnm;

fn channel(level: f32) -> u8 {
    (255.0 * level).round().clamp(0.0, 255.0) as u8
}

/// Colour of a value already scaled to `[-1, 1]`.
pub fn colour(t: f32) -> Rgb<u8> {
    if t >= 0.0 {
        let fade = channel(1.0 - t);
        Rgb([255, fade, fade])
    } else {
        let fade = channel(1.0 + t);
        Rgb([fade, fade, 255])
    }
}

pub fn heatmap_image(heatmap: &Tensor) -> Result<RgbImage> {
    let &[h, w] = heatmap.shape() else {
        return Err(CoreError::Shape(format!("heatmap must be [H,W], got {:?}", heatmap.shape())).into());
    };
    if !heatmap.is_finite() {
        return Err(CoreError::Data("heatmap holds non-finite values".into()).into());
    }
    let scale = heatmap.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let data = heatmap.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = data[y as usize * w + x as usize];
        colour(if scale > 0.0 { v / scale } else { 0.0 })
    }))
}

pub fn render_heatmap(heatmap: &Tensor, path: &Path) -> Result<()> {
    pnm::write_ppm(path, &heatmap_image(heatmap)?)
}
