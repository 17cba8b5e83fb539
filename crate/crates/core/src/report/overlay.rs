use std::path::Path;

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{CatxError, Result};
use crate::sampler::PatchMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayStyle {
    /// Brightness multiplier for unselected patches; 0 gives hard black.
    pub dim: f32,
    pub grid: bool,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle { dim: 0.25, grid: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySpec {
    pub instance: String,
    pub fracs: Vec<f64>,
    pub style: OverlayStyle,
}

/// Renders channel-planar `[0, 1]` pixels with unselected patches dimmed.
/// Output dimensions equal the source dimensions.
pub fn render_overlay(
    pixels: &[f32],
    channels: usize,
    side: usize,
    patch_size: usize,
    mask: &PatchMask<f32>,
    style: OverlayStyle,
) -> Result<DynamicImage> {
    if pixels.len() != channels * side * side {
        return Err(CatxError::shape("pixel buffer does not match image size"));
    }
    let grid = side / patch_size;
    if mask.len() != grid * grid {
        return Err(CatxError::shape(format!(
            "mask has {} entries for {} patches",
            mask.len(),
            grid * grid
        )));
    }
    let value = |c: usize, y: usize, x: usize| -> u8 {
        let patch = (y / patch_size) * grid + x / patch_size;
        let on_edge = style.grid && (y.is_multiple_of(patch_size) || x.is_multiple_of(patch_size));
        if on_edge {
            return 128;
        }
        let scale = if mask.values[patch] > 0.0 { 1.0 } else { style.dim };
        let v = pixels[(c * side + y) * side + x].clamp(0.0, 1.0) * scale;
        (v * 255.0).round() as u8
    };
    let (w, h) = (side as u32, side as u32);
    Ok(match channels {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| {
            Luma([value(0, y as usize, x as usize)])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([value(0, y, x), value(1, y, x), value(2, y, x)])
        })),
        c => return Err(CatxError::config(format!("cannot render {c}-channel images"))),
    })
}

/// Reads a raster image as channel-planar `[0, 1]` pixels. The image must be
/// `side × side`; it is converted to grayscale or RGB to match `channels`.
pub fn load_image(path: &Path, channels: usize, side: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?;
    if img.width() as usize != side || img.height() as usize != side {
        return Err(CatxError::config(format!(
            "{} is {}x{}, model expects {side}x{side}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let plane = side * side;
    match channels {
        1 => Ok(img.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0).collect()),
        3 => {
            let rgb = img.to_rgb8();
            let mut out = vec![0.0; 3 * plane];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
            Ok(out)
        }
        c => Err(CatxError::config(format!("cannot load {c}-channel images"))),
    }
}
