use serde::{Deserialize, Serialize};

use super::ImageInstance;
use crate::error::{CatxError, Result};

/// Row-major sequence of flattened square patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSequence {
    /// `[num_patches × patch_dim]`, row-major.
    pub patches: Vec<f32>,
    pub patch_size: usize,
    pub channels: usize,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
}

impl PatchSequence {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.patches[i * d..(i + 1) * d]
    }
}

/// What an all-black patch looks like after normalization: `-mean / std`
/// for every value of each channel, laid out like one patch.
pub fn black_patch(normalization: &[(f32, f32)], patch_size: usize) -> Vec<f32> {
    normalization
        .iter()
        .flat_map(|&(mean, std)| std::iter::repeat_n(-mean / std, patch_size * patch_size))
        .collect()
}

pub fn patchify(instance: &ImageInstance, patch_size: usize) -> Result<PatchSequence> {
    patchify_pixels(
        &instance.pixels,
        instance.channels,
        instance.height,
        instance.width,
        patch_size,
    )
}

/// Splits channel-planar pixels into patches. Patches are ordered left to
/// right then top to bottom; inside a patch values run channel-major, then
/// row-major.
pub fn patchify_pixels(
    pixels: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<PatchSequence> {
    if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
        return Err(CatxError::config(format!(
            "{height}x{width} image is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    if pixels.len() != channels * height * width {
        return Err(CatxError::shape(format!(
            "{} pixels for a {channels}x{height}x{width} image",
            pixels.len()
        )));
    }
    let grid = (height / patch_size, width / patch_size);
    let mut patches = Vec::with_capacity(pixels.len());
    for gr in 0..grid.0 {
        for gc in 0..grid.1 {
            for c in 0..channels {
                for dy in 0..patch_size {
                    let row = (c * height + gr * patch_size + dy) * width + gc * patch_size;
                    patches.extend_from_slice(&pixels[row..row + patch_size]);
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        patch_size,
        channels,
        grid,
    })
}

/// Inverse of [`patchify_pixels`]; returns channel-planar pixels.
pub fn unpatchify(seq: &PatchSequence) -> Vec<f32> {
    let p = seq.patch_size;
    let (height, width) = (seq.grid.0 * p, seq.grid.1 * p);
    let mut pixels = vec![0.0; seq.channels * height * width];
    let mut it = seq.patches.iter();
    for gr in 0..seq.grid.0 {
        for gc in 0..seq.grid.1 {
            for c in 0..seq.channels {
                for dy in 0..p {
                    let row = (c * height + gr * p + dy) * width + gc * p;
                    for px in &mut pixels[row..row + p] {
                        *px = *it.next().expect("patch buffer shorter than grid");
                    }
                }
            }
        }
    }
    pixels
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_counts() {
        let s = patchify_pixels(&vec![0.0; 28 * 28], 1, 28, 28, 4).unwrap();
        assert_eq!((s.num_patches(), s.patch_dim()), (49, 16));
        let s = patchify_pixels(&vec![0.0; 3 * 32 * 32], 3, 32, 32, 4).unwrap();
        assert_eq!((s.num_patches(), s.patch_dim()), (64, 48));
    }

    #[test]
    fn single_patch_is_the_image() {
        let px: Vec<f32> = (0..64).map(|v| v as f32).collect();
        let s = patchify_pixels(&px, 1, 8, 8, 8).unwrap();
        assert_eq!(s.num_patches(), 1);
        assert_eq!(s.patches, px);
    }

    #[test]
    fn layout_is_row_major_then_channel_major() {
        // 2 channels, 4x4, patch 2: patch 1 is the top-right block
        let px: Vec<f32> = (0..32).map(|v| v as f32).collect();
        let s = patchify_pixels(&px, 2, 4, 4, 2).unwrap();
        assert_eq!(s.patch(1), &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
        assert_eq!(s.patch(2), &[8.0, 9.0, 12.0, 13.0, 24.0, 25.0, 28.0, 29.0]);
    }

    #[test]
    fn indivisible_dims_are_config_errors() {
        let err = patchify_pixels(&vec![0.0; 28 * 28], 1, 28, 28, 5).unwrap_err();
        assert!(matches!(err, CatxError::Config(_)));
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact(
            channels in 1usize..4,
            gr in 1usize..5,
            gc in 1usize..5,
            p in 1usize..5,
            seed in any::<u32>(),
        ) {
            let (h, w) = (gr * p, gc * p);
            let px: Vec<f32> = (0..channels * h * w)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e9)
                .collect();
            let s = patchify_pixels(&px, channels, h, w, p).unwrap();
            prop_assert_eq!(s.num_patches(), (h / p) * (w / p));
            prop_assert_eq!(s.grid.0 * s.grid.1, s.num_patches());
            prop_assert_eq!(unpatchify(&s), px);
        }
    }
}
