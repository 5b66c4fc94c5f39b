//! Image scaling, cropping and range normalization.

use crate::error::{Error, Result};
use crate::imgutil;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Maximum crop offset as a fraction of the side length.
pub const CROP_JITTER_FRAC: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Random crop offset up to 5% of the side length.
    Train,
    /// Deterministic center crop.
    Eval,
}

/// Storage-side canvas for a given training size: the crop target plus jitter
/// room on each side.
pub fn canvas_size(target: usize) -> usize {
    target + 2 * ((target as f64 * CROP_JITTER_FRAC) as usize)
}

/// Scale a [0,1] grayscale image to the crop canvas, crop `target`^2 (random
/// offset in training, center at evaluation) and normalize to [-1,1].
pub fn augment_image(
    image: &Array2<f64>,
    target: usize,
    mode: AugmentMode,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if h < target || w < target {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than target {target}"
        )));
    }
    let canvas = canvas_size(target);
    let scaled = imgutil::resize_bilinear(image, canvas, canvas);
    let max_off = ((target as f64 * CROP_JITTER_FRAC) as i64).max(0);
    let (dy, dx) = match mode {
        AugmentMode::Train if max_off > 0 => (
            rng.random_range(-max_off..=max_off),
            rng.random_range(-max_off..=max_off),
        ),
        _ => (0, 0),
    };
    let cropped = imgutil::crop_centered(&scaled, target, dy, dx)?;
    Ok(imgutil::to_signed(&cropped))
}
