//! Training-time image augmentation: horizontal flip, random erase, and
//! optional pad-and-random-crop. All draws come from a caller-owned seeded
//! generator, so augmented batches are reproducible.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;

/// Augmentation configuration. Probabilities must lie in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub crop_enabled: bool,
    /// Border padding (pixels) before the random crop back to `image_size`.
    pub crop_pad: usize,
    /// (H, W) every image is resized to before augmentation.
    pub image_size: (usize, usize),
}

impl AugmentPolicy {
    /// No-op policy: resize only.
    pub fn identity(image_size: (usize, usize)) -> Self {
        Self {
            flip_prob: 0.0,
            erase_prob: 0.0,
            crop_enabled: false,
            crop_pad: 0,
            image_size,
        }
    }

    /// Flip and erase with 50% probability each.
    pub fn training_default(image_size: (usize, usize)) -> Self {
        Self {
            flip_prob: 0.5,
            erase_prob: 0.5,
            crop_enabled: false,
            crop_pad: 2,
            image_size,
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        for (p, name) in [(self.flip_prob, "flip_prob"), (self.erase_prob, "erase_prob")] {
            if !(0.0..=1.0).contains(&p) {
                return Err(crate::error::Error::InvalidConfig(format!(
                    "{name} must be in [0,1], got {p}"
                )));
            }
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(crate::error::Error::InvalidConfig(
                "image_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mirror along the width axis.
pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = img.size();
    let mut out = Array3::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = img.data[[c, y, w - 1 - x]];
            }
        }
    }
    Image::new(out)
}

/// Zero-pad by `pad` on every border, then crop back to the original size at
/// a random offset.
pub fn pad_random_crop(img: &Image, pad: usize, rng: &mut ChaCha8Rng) -> Image {
    if pad == 0 {
        return img.clone();
    }
    let (h, w) = img.size();
    let top = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let left = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = Array3::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize + top;
                let sx = x as isize + left;
                if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                    out[[c, y, x]] = img.data[[c, sy as usize, sx as usize]];
                }
            }
        }
    }
    Image::new(out)
}

/// Overwrite a random rectangle (2%-40% of the area, aspect in [0.3, 3.33])
/// with uniform noise. Pixels outside the rectangle are untouched.
pub fn erase_random_rect(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = img.size();
    let area = (h * w) as f64;
    let mut out = img.clone();
    for _ in 0..32 {
        let target = rng.random_range(0.02..0.4) * area;
        let aspect = rng.random_range(0.3..3.33);
        let eh = ((target * aspect).sqrt().round() as usize).max(1);
        let ew = ((target / aspect).sqrt().round() as usize).max(1);
        if eh > h || ew > w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for y in top..top + eh {
            for x in left..left + ew {
                for c in 0..3 {
                    out.data[[c, y, x]] = rng.random_range(0.0..1.0);
                }
            }
        }
        return out;
    }
    out
}

/// Apply the policy: resize to `image_size`, then flip / crop / erase with
/// the configured probabilities.
pub fn augment(img: &Image, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.resized(policy.image_size);
    if policy.flip_prob > 0.0 && rng.random_range(0.0..1.0) < policy.flip_prob {
        out = flip_horizontal(&out);
    }
    if policy.crop_enabled {
        out = pad_random_crop(&out, policy.crop_pad, rng);
    }
    if policy.erase_prob > 0.0 && rng.random_range(0.0..1.0) < policy.erase_prob {
        out = erase_random_rect(&out, rng);
    }
    out
}
