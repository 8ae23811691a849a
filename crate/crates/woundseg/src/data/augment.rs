//! Paired image/mask augmentation.
//!
//! Geometric transforms hit image and mask together (mask resampled
//! nearest-neighbor, fill value 0), photometric transforms touch the
//! image only. The rng draw order is a fixed contract so runs are
//! reproducible: one coin per transform in declaration order, with a
//! transform's parameter draws taken immediately after its coin hits.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{ClassMask, Tensor};
use crate::{Error, Result};

use super::SegSample;

/// Probabilities and ranges for each transform. A probability of zero
/// disables its transform; its coin is still flipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub rotate_prob: f64,
    /// Angle drawn uniformly from `[-max, +max]` degrees.
    pub max_rotate_degrees: f64,
    pub scale_prob: f64,
    /// Zoom factor drawn uniformly from `[lo, hi]`; factors below one
    /// shrink content and fill the border with zeros.
    pub scale_range: [f64; 2],
    pub brightness_prob: f64,
    /// Additive shift drawn uniformly from `[-delta, +delta]`.
    pub brightness_delta: f64,
    pub contrast_prob: f64,
    /// Slope jitter: `x -> (x - 0.5) * (1 + d) + 0.5`, `d` uniform in
    /// `[-delta, +delta]`.
    pub contrast_delta: f64,
    pub noise_prob: f64,
    /// Per-hit noise level drawn uniformly from `(0, sigma]`, then
    /// applied as zero-mean Gaussian per pixel.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rotate_prob: 0.5,
            max_rotate_degrees: 30.0,
            scale_prob: 0.5,
            scale_range: [0.9, 1.1],
            brightness_prob: 0.5,
            brightness_delta: 0.2,
            contrast_prob: 0.5,
            contrast_delta: 0.2,
            noise_prob: 0.5,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero: augment() becomes the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rotate_prob: 0.0,
            scale_prob: 0.0,
            brightness_prob: 0.0,
            contrast_prob: 0.0,
            noise_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
            ("rotate_prob", self.rotate_prob),
            ("scale_prob", self.scale_prob),
            ("brightness_prob", self.brightness_prob),
            ("contrast_prob", self.contrast_prob),
            ("noise_prob", self.noise_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if !(0.0..=180.0).contains(&self.max_rotate_degrees) {
            return Err(Error::Config(format!(
                "max_rotate_degrees = {} outside [0,180]",
                self.max_rotate_degrees
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::Config(format!("scale_range [{lo},{hi}] invalid")));
        }
        for (name, d) in [
            ("brightness_delta", self.brightness_delta),
            ("contrast_delta", self.contrast_delta),
        ] {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("{name} = {d} outside [0,1]")));
            }
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma = {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Derives the per-sample rng from the run seed, epoch, and position,
/// so samples can be prepared in any order without changing results.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let key = mix(seed ^ mix(epoch as u64 ^ mix(index as u64 ^ 0x9E37_79B9_7F4A_7C15)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Applies the configured transforms. Draw order: flip-h coin, flip-v
/// coin, rotate coin (then angle), scale coin (then factor), brightness
/// coin (then shift), contrast coin (then slope), noise coin (then
/// level, then one Gaussian draw per pixel). Each photometric step
/// clamps back into `[0,1]`.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<SegSample> {
    cfg.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let mut image = sample.image.data().to_vec();
    let mut mask = sample.mask.data().to_vec();

    if rng.gen_bool(cfg.flip_h_prob) {
        flip_planes(&mut image, h, w, false);
        flip_planes(&mut mask, h, w, false);
    }
    if rng.gen_bool(cfg.flip_v_prob) {
        flip_planes(&mut image, h, w, true);
        flip_planes(&mut mask, h, w, true);
    }

    let theta = if rng.gen_bool(cfg.rotate_prob) {
        rng.gen_range(-cfg.max_rotate_degrees..=cfg.max_rotate_degrees).to_radians()
    } else {
        0.0
    };
    let zoom = if rng.gen_bool(cfg.scale_prob) {
        rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1])
    } else {
        1.0
    };
    if theta != 0.0 || zoom != 1.0 {
        let (ri, rm) = affine_resample(&image, &mask, h, w, theta, zoom);
        image = ri;
        mask = rm;
    }

    if rng.gen_bool(cfg.brightness_prob) {
        let shift = rng.gen_range(-cfg.brightness_delta..=cfg.brightness_delta);
        for v in &mut image {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }
    if rng.gen_bool(cfg.contrast_prob) {
        let slope = 1.0 + rng.gen_range(-cfg.contrast_delta..=cfg.contrast_delta);
        for v in &mut image {
            *v = ((*v - 0.5) * slope + 0.5).clamp(0.0, 1.0);
        }
    }
    if rng.gen_bool(cfg.noise_prob) && cfg.noise_sigma > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.noise_sigma);
        if sigma > 0.0 {
            let gauss = Normal::new(0.0, sigma).expect("sigma > 0");
            for v in &mut image {
                *v = (*v + gauss.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }

    SegSample::new(
        Tensor::new(&[3, h, w], image)?,
        ClassMask::new(&[h, w], mask)?,
        sample.source_id.clone(),
    )
}

/// Reverses rows (`vertical`) or columns of every `h*w` plane in `data`.
fn flip_planes<T: Copy>(data: &mut [T], h: usize, w: usize, vertical: bool) {
    for plane in data.chunks_exact_mut(h * w) {
        if vertical {
            for y in 0..h / 2 {
                for x in 0..w {
                    plane.swap(y * w + x, (h - 1 - y) * w + x);
                }
            }
        } else {
            for row in plane.chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
}

/// Rotates by `theta` radians and zooms by `zoom` about the plane
/// center in one resampling pass. Image planes interpolate bilinearly,
/// the mask takes the nearest source pixel; samples falling outside the
/// source get 0. Positive `theta` turns content clockwise in raster
/// orientation (y down).
fn affine_resample(
    image: &[f64],
    mask: &[u8],
    h: usize,
    w: usize,
    theta: f64,
    zoom: f64,
) -> (Vec<f64>, Vec<u8>) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let inv = 1.0 / zoom;
    let channels = image.len() / (h * w);
    let mut out_image = vec![0.0; image.len()];
    let mut out_mask = vec![0u8; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + (cos * dx + sin * dy) * inv;
            let sy = cy + (cos * dy - sin * dx) * inv;

            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for c in 0..channels {
                let plane = &image[c * h * w..(c + 1) * h * w];
                let mut acc = 0.0;
                for (iy, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
                    for (ix, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
                        if (0..w as isize).contains(&ix) && (0..h as isize).contains(&iy) {
                            acc += plane[iy as usize * w + ix as usize] * wy * wx;
                        }
                    }
                }
                out_image[c * h * w + y * w + x] = acc;
            }

            let (nx, ny) = (sx.round() as isize, sy.round() as isize);
            if (0..w as isize).contains(&nx) && (0..h as isize).contains(&ny) {
                out_mask[y * w + x] = mask[ny as usize * w + nx as usize];
            }
        }
    }
    (out_image, out_mask)
}
