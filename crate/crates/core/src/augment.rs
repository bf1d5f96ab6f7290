//! Training-time augmentation: random horizontal flips plus brightness,
//! contrast and saturation jitter. Nothing here rotates, flips vertically or
//! adds images to the dataset.
//!
//! Jitter formulas, applied in this order with clamping to `[0, 1]` after each:
//!
//! * brightness `b`: `x * b`
//! * contrast `c`: `c * x + (1 - c) * m`, `m` the mean luma of the image
//! * saturation `s`: `s * x + (1 - s) * g`, `g` the luma of the pixel
//!
//! Luma is `0.299 R + 0.587 G + 0.114 B`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_probability: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            brightness_range: (0.8, 1.2),
            contrast_range: (0.8, 1.2),
            saturation_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// Policy that always yields the identity transform.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Parameter(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        for (name, (lo, hi)) in [
            ("brightness", self.brightness_range),
            ("contrast", self.contrast_range),
            ("saturation", self.saturation_range),
        ] {
            if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
                return Err(Error::Parameter(format!(
                    "{name} range [{lo}, {hi}] must be positive and contain 1"
                )));
            }
        }
        Ok(())
    }
}

pub fn hflip(image: &Image) -> Image {
    let w = image.width();
    Image::from_fn(w, image.height(), |x, y| image.get(w - 1 - x, y))
}

fn luma(p: [f32; 3]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

/// Brightness scaling; `b = 0` is accepted here and blacks the image out.
pub fn adjust_brightness(image: &Image, b: f32) -> Image {
    let mut out = image.clone();
    if b != 1.0 {
        for v in out.data_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn adjust_contrast(image: &Image, c: f32) -> Image {
    let mut out = image.clone();
    if c == 1.0 || image.is_empty() {
        return out;
    }
    let n = (image.width() * image.height()) as f64;
    let mean = image
        .data()
        .chunks_exact(3)
        .map(|p| f64::from(luma([p[0], p[1], p[2]])))
        .sum::<f64>()
        / n;
    let mean = mean as f32;
    for v in out.data_mut() {
        *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0);
    }
    out
}

pub fn adjust_saturation(image: &Image, s: f32) -> Image {
    let mut out = image.clone();
    if s == 1.0 {
        return out;
    }
    for px in out.data_mut().chunks_exact_mut(3) {
        let g = luma([px[0], px[1], px[2]]);
        for v in px.iter_mut() {
            *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn color_jitter(image: &Image, b: f32, c: f32, s: f32) -> Result<Image> {
    for (name, f) in [("brightness", b), ("contrast", c), ("saturation", s)] {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::Parameter(format!("{name} factor {f} must be positive")));
        }
    }
    let out = adjust_brightness(image, b);
    let out = adjust_contrast(&out, c);
    Ok(adjust_saturation(&out, s))
}

/// One sampled augmentation: optional mirror, then colour jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl TransformRecord {
    pub const IDENTITY: TransformRecord = TransformRecord {
        flip: false,
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let jittered = color_jitter(image, self.brightness, self.contrast, self.saturation)?;
        Ok(if self.flip { hflip(&jittered) } else { jittered })
    }
}

/// Seeded transform sampler. Each worker gets its own ChaCha stream derived
/// from the policy seed and the worker index.
pub struct AugmentSampler {
    policy: AugmentPolicy,
    rng: ChaCha8Rng,
}

impl AugmentSampler {
    pub fn new(policy: AugmentPolicy, worker: u64) -> Result<Self> {
        policy.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        rng.set_stream(worker);
        Ok(Self { policy, rng })
    }

    pub fn sample(&mut self) -> TransformRecord {
        let p = self.policy;
        let flip = self.rng.random::<f64>() < p.flip_probability;
        TransformRecord {
            flip,
            brightness: self.factor(p.brightness_range),
            contrast: self.factor(p.contrast_range),
            saturation: self.factor(p.saturation_range),
        }
    }

    fn factor(&mut self, (lo, hi): (f64, f64)) -> f32 {
        // draw even for degenerate ranges so the stream position is policy-independent
        let u = self.rng.random::<f64>();
        if lo == hi {
            lo as f32
        } else {
            (lo + (hi - lo) * u) as f32
        }
    }
}
