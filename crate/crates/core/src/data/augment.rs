use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

use super::image::GrayImage;
use super::DataError;

/// Random flip, rotation and intensity jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub hflip_prob: f64,
    /// Rotation angle drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            rotation_deg: 15.0,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ok = (0.0..=1.0).contains(&self.hflip_prob)
            && (0.0..=180.0).contains(&self.rotation_deg)
            && (0.0..1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(DataError::InvalidPolicy(format!("{self:?}")))
        }
    }
}

fn symmetric(rng: &mut Rng, half_width: f64) -> f64 {
    // Always consume one draw so the stream position does not depend on the policy.
    let u: f64 = rng.random();
    (2.0 * u - 1.0) * half_width
}

/// Flip → rotate → brightness → contrast (about the image mean) → clamp to `[0, 255]`.
///
/// Exactly four values are drawn from `rng` per call.
pub fn apply_augmentation(img: &GrayImage, policy: &AugmentationPolicy, rng: &mut Rng) -> GrayImage {
    let flip = rng.random::<f64>() < policy.hflip_prob;
    let angle = symmetric(rng, policy.rotation_deg);
    let bright = 1.0 + symmetric(rng, policy.brightness);
    let contrast = 1.0 + symmetric(rng, policy.contrast);

    let base = if flip { img.hflip() } else { img.clone() };
    let mut v = if angle != 0.0 {
        rotate_bilinear(&base, angle)
    } else {
        base.to_f64()
    };
    if bright != 1.0 {
        v.iter_mut().for_each(|p| *p *= bright);
    }
    if contrast != 1.0 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|p| *p = mean + contrast * (*p - mean));
    }
    GrayImage::from_f64(img.width(), img.height(), &v).expect("same dimensions")
}

/// Rotates counter-clockwise by `degrees` about the image centre with bilinear
/// sampling; samples falling outside the frame read as 0.
pub fn rotate_bilinear(img: &GrayImage, degrees: f64) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let src = img.to_f64();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse map: rotate the output coordinate back by -angle (image y points down).
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out[y * w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}
