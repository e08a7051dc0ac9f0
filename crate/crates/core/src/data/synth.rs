use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::rng::{substream, Rng, Stream};

use super::image::GrayImage;
use super::manifest::{DatasetManifest, SampleRecord};
use super::{ClassCounts, ClassLabel, DataError};

const NOISE_SIGMA: f64 = 8.0;

fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)
}

/// Soft indicator: 1 well inside the unit level set, 0 outside, linear ramp of width `edge`.
fn inside(level: f64, edge: f64) -> f64 {
    ((1.0 - level) / edge).clamp(0.0, 1.0)
}

struct Anatomy {
    lung_l: (f64, f64),
    lung_r: (f64, f64),
    lung_r_xy: (f64, f64),
    rib_freq: f64,
    rib_phase: f64,
    rib_bend: f64,
    heart: (f64, f64, f64, f64),
}

impl Anatomy {
    fn sample(rng: &mut Rng) -> Self {
        let mut j = |s: f64| rng.random_range(-s..=s);
        Self {
            lung_l: (0.30 + j(0.02), 0.47 + j(0.02)),
            lung_r: (0.70 + j(0.02), 0.47 + j(0.02)),
            lung_r_xy: (0.15 + j(0.01), 0.30 + j(0.02)),
            rib_freq: 7.0 + j(0.6),
            rib_phase: j(0.5),
            rib_bend: 1.5 + j(0.3),
            heart: (0.53 + j(0.02), 0.63 + j(0.02), 0.10 + j(0.01), 0.09 + j(0.01)),
        }
    }

    /// Background intensity at normalized coordinates: body, dark lung fields
    /// with rib bands, and a normal-size heart shadow.
    fn base(&self, u: f64, v: f64) -> f64 {
        let body = inside(ellipse(u, v, 0.5, 0.52, 0.46, 0.50), 0.08);
        let mut value = 30.0 + 120.0 * body;
        let (rx, ry) = self.lung_r_xy;
        for (cx, cy) in [self.lung_l, self.lung_r] {
            let lung = inside(ellipse(u, v, cx, cy, rx, ry), 0.15);
            if lung > 0.0 {
                let bend = self.rib_bend * (u - cx).powi(2);
                let band = 0.5 + 0.5 * (2.0 * PI * (self.rib_freq * (v + bend) + self.rib_phase)).cos();
                value -= lung * (70.0 - 28.0 * band.powi(3));
            }
        }
        let (hx, hy, hrx, hry) = self.heart;
        value += 45.0 * inside(ellipse(u, v, hx, hy, hrx, hry), 0.2);
        value
    }
}

/// Class-specific structure added on top of the shared background.
fn motif(class: ClassLabel, rng: &mut Rng) -> Box<dyn Fn(f64, f64) -> f64 + Send + Sync> {
    let mut j = |s: f64| rng.random_range(-s..=s);
    let side = if j(1.0) < 0.0 { -1.0 } else { 1.0 };
    match class {
        ClassLabel::Cardiomegaly => {
            let (cx, cy) = (0.52 + j(0.02), 0.62 + j(0.02));
            let scale = 1.0 + j(0.08);
            let (rx, ry) = (0.21 * scale, 0.17 * scale);
            Box::new(move |u, v| 55.0 * inside(ellipse(u, v, cx, cy, rx, ry), 0.15))
        }
        ClassLabel::Covid19 => {
            let (dx, cy, sigma) = (0.30 + j(0.02), 0.60 + j(0.04), 0.065 + j(0.01));
            let amp = 60.0 + j(8.0);
            Box::new(move |u, v| {
                let g = |cx: f64| (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
                amp * (g(0.5 - dx) + g(0.5 + dx))
            })
        }
        ClassLabel::Normal => Box::new(|_, _| 0.0),
        ClassLabel::Pneumonia => {
            let apex = (0.5 + side * (0.10 + j(0.02)), 0.45 + j(0.03));
            let dir = PI / 2.0 - side * (0.6 + j(0.12));
            let (half_angle, reach) = (0.38 + j(0.05), 0.26 + j(0.03));
            let amp = 55.0 + j(8.0);
            Box::new(move |u, v| {
                let (du, dv) = (u - apex.0, v - apex.1);
                let r = (du * du + dv * dv).sqrt();
                let mut diff = dv.atan2(du) - dir;
                diff = (diff + PI).rem_euclid(2.0 * PI) - PI;
                let radial = ((reach - r) / 0.03).clamp(0.0, 1.0);
                let angular = ((half_angle - diff.abs()) / 0.08).clamp(0.0, 1.0);
                amp * radial * angular
            })
        }
        ClassLabel::Tuberculosis => {
            let (cx, cy) = (0.5 + side * (0.19 + j(0.02)), 0.28 + j(0.02));
            let (radius, width) = (0.065 + j(0.008), 0.018);
            let amp = 70.0 + j(8.0);
            Box::new(move |u, v| {
                let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                let ring = (1.0 - ((r - radius) / width).powi(2)).max(0.0);
                let hole = if r < radius - width { -15.0 } else { 0.0 };
                amp * ring + hole
            })
        }
    }
}

/// Deterministic synthetic radiograph for `(seed, class, index)`.
pub fn render_sample(class: ClassLabel, index: usize, image_size: usize, seed: u64) -> Result<GrayImage, DataError> {
    if image_size < 32 {
        return Err(DataError::ImageTooSmall(image_size));
    }
    let mut rng = substream(seed, Stream::Data, &[class.index() as u64, index as u64]);
    let anatomy = Anatomy::sample(&mut rng);
    let extra = motif(class, &mut rng);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let s = image_size as f64;
    let mut values = Vec::with_capacity(image_size * image_size);
    for y in 0..image_size {
        for x in 0..image_size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            values.push(anatomy.base(u, v) + extra(u, v) + noise.sample(&mut rng));
        }
    }
    GrayImage::from_f64(image_size, image_size, &values)
}

/// Generates `n_per_class[c]` original images for every class, held in memory.
pub fn generate_synthetic(n_per_class: &ClassCounts, image_size: usize, seed: u64) -> Result<DatasetManifest, DataError> {
    if image_size < 32 {
        return Err(DataError::ImageTooSmall(image_size));
    }
    let jobs: Vec<(ClassLabel, usize)> = ClassLabel::ALL
        .iter()
        .flat_map(|&c| (0..n_per_class[c.index()]).map(move |i| (c, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(class, i)| {
            let img = render_sample(class, i, image_size, seed)?;
            let mut r = SampleRecord::original(format!("{}-{i:05}", class.slug()), class);
            r.image = Some(Arc::new(img));
            Ok(r)
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(DatasetManifest::new(seed, image_size, records))
}
