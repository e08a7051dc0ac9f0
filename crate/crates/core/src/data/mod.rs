//! Synthetic data, class balancing, splitting, augmentation and evaluation crops.

mod augment;
mod balance;
mod image;
mod manifest;
mod split;
mod synth;
mod tencrop;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{apply_augmentation, rotate_bilinear, AugmentationPolicy};
pub use balance::{augment_to_target, balance_dataset, undersample, BalanceAction, BalanceReport, BalanceRow};
pub use image::{decode_pgm, encode_pgm, read_pgm, write_pgm, GrayImage};
pub use manifest::{DatasetManifest, Origin, SampleRecord, Split};
pub use split::{leakage_report, split_counts, stratified_split, LeakageReport, SplitFractions};
pub use synth::{generate_synthetic, render_sample};
pub use tencrop::{center_crop, crop_size, random_crop, tencrop, TENCROP_FRACTION};

use crate::Tensor;

pub const NUM_CLASSES: usize = 5;

/// Per-class counts in [`ClassLabel::ALL`] order.
pub type ClassCounts = [usize; NUM_CLASSES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Cardiomegaly,
    #[serde(rename = "COVID-19")]
    Covid19,
    Normal,
    Pneumonia,
    Tuberculosis,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Cardiomegaly,
        ClassLabel::Covid19,
        ClassLabel::Normal,
        ClassLabel::Pneumonia,
        ClassLabel::Tuberculosis,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Cardiomegaly => "Cardiomegaly",
            ClassLabel::Covid19 => "COVID-19",
            ClassLabel::Normal => "Normal",
            ClassLabel::Pneumonia => "Pneumonia",
            ClassLabel::Tuberculosis => "Tuberculosis",
        }
    }

    /// Lower-case form used for ids and directory names.
    pub fn slug(self) -> &'static str {
        match self {
            ClassLabel::Cardiomegaly => "cardiomegaly",
            ClassLabel::Covid19 => "covid-19",
            ClassLabel::Normal => "normal",
            ClassLabel::Pneumonia => "pneumonia",
            ClassLabel::Tuberculosis => "tuberculosis",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.slug().replace('-', "") == norm)
            .ok_or_else(|| DataError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("PGM parse error at byte {offset}: {message}")]
    Pgm { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image size {0} is below the minimum of 32")]
    ImageTooSmall(usize),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("class {0} has no records")]
    EmptyClass(ClassLabel),
    #[error("class {class} has {count} records, fewer than the target {target}")]
    TargetExceedsCount { class: ClassLabel, count: usize, target: usize },
    #[error("class {class} has {count} records, more than the target {target}")]
    CountExceedsTarget { class: ClassLabel, count: usize, target: usize },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("crop of {crop} pixels does not fit a {side}-pixel image")]
    CropTooLarge { crop: usize, side: usize },
    #[error("record {0} has no image source")]
    ImageUnavailable(String),
    #[error("inconsistent manifest: {0}")]
    InconsistentManifest(String),
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Stacks images into an `N×3×H×W` tensor scaled to `[0, 1]`, replicating the
/// gray channel three times.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor, DataError> {
    let first = images
        .first()
        .ok_or_else(|| DataError::InvalidImage("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let plane = w * h;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(DataError::InvalidImage(format!(
                "batch mixes {w}×{h} and {}×{}",
                img.width(),
                img.height()
            )));
        }
        for _ in 0..3 {
            data.extend(img.pixels().iter().map(|&p| p as f64 / 255.0));
        }
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data).expect("length matches shape"))
}
