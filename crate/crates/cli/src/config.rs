use std::path::{Path, PathBuf};

use chexopt::data::{AugmentationPolicy, ClassCounts, SplitFractions};
use chexopt::optim::{AdamWConfig, LossScalerConfig, OptimizerKind};
use chexopt::train::{ScheduleKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// The experiment document. Every field has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub image_size: usize,
    /// Images per class when `counts` is absent.
    pub per_class: usize,
    /// Per-class counts in Cardiomegaly, COVID-19, Normal, Pneumonia, Tuberculosis order.
    pub counts: Option<ClassCounts>,
    /// Balancing target; defaults to the size of the largest class below the maximum.
    pub balance_target: Option<usize>,
    pub augmentation: AugmentationPolicy,
    pub split: SplitFractions,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            per_class: 500,
            counts: None,
            balance_target: None,
            augmentation: AugmentationPolicy::default(),
            split: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Preset name (`desk`, `full-table4`) or path to a profile JSON file.
    pub profile: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { profile: "desk".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub optimizer: OptimizerKind,
    pub adamw: AdamWConfig,
    pub schedule: ScheduleKind,
    pub eta_min: f64,
    pub ema_decay: Option<f64>,
    pub ema_warmup: bool,
    pub scaler: LossScalerConfig,
    pub exclude_norm_bias_decay: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            adamw: t.adamw,
            schedule: t.schedule,
            eta_min: t.eta_min,
            ema_decay: t.ema_decay,
            ema_warmup: t.ema_warmup,
            scaler: t.scaler,
            exclude_norm_bias_decay: t.exclude_norm_bias_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seeds: Vec<u64>,
    /// Runs trained concurrently.
    pub parallel: usize,
    /// Apply `data.augmentation` to training images on the fly.
    pub augment: bool,
    pub train_crop: bool,
    pub tencrop: bool,
    pub crop_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            seeds: vec![0],
            parallel: 1,
            augment: true,
            train_crop: t.train_crop,
            tencrop: t.tencrop,
            crop_fraction: t.crop_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub out_dir: PathBuf,
    pub bootstrap_iterations: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            bootstrap_iterations: 10_000,
        }
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl CliConfig {
    /// Desk-scale starting point: the desk training preset with nine seeds.
    pub fn desk() -> Self {
        let t = TrainConfig::desk();
        let mut c = Self::default();
        c.optim.adamw = t.adamw;
        c.optim.ema_warmup = t.ema_warmup;
        c.train.epochs = t.epochs;
        c.train.seeds = (0..9).collect();
        c
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(CliError::Config(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }

    /// Parses `text` on top of `base`. Keys missing from `text` keep the base value.
    pub fn layered(base: &Self, text: &str) -> Result<Self, CliError> {
        let top: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if !top.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(base).expect("config serializes");
        merge(&mut merged, top);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(preset: &str, path: Option<&Path>) -> Result<Self, CliError> {
        let base = Self::preset(preset)?;
        match path {
            None => Ok(base),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::layered(&base, &text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.split.validate()?;
        self.data.augmentation.validate()?;
        if self.train.seeds.is_empty() {
            return Err(CliError::Config("train.seeds must not be empty".into()));
        }
        if self.train.parallel == 0 {
            return Err(CliError::Config("train.parallel must be at least 1".into()));
        }
        self.train_config(self.train.seeds[0]).validate()?;
        Ok(())
    }

    /// Training configuration for one run.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            profile: self.model.profile.clone(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            eval_batch_size: self.train.eval_batch_size,
            optimizer: self.optim.optimizer,
            adamw: self.optim.adamw,
            schedule: self.optim.schedule,
            eta_min: self.optim.eta_min,
            ema_decay: self.optim.ema_decay,
            ema_warmup: self.optim.ema_warmup,
            scaler: self.optim.scaler,
            augmentation: self.train.augment.then_some(self.data.augmentation),
            exclude_norm_bias_decay: self.optim.exclude_norm_bias_decay,
            train_crop: self.train.train_crop,
            tencrop: self.train.tencrop,
            crop_fraction: self.train.crop_fraction,
            seed,
        }
    }

    pub fn counts(&self) -> ClassCounts {
        self.data.counts.unwrap_or([self.data.per_class; 5])
    }
}

/// Parsed `--seeds` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

pub fn parse_seed_list(text: &str) -> Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

/// `0..8` (inclusive), `3`, or `0,2,5`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("invalid seed list {text:?}; use e.g. 0..8, 4 or 0,2,5");
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() || seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_defaults() {
        let c = CliConfig::default();
        assert_eq!(c.optim.adamw.lr, 1e-4);
        assert_eq!(c.optim.adamw.weight_decay, 1e-5);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.optim.ema_decay, Some(0.999));
        assert_eq!(c.data.split, SplitFractions::default());
        assert_eq!(c.data.augmentation.rotation_deg, 15.0);
        assert_eq!(c.train_config(0), TrainConfig::default());
    }

    #[test]
    fn desk_preset_matches_library_preset() {
        let c = CliConfig::desk();
        assert_eq!(c.train_config(3), TrainConfig { seed: 3, ..TrainConfig::desk() });
        assert_eq!(c.train.seeds.len(), 9);
    }

    #[test]
    fn layering_keeps_unspecified_fields() {
        let c = CliConfig::layered(&CliConfig::desk(), r#"{"optim": {"adamw": {"weight_decay": 0.01}}, "train": {"epochs": 2}}"#)
            .unwrap();
        assert_eq!(c.optim.adamw.weight_decay, 0.01);
        assert_eq!(c.optim.adamw.lr, 1e-3);
        assert_eq!(c.train.epochs, 2);
        assert!(c.optim.ema_warmup);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let base = CliConfig::default();
        assert!(CliConfig::layered(&base, r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(CliConfig::layered(&base, r#"{"extra": {}}"#).is_err());
        assert!(CliConfig::layered(&base, r#"{"train": {"epochs": 0}}"#).is_err());
        assert!(CliConfig::layered(&base, r#"{"data": {"split": {"train": 0.9}}}"#).is_err());
        assert!(CliConfig::layered(&base, "[1]").is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..8").unwrap(), (0..9).collect::<Vec<_>>());
        assert_eq!(parse_seeds("0..=2").unwrap(), [0, 1, 2]);
        assert_eq!(parse_seeds("4").unwrap(), [4]);
        assert_eq!(parse_seeds("5, 1,9").unwrap(), [5, 1, 9]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
