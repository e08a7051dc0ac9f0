use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{substream, Stream};

use super::manifest::{DatasetManifest, Origin, Split};
use super::{ClassLabel, DataError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.10,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidFractions(format!(
                "{} / {} / {} must be non-negative and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Half-up rounding of `fraction·n`, tolerant of the representation error in
/// decimal fractions (so `0.7·5` rounds to 4, not 3).
fn round_share(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 0.5 + 1e-9).floor() as usize
}

/// `(train, val, test)` sizes for a class of `n` records.
pub fn split_counts(n: usize, fractions: &SplitFractions) -> Result<(usize, usize, usize), DataError> {
    fractions.validate()?;
    let train = round_share(fractions.train, n);
    let val = round_share(fractions.val, n);
    if train + val > n {
        return Err(DataError::InvalidFractions(format!(
            "{train} train + {val} val exceed the {n} records of a class"
        )));
    }
    Ok((train, val, n - train - val))
}

/// Assigns every record a split, class by class, after a seeded shuffle.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    fractions.validate()?;
    let mut out = manifest.clone();
    for class in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..out.records.len())
            .filter(|&i| out.records[i].label == class)
            .collect();
        let (train, val, _) = split_counts(idx.len(), fractions)?;
        idx.shuffle(&mut substream(seed, Stream::Split, &[class.index() as u64]));
        for (k, &i) in idx.iter().enumerate() {
            out.records[i].split = if k < train {
                Split::Train
            } else if k < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out.split_seed = Some(seed);
    Ok(out)
}

/// Augmented records whose split differs from their parent's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub augmented: usize,
    pub cross_split: usize,
    /// Augmented records outside train whose parent is in train.
    pub train_parent_in_eval: usize,
}

pub fn leakage_report(manifest: &DatasetManifest) -> LeakageReport {
    let split_of: HashMap<&str, Split> = manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.split))
        .collect();
    let mut rep = LeakageReport {
        augmented: 0,
        cross_split: 0,
        train_parent_in_eval: 0,
    };
    for r in manifest.records.iter().filter(|r| r.origin == Origin::Augmented) {
        rep.augmented += 1;
        let Some(ps) = r.parent.as_deref().and_then(|p| split_of.get(p)) else {
            continue;
        };
        if *ps != r.split {
            rep.cross_split += 1;
            if *ps == Split::Train && matches!(r.split, Split::Val | Split::Test) {
                rep.train_parent_in_eval += 1;
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_rounding_rule() {
        let f = SplitFractions::default();
        assert_eq!(split_counts(3616, &f).unwrap(), (2531, 362, 723));
        assert_eq!(split_counts(10, &f).unwrap(), (7, 1, 2));
        assert_eq!(split_counts(5, &f).unwrap(), (4, 1, 0));
        assert_eq!(split_counts(500, &f).unwrap(), (350, 50, 100));
    }

    #[test]
    fn malformed_fractions() {
        let bad = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(split_counts(10, &bad).is_err());
        let neg = SplitFractions {
            train: 1.1,
            val: -0.1,
            test: 0.0,
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn split_partitions_each_class() {
        let m = DatasetManifest::from_counts(&[10; 5]);
        let s = stratified_split(&m, &SplitFractions::default(), 3).unwrap();
        assert_eq!(s.split_counts(Split::Train), [7; 5]);
        assert_eq!(s.split_counts(Split::Val), [1; 5]);
        assert_eq!(s.split_counts(Split::Test), [2; 5]);
        assert_eq!(s.split_counts(Split::Unassigned), [0; 5]);
        assert_eq!(stratified_split(&m, &SplitFractions::default(), 3).unwrap(), s);
    }
}
