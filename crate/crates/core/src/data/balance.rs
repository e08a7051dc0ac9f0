use std::fmt;

use rand::seq::{index, SliceRandom};

use crate::rng::{derive_seed, substream, Stream};

use super::augment::AugmentationPolicy;
use super::manifest::{DatasetManifest, Origin, SampleRecord};
use super::{ClassLabel, DataError, NUM_CLASSES};

/// Uniform sample of `target` distinct records without replacement, returned in input order.
pub fn undersample(records: &[SampleRecord], target: usize, seed: u64) -> Result<Vec<SampleRecord>, DataError> {
    let class = records.first().map(|r| r.label).unwrap_or(ClassLabel::Normal);
    if records.len() < target {
        return Err(DataError::TargetExceedsCount {
            class,
            count: records.len(),
            target,
        });
    }
    let mut rng = substream(seed, Stream::Balance, &[0]);
    let mut picked = index::sample(&mut rng, records.len(), target).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| records[i].clone()).collect())
}

/// Keeps every original and appends augmented copies, cycling over the
/// originals in a seed-shuffled order, until `target` records exist.
pub fn augment_to_target(records: &[SampleRecord], target: usize, seed: u64) -> Result<Vec<SampleRecord>, DataError> {
    let Some(first) = records.first() else {
        return Err(DataError::InconsistentManifest("cannot augment an empty class".into()));
    };
    let class = first.label;
    if records.len() > target {
        return Err(DataError::CountExceedsTarget {
            class,
            count: records.len(),
            target,
        });
    }
    if let Some(r) = records.iter().find(|r| r.origin != Origin::Original || r.label != class) {
        return Err(DataError::InconsistentManifest(format!(
            "{} is not an original {class} record",
            r.id
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Balance, &[1]));
    let mut out = records.to_vec();
    for k in 0..target - records.len() {
        let parent = &records[order[k % records.len()]];
        let round = k / records.len();
        out.push(SampleRecord {
            id: format!("{}-aug{round}", parent.id),
            path: None,
            label: class,
            origin: Origin::Augmented,
            split: parent.split,
            parent: Some(parent.id.clone()),
            aug_seed: Some(derive_seed(seed, Stream::Augment, &[k as u64])),
            image: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceAction {
    Undersampled,
    Augmented,
    Unchanged,
}

impl fmt::Display for BalanceAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BalanceAction::Undersampled => "Undersampled",
            BalanceAction::Augmented => "Augmented",
            BalanceAction::Unchanged => "Unchanged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceRow {
    pub class: ClassLabel,
    pub original: usize,
    pub augmented: usize,
    pub total: usize,
    pub action: BalanceAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    pub fn augmented_total(&self) -> usize {
        self.rows.iter().map(|r| r.augmented).sum()
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.total).sum()
    }

    pub fn is_noop(&self) -> bool {
        self.rows.iter().all(|r| r.action == BalanceAction::Unchanged)
    }
}

impl fmt::Display for BalanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| Class | Original | Augmented | Final | Action |")?;
        writeln!(f, "|---|---:|---:|---:|---|")?;
        for r in &self.rows {
            writeln!(f, "| {} | {} | {} | {} | {} |", r.class, r.original, r.augmented, r.total, r.action)?;
        }
        writeln!(f, "| Total | {} | {} | {} | Balanced |", self.rows.iter().map(|r| r.original).sum::<usize>(), self.augmented_total(), self.total())
    }
}

/// Undersamples classes above `target` and augments classes below it.
///
/// Kept records retain their relative order; augmented records follow, class by class.
pub fn balance_dataset(
    manifest: &DatasetManifest,
    target: usize,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<(DatasetManifest, BalanceReport), DataError> {
    if target == 0 {
        return Err(DataError::InvalidFractions("balance target must be at least 1".into()));
    }
    policy.validate()?;
    let counts = manifest.class_counts();
    if let Some(c) = ClassLabel::ALL.into_iter().find(|c| counts[c.index()] == 0) {
        return Err(DataError::EmptyClass(c));
    }
    let has_augmented = manifest.records.iter().any(|r| r.origin == Origin::Augmented);
    let needs_change = counts.iter().any(|&n| n != target);
    if has_augmented && needs_change && manifest.policy != *policy {
        return Err(DataError::InconsistentManifest(
            "manifest already holds augmented records made with a different policy".into(),
        ));
    }

    let mut keep = vec![true; manifest.records.len()];
    let mut appended = Vec::new();
    let mut rows = Vec::with_capacity(NUM_CLASSES);
    for class in ClassLabel::ALL {
        let idx: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| manifest.records[i].label == class)
            .collect();
        let members: Vec<SampleRecord> = idx.iter().map(|&i| manifest.records[i].clone()).collect();
        let class_seed = derive_seed(seed, Stream::Balance, &[class.index() as u64]);
        let n = members.len();
        let (augmented, action) = if n > target {
            let chosen = undersample(&members, target, class_seed)?;
            let chosen_ids: std::collections::HashSet<&str> = chosen.iter().map(|r| r.id.as_str()).collect();
            for &i in &idx {
                keep[i] = chosen_ids.contains(manifest.records[i].id.as_str());
            }
            (0, BalanceAction::Undersampled)
        } else if n < target {
            let expanded = augment_to_target(&members, target, class_seed)?;
            appended.extend(expanded.into_iter().skip(n));
            (target - n, BalanceAction::Augmented)
        } else {
            (0, BalanceAction::Unchanged)
        };
        rows.push(BalanceRow {
            class,
            original: n,
            augmented,
            total: target,
            action,
        });
    }

    let mut records: Vec<SampleRecord> = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    records.extend(appended);
    let out = DatasetManifest {
        seed: manifest.seed,
        image_size: manifest.image_size,
        policy: if needs_change { *policy } else { manifest.policy },
        balance_seed: Some(seed),
        split_seed: manifest.split_seed,
        records,
    };
    Ok((out, BalanceReport { rows }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn class_records(class: ClassLabel, n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| SampleRecord::original(format!("{}-{i:05}", class.slug()), class))
            .collect()
    }

    #[test]
    fn undersample_is_distinct_and_ordered() {
        let recs = class_records(ClassLabel::Normal, 6036);
        let picked = undersample(&recs, 362, 4).unwrap();
        let ids: HashSet<&str> = picked.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), 362);
        assert!(picked.windows(2).all(|w| w[0].id < w[1].id));
        assert_eq!(undersample(&recs, 362, 4).unwrap(), picked);
        assert_ne!(undersample(&recs, 362, 5).unwrap(), picked);
        assert_eq!(undersample(&recs[..10], 10, 1).unwrap(), recs[..10].to_vec());
        assert!(undersample(&recs[..10], 11, 1).is_err());
    }

    #[test]
    fn augmentation_cycles_round_robin() {
        let recs = class_records(ClassLabel::Pneumonia, 3);
        let out = augment_to_target(&recs, 8, 2).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(&out[..3], &recs[..]);
        let parents: Vec<&str> = out[3..].iter().map(|r| r.parent.as_deref().unwrap()).collect();
        // Each original is used once per round.
        assert_eq!(parents[..3].iter().collect::<HashSet<_>>().len(), 3);
        assert_eq!(parents[3..5], parents[..2]);
        assert!(out[3..].iter().all(|r| r.origin == Origin::Augmented && r.aug_seed.is_some()));
        assert!(augment_to_target(&[], 3, 0).is_err());
        assert!(augment_to_target(&recs, 3, 0).unwrap().len() == 3);
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let m = DatasetManifest::from_counts(&[4; 5]);
        let (out, report) = balance_dataset(&m, 4, &AugmentationPolicy::default(), 11).unwrap();
        assert!(report.is_noop());
        assert_eq!(out.records, m.records);
        assert_eq!(out.balance_seed, Some(11));
    }

    #[test]
    fn missing_class_is_named() {
        let m = DatasetManifest::from_counts(&[4, 4, 0, 4, 4]);
        assert!(matches!(
            balance_dataset(&m, 4, &AugmentationPolicy::default(), 0),
            Err(DataError::EmptyClass(ClassLabel::Normal))
        ));
    }
}
