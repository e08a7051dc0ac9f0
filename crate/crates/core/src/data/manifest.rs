use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

use super::augment::{apply_augmentation, AugmentationPolicy};
use super::image::{read_pgm, write_pgm, GrayImage};
use super::{ClassCounts, ClassLabel, DataError, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

/// One image of the dataset. Augmented records may omit pixels and path; their
/// image is then re-derived from the parent and `aug_seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub label: ClassLabel,
    pub origin: Origin,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug_seed: Option<u64>,
    #[serde(skip)]
    pub image: Option<Arc<GrayImage>>,
}

impl PartialEq for SampleRecord {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.path == other.path
            && self.label == other.label
            && self.origin == other.origin
            && self.split == other.split
            && self.parent == other.parent
            && self.aug_seed == other.aug_seed
    }
}

impl SampleRecord {
    pub fn original(id: impl Into<String>, label: ClassLabel) -> Self {
        Self {
            id: id.into(),
            path: None,
            label,
            origin: Origin::Original,
            split: Split::Unassigned,
            parent: None,
            aug_seed: None,
            image: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: usize,
    pub policy: AugmentationPolicy,
    pub balance_seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub records: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    seed: u64,
    image_size: usize,
    #[serde(default)]
    augmentation: AugmentationPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    balance_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split_seed: Option<u64>,
    counts: BTreeMap<ClassLabel, usize>,
    records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(seed: u64, image_size: usize, records: Vec<SampleRecord>) -> Self {
        Self {
            seed,
            image_size,
            policy: AugmentationPolicy::default(),
            balance_seed: None,
            split_seed: None,
            records,
        }
    }

    /// Records-only manifest with the given number of originals per class.
    pub fn from_counts(counts: &ClassCounts) -> Self {
        let mut records = Vec::with_capacity(counts.iter().sum());
        for class in ClassLabel::ALL {
            for i in 0..counts[class.index()] {
                records.push(SampleRecord::original(format!("{}-{i:05}", class.slug()), class));
            }
        }
        Self::new(0, 0, records)
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut c = [0; NUM_CLASSES];
        self.records.iter().for_each(|r| c[r.label.index()] += 1);
        c
    }

    pub fn augmented_counts(&self) -> ClassCounts {
        let mut c = [0; NUM_CLASSES];
        self.records
            .iter()
            .filter(|r| r.origin == Origin::Augmented)
            .for_each(|r| c[r.label.index()] += 1);
        c
    }

    /// Per-class counts restricted to one split.
    pub fn split_counts(&self, split: Split) -> ClassCounts {
        let mut c = [0; NUM_CLASSES];
        self.records
            .iter()
            .filter(|r| r.split == split)
            .for_each(|r| c[r.label.index()] += 1);
        c
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Checks id uniqueness and parent links.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            if seen.insert(r.id.as_str(), r).is_some() {
                return Err(DataError::InconsistentManifest(format!("duplicate id {}", r.id)));
            }
        }
        for r in &self.records {
            match (r.origin, &r.parent) {
                (Origin::Original, None) => {}
                (Origin::Original, Some(_)) => {
                    return Err(DataError::InconsistentManifest(format!("original {} has a parent", r.id)));
                }
                (Origin::Augmented, None) => {
                    return Err(DataError::InconsistentManifest(format!("augmented {} has no parent", r.id)));
                }
                (Origin::Augmented, Some(p)) => match seen.get(p.as_str()) {
                    Some(parent) if parent.origin == Origin::Original && parent.label == r.label => {}
                    _ => {
                        return Err(DataError::InconsistentManifest(format!(
                            "augmented {} must link to an original of the same class, found {p}",
                            r.id
                        )));
                    }
                },
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        let counts = ClassLabel::ALL
            .iter()
            .map(|&c| (c, self.class_counts()[c.index()]))
            .collect();
        let file = ManifestFile {
            seed: self.seed,
            image_size: self.image_size,
            augmentation: self.policy,
            balance_seed: self.balance_seed,
            split_seed: self.split_seed,
            counts,
            records: self.records.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: ManifestFile = serde_json::from_str(text)?;
        let m = Self {
            seed: file.seed,
            image_size: file.image_size,
            policy: file.augmentation,
            balance_seed: file.balance_seed,
            split_seed: file.split_seed,
            records: file.records,
        };
        let actual = m.class_counts();
        for c in ClassLabel::ALL {
            let declared = file.counts.get(&c).copied().unwrap_or(0);
            if declared != actual[c.index()] {
                return Err(DataError::InconsistentManifest(format!(
                    "counts declare {declared} {c} records, found {}",
                    actual[c.index()]
                )));
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| DataError::io(path, e))
    }

    /// Ensures every record carries pixels: reads `path`s relative to `root`,
    /// then derives augmented images from their parents.
    pub fn materialize(&mut self, root: &Path) -> Result<(), DataError> {
        let loaded: Vec<Result<Option<Arc<GrayImage>>, DataError>> = self
            .records
            .par_iter()
            .map(|r| match (&r.image, &r.path) {
                (Some(img), _) => Ok(Some(img.clone())),
                (None, Some(p)) => read_pgm(&root.join(p)).map(|i| Some(Arc::new(i))),
                (None, None) => Ok(None),
            })
            .collect();
        for (r, img) in self.records.iter_mut().zip(loaded) {
            r.image = img?;
        }
        let by_id: HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let policy = self.policy;
        let derived: Vec<(usize, Result<Arc<GrayImage>, DataError>)> = self
            .records
            .par_iter()
            .enumerate()
            .filter(|(_, r)| r.image.is_none())
            .map(|(i, r)| {
                let img = match (&r.parent, r.aug_seed) {
                    (Some(p), Some(seed)) => by_id
                        .get(p.as_str())
                        .and_then(|&pi| self.records[pi].image.as_ref())
                        .map(|parent| Arc::new(derive_augmented(parent, &policy, seed)))
                        .ok_or_else(|| DataError::ImageUnavailable(r.id.clone())),
                    _ => Err(DataError::ImageUnavailable(r.id.clone())),
                };
                (i, img)
            })
            .collect();
        for (i, img) in derived {
            self.records[i].image = Some(img?);
        }
        Ok(())
    }

    /// Writes every image under `root/images/<class>/<id>.pgm`, points each
    /// record's `path` at it, and saves `root/manifest.json`.
    pub fn write_to_dir(&mut self, root: &Path) -> Result<(), DataError> {
        self.materialize(root)?;
        let results: Vec<Result<String, DataError>> = self
            .records
            .par_iter()
            .map(|r| {
                let rel = format!("images/{}/{}.pgm", r.label.slug(), r.id);
                write_pgm(r.image.as_ref().expect("materialized"), &root.join(&rel))?;
                Ok(rel)
            })
            .collect();
        for (r, rel) in self.records.iter_mut().zip(results) {
            r.path = Some(rel?);
        }
        self.save(&root.join("manifest.json"))
    }

    /// Drops in-memory pixels (paths and derivation info are kept).
    pub fn forget_images(&mut self) {
        self.records.iter_mut().for_each(|r| r.image = None);
    }

    pub fn ids(&self, split: Split) -> HashSet<&str> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.as_str())
            .collect()
    }
}

/// Augmented image of `parent` for a record's `aug_seed`.
pub(crate) fn derive_augmented(parent: &GrayImage, policy: &AugmentationPolicy, aug_seed: u64) -> GrayImage {
    let mut rng = Rng::seed_from_u64(aug_seed);
    apply_augmentation(parent, policy, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetManifest {
        let mut m = DatasetManifest::from_counts(&[2, 1, 1, 1, 1]);
        let mut aug = SampleRecord::original("cardiomegaly-00000-aug0", ClassLabel::Cardiomegaly);
        aug.origin = Origin::Augmented;
        aug.parent = Some("cardiomegaly-00000".into());
        aug.aug_seed = Some(9);
        m.records.push(aug);
        m
    }

    #[test]
    fn json_round_trip_and_counts() {
        let m = small();
        let text = m.to_json().unwrap();
        assert!(text.contains("\"COVID-19\": 1"));
        assert_eq!(DatasetManifest::from_json(&text).unwrap(), m);
        let tampered = text.replace("\"Normal\": 1", "\"Normal\": 2");
        assert!(matches!(
            DatasetManifest::from_json(&tampered),
            Err(DataError::InconsistentManifest(_))
        ));
    }

    #[test]
    fn validation_rules() {
        let mut m = small();
        m.records[6].parent = Some("normal-00000".into());
        assert!(m.validate().is_err());
        let mut m = small();
        m.records[1].id = m.records[0].id.clone();
        assert!(m.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn augmented_images_are_derived_from_parents() {
        let mut m = small();
        for r in m.records.iter_mut().filter(|r| r.origin == Origin::Original) {
            r.image = Some(Arc::new(GrayImage::filled(32, 32, 100)));
        }
        m.materialize(Path::new(".")).unwrap();
        let img = m.records[6].image.as_ref().unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));

        let mut missing = small();
        assert!(matches!(
            missing.materialize(Path::new(".")),
            Err(DataError::ImageUnavailable(_))
        ));
    }
}
