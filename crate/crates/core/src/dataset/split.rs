use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::labels::{Class, Modality};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub per_class_test_eyes: usize,
    pub per_class_val_eyes: usize,
    /// Set by the caller from the global seed, never from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            per_class_test_eyes: 20,
            per_class_val_eyes: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Partitions records by eye. Test and validation eyes are drawn per class,
/// only from real eyes that have both a CFP and an OCT image; every other
/// record goes to training.
pub fn split_by_eye(records: &[ImageRecord], spec: &SplitSpec) -> Result<Split> {
    super::validate_records(records)?;
    let mut modalities: BTreeMap<&str, (Class, BTreeSet<Modality>, bool)> = BTreeMap::new();
    for r in records {
        let e = modalities
            .entry(&r.eye_id)
            .or_insert_with(|| (r.label, BTreeSet::new(), true));
        e.1.insert(r.modality);
        e.2 &= r.is_real();
    }
    let mut test_eyes = BTreeSet::new();
    let mut val_eyes = BTreeSet::new();
    for class in Class::ALL {
        let mut eligible: Vec<&str> = modalities
            .iter()
            .filter(|(_, (c, m, real))| *c == class && m.len() == 2 && *real)
            .map(|(eye, _)| *eye)
            .collect();
        let need = spec.per_class_test_eyes + spec.per_class_val_eyes;
        if eligible.len() < need {
            return Err(Error::Class {
                class: class.name().into(),
                message: format!(
                    "{} eligible eyes with both modalities, {need} needed for test and validation",
                    eligible.len()
                ),
            });
        }
        let mut rng = seed::rng(spec.seed, &[seed::tag("split"), class.index() as u64]);
        eligible.shuffle(&mut rng);
        test_eyes.extend(eligible[..spec.per_class_test_eyes].iter().copied());
        val_eyes.extend(eligible[spec.per_class_test_eyes..need].iter().copied());
    }
    let mut split = Split::default();
    for r in records {
        let bucket = if test_eyes.contains(r.eye_id.as_str()) {
            &mut split.test
        } else if val_eyes.contains(r.eye_id.as_str()) {
            &mut split.val
        } else {
            &mut split.train
        };
        bucket.push(r.clone());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::rec;
    use crate::labels::Provenance;

    fn toy(eyes_per_class: usize) -> Vec<ImageRecord> {
        let mut out = Vec::new();
        for c in Class::ALL {
            for e in 0..eyes_per_class {
                let eye = format!("{c}-{e}");
                out.push(rec(&format!("{eye}-f"), &eye, Modality::Cfp, c, Provenance::Real));
                out.push(rec(&format!("{eye}-o"), &eye, Modality::Oct, c, Provenance::Real));
            }
        }
        out
    }

    #[test]
    fn zero_quota_keeps_everything_in_train() {
        let spec = SplitSpec {
            per_class_test_eyes: 0,
            per_class_val_eyes: 0,
            seed: 1,
        };
        let s = split_by_eye(&toy(3), &spec).unwrap();
        assert_eq!(s.train.len(), 24);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn quota_too_large_names_the_class() {
        let mut records = toy(3);
        records.retain(|r| !(r.label == Class::Pcv && r.eye_id.ends_with('2') && r.modality == Modality::Oct));
        let spec = SplitSpec {
            per_class_test_eyes: 3,
            per_class_val_eyes: 0,
            seed: 1,
        };
        let err = split_by_eye(&records, &spec).unwrap_err().to_string();
        assert!(err.contains("PCV"), "{err}");
    }

    #[test]
    fn twenty_eyes_per_class_give_eighty_test_eyes() {
        let spec = SplitSpec {
            per_class_test_eyes: 20,
            per_class_val_eyes: 2,
            seed: 5,
        };
        let s = split_by_eye(&toy(25), &spec).unwrap();
        let eyes: BTreeSet<_> = s.test.iter().map(|r| r.eye_id.clone()).collect();
        assert_eq!(eyes.len(), 80);
        assert_eq!(s.test.len(), 160);
    }
}
