//! Image records, the CSV manifest, eye-level splitting, loose pairing,
//! class-balanced batching and the procedural benchmark.

mod pairing;
mod split;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Class, Modality, Provenance, NUM_CLASSES};

pub use pairing::{loose_pair_count, BalancedSampler, LoosePair, LoosePairSampler, PairMode};
pub use split::{split_by_eye, Split, SplitSpec};

pub const MANIFEST_HEADER: [&str; 7] = [
    "image_id",
    "eye_id",
    "subject_id",
    "modality",
    "label",
    "provenance",
    "path",
];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub eye_id: String,
    pub subject_id: String,
    pub modality: Modality,
    pub label: Class,
    pub provenance: Provenance,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

impl ImageRecord {
    pub fn is_real(&self) -> bool {
        self.provenance == Provenance::Real
    }
}

/// Every eye carries exactly one label and image ids are unique.
pub fn validate_records(records: &[ImageRecord]) -> Result<()> {
    let mut eyes: BTreeMap<&str, Class> = BTreeMap::new();
    let mut ids = HashSet::new();
    for r in records {
        if !ids.insert(r.image_id.as_str()) {
            return Err(Error::Manifest(format!("duplicate image_id {}", r.image_id)));
        }
        if let Some(&prev) = eyes.get(r.eye_id.as_str()) {
            if prev != r.label {
                return Err(Error::Manifest(format!(
                    "eye {} is labelled both {prev} and {}",
                    r.eye_id, r.label
                )));
            }
        } else {
            eyes.insert(&r.eye_id, r.label);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut reader = csv::Reader::from_reader(file);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "{}: header must be {}, got {}",
                path.display(),
                MANIFEST_HEADER.join(","),
                header.join(",")
            )));
        }
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ImageRecord>, _>>()
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        validate_records(&records)?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn write(path: &Path, records: &[ImageRecord]) -> Result<()> {
        validate_records(records)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in records {
            w.serialize(r)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(())
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }
}

/// Image counts per `[class][modality]`.
pub fn class_counts<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> [[usize; 2]; NUM_CLASSES] {
    let mut counts = [[0; 2]; NUM_CLASSES];
    for r in records {
        counts[r.label.index()][r.modality as usize] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(id: &str, eye: &str, m: Modality, c: Class, p: Provenance) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            eye_id: eye.into(),
            subject_id: format!("s-{eye}"),
            modality: m,
            label: c,
            provenance: p,
            path: format!("img/{id}.png").into(),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let records = vec![
            rec("a", "e1", Modality::Cfp, Class::Pcv, Provenance::Real),
            rec("b", "e1", Modality::Oct, Class::Pcv, Provenance::Synthetic),
        ];
        Manifest::write(&p, &records).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("image_id,eye_id,subject_id,modality,label,provenance,path\n"));
        assert!(text.contains("b,e1,s-e1,oct,PCV,synthetic,img/b.png"));
        let m = Manifest::read(&p).unwrap();
        assert_eq!(m.records, records);
        assert_eq!(m.resolve(&records[0]), dir.path().join("img/a.png"));
    }

    #[test]
    fn inconsistent_eye_labels_are_rejected() {
        let records = vec![
            rec("a", "e1", Modality::Cfp, Class::Pcv, Provenance::Real),
            rec("b", "e1", Modality::Oct, Class::Normal, Provenance::Real),
        ];
        let err = validate_records(&records).unwrap_err().to_string();
        assert!(err.contains("e1"), "{err}");
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "id,eye\n").unwrap();
        assert!(Manifest::read(&p).is_err());
    }
}
