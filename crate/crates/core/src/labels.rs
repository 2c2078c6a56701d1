use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The four eye conditions, in head-column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "dryAMD")]
    DryAmd,
    #[serde(rename = "PCV")]
    Pcv,
    #[serde(rename = "wetAMD")]
    WetAmd,
}

pub const NUM_CLASSES: usize = 4;

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Normal, Class::DryAmd, Class::Pcv, Class::WetAmd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::DryAmd => "dryAMD",
            Class::Pcv => "PCV",
            Class::WetAmd => "wetAMD",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self != Class::Normal
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Class::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown class `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cfp,
    Oct,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Cfp => "cfp",
            Modality::Oct => "oct",
        }
    }

    /// Stored channel count of an image of this modality.
    pub fn channels(self) -> usize {
        match self {
            Modality::Cfp => 3,
            Modality::Oct => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cfp" => Ok(Modality::Cfp),
            "oct" => Ok(Modality::Oct),
            _ => Err(Error::Manifest(format!("unknown modality `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_names_round_trip() {
        for c in Class::ALL {
            assert_eq!(c.name().parse::<Class>().unwrap(), c);
            assert_eq!(Class::from_index(c.index()), Some(c));
        }
        assert!("wetamd".parse::<Class>().is_err());
    }

    #[test]
    fn serde_uses_manifest_vocabulary() {
        assert_eq!(serde_json::to_string(&Class::DryAmd).unwrap(), "\"dryAMD\"");
        assert_eq!(serde_json::to_string(&Modality::Oct).unwrap(), "\"oct\"");
        assert_eq!(serde_json::to_string(&Provenance::Synthetic).unwrap(), "\"synthetic\"");
    }
}
