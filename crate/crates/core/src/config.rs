//! The JSON run configuration. Every section and field is optional and
//! defaults to the desk-scale settings; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::synth::SynthSpec;
use crate::dataset::SplitSpec;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::imaging::PreprocessConfig;
use crate::models::BackboneConfig;
use crate::seed;
use crate::trainer::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub synth: SynthSpec,
    pub split: SplitSpec,
    pub preprocess: PreprocessConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            split: SplitSpec {
                per_class_test_eyes: 8,
                per_class_val_eyes: 8,
                seed: 0,
            },
            preprocess: PreprocessConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub single: RunConfig,
    pub pretrain: RunConfig,
    pub finetune: RunConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let desk = RunConfig {
            epochs: 10,
            ..RunConfig::default()
        };
        Self {
            single: desk.clone(),
            pretrain: desk.clone(),
            finetune: desk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { runs: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub global: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub dataset: DatasetConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub gan: GanConfig,
    pub eval: EvalConfig,
    pub seeds: SeedConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        let mut c = Self {
            dataset: DatasetConfig::default(),
            model: BackboneConfig::default().with_side(64),
            train: TrainConfig::default(),
            gan: GanConfig::default(),
            eval: EvalConfig::default(),
            seeds: SeedConfig::default(),
        };
        c.reseed();
        c
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: Self = serde_json::from_str(text)?;
        config.reseed();
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Contract(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gan.validate()?;
        for r in [&self.train.single, &self.train.pretrain, &self.train.finetune] {
            r.validate()?;
        }
        if self.eval.runs == 0 {
            return Err(Error::contract("eval.runs must be at least 1"));
        }
        Ok(())
    }

    /// Sets `seeds.global` and every seed derived from it.
    pub fn with_seed(mut self, global: u64) -> Self {
        self.seeds.global = global;
        self.reseed();
        self
    }

    /// Re-derives the split and augmentation seeds from `seeds.global`.
    pub fn reseed(&mut self) {
        let g = self.seeds.global;
        self.dataset.split.seed = seed::derive(g, &[seed::tag("split")]);
        for (name, r) in [
            ("single", &mut self.train.single),
            ("pretrain", &mut self.train.pretrain),
            ("finetune", &mut self.train.finetune),
        ] {
            r.augment.seed = seed::derive(g, &[seed::tag("augment"), seed::tag(name)]);
        }
    }

    /// Seed of a named stream.
    pub fn seed_for(&self, stream: &str) -> u64 {
        seed::derive(self.seeds.global, &[seed::tag(stream)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = CliConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(CliConfig::from_json(&text).unwrap(), c);
        assert_eq!(CliConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"modle": {}}"#,
            r#"{"train": {"single": {"epoch": 3}}}"#,
            r#"{"gan": {"coarse_epochs": 1, "q": 2}}"#,
            r#"{"dataset": {"split": {"seed": 4}}}"#,
            r#"{"train": {"single": {"augment": {"seed": 4}}}}"#,
        ] {
            assert!(CliConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn overrides_apply() {
        let c = CliConfig::from_json(r#"{"train": {"finetune": {"epochs": 2}}, "seeds": {"global": 9}}"#).unwrap();
        assert_eq!(c.train.finetune.epochs, 2);
        assert_eq!(c.train.single.epochs, 10);
        assert_eq!(c.seeds.global, 9);
        let d = CliConfig::default();
        assert_ne!(c.dataset.split.seed, d.dataset.split.seed);
        assert_ne!(c.train.single.augment.seed, d.train.single.augment.seed);
        let mut c = c;
        c.train.finetune.epochs = 10;
        assert_eq!(d.with_seed(9), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(CliConfig::from_json(r#"{"model": {"input_side": 60}}"#).is_err());
        assert!(CliConfig::from_json(r#"{"eval": {"runs": 0}}"#).is_err());
    }
}
