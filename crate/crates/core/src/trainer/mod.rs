//! Training loops, model selection, evaluation and run averaging.

mod mm;
mod single;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use mmfuse_autograd::{ParamStore, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Manifest};
use crate::error::{Error, Result};
use crate::imaging::{augment, preprocess, AugmentParams, PreprocessConfig, RawImage};
use crate::labels::{Class, NUM_CLASSES};
use crate::metrics::MetricsReport;
use crate::models::input_tensor;
use crate::seed;

pub use mm::{evaluate_mm, same_eye_pairs, train_mm_stage, train_two_stage, EvalPair, Stage, StageAudit, TwoStage};
pub use single::{evaluate_single, train_single};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fractions of `epochs` after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Defaults to the number of training images over the batch size.
    pub steps_per_epoch: Option<usize>,
    pub validate_every: usize,
    pub augment: AugmentParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            lr_milestones: vec![0.6, 0.85],
            lr_decay: 0.1,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps_per_epoch: None,
            validate_every: 1,
            augment: AugmentParams::default(),
        }
    }
}

impl RunConfig {
    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * self.epochs as f64).floor())
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % NUM_CLASSES != 0 {
            return Err(Error::contract(format!(
                "batch size {} must be a positive multiple of {NUM_CLASSES}",
                self.batch_size
            )));
        }
        if self.validate_every == 0 {
            return Err(Error::contract("validate_every must be at least 1"));
        }
        self.augment.validate()
    }

    fn steps(&self, images: usize) -> usize {
        self.steps_per_epoch.unwrap_or(images / self.batch_size).max(1)
    }

    fn is_validation_epoch(&self, epoch: usize) -> bool {
        (epoch + 1) % self.validate_every == 0 || epoch + 1 == self.epochs
    }
}

/// Decoded images keyed by image id. Real images are preprocessed on load;
/// synthetic images already live in the preprocessed domain.
#[derive(Clone, Debug, Default)]
pub struct ImageStore {
    images: HashMap<String, RawImage>,
}

impl ImageStore {
    pub fn load(manifest: &Manifest, records: &[ImageRecord], config: &PreprocessConfig) -> Result<Self> {
        let loaded: Vec<(String, RawImage)> = records
            .par_iter()
            .map(|r| {
                let img = RawImage::load(&manifest.resolve(r))?;
                if img.channels != r.modality.channels() {
                    return Err(Error::Manifest(format!(
                        "{} has {} channels, {} images have {}",
                        r.image_id,
                        img.channels,
                        r.modality,
                        r.modality.channels()
                    )));
                }
                let img = if r.is_real() {
                    preprocess(&img, r.modality, config)?
                } else {
                    img
                };
                Ok((r.image_id.clone(), img))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            images: loaded.into_iter().collect(),
        })
    }

    pub fn insert(&mut self, image_id: &str, img: RawImage) {
        self.images.insert(image_id.to_string(), img);
    }

    pub fn get(&self, record: &ImageRecord) -> Result<&RawImage> {
        self.images
            .get(&record.image_id)
            .ok_or_else(|| Error::Manifest(format!("image {} was not loaded", record.image_id)))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Augmented classifier input. The augmentation stream is keyed by epoch
/// and by the image and step, never by batch position or thread.
fn train_input(
    img: &RawImage,
    record: &ImageRecord,
    aug: &AugmentParams,
    epoch: usize,
    step: usize,
    side: usize,
) -> Result<Tensor<f32>> {
    let sample = seed::derive(seed::tag(&record.image_id), &[step as u64]);
    input_tensor(&augment(img, aug, epoch as u64, sample)?, side)
}

fn check_finite(tape: &Tape<f32>, loss: Var, epoch: usize, step: usize) -> Result<f64> {
    let v = tape.value(loss).item() as f64;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("training loss is {v}"),
        });
    }
    Ok(v)
}

/// Mean softmax cross-entropy of `[n, 4]` logits, in `f64`.
fn cross_entropy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(NUM_CLASSES).zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    total / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub learning_rate: f64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn extend(&mut self, other: History) {
        self.rows.extend(other.rows);
    }

    pub fn validation(&self) -> impl Iterator<Item = &HistoryRow> {
        self.rows.iter().filter(|r| r.split == "val")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "stage",
            "epoch",
            "split",
            "loss",
            "learning_rate",
            "macro_f1",
            "accuracy",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        for c in Class::ALL {
            for m in ["sensitivity", "specificity", "f1"] {
                header.push(format!("{c}_{m}"));
            }
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.stage.clone(),
                r.epoch.to_string(),
                r.split.clone(),
                format!("{:.9}", r.loss),
                format!("{}", r.learning_rate),
            ];
            match &r.metrics {
                Some(m) => {
                    rec.push(format!("{:.9}", m.macro_f1));
                    rec.push(format!("{:.9}", m.accuracy));
                    for c in &m.per_class {
                        for v in [c.sensitivity, c.specificity, c.f1] {
                            rec.push(format!("{v:.9}"));
                        }
                    }
                }
                None => rec.extend(std::iter::repeat(String::new()).take(2 + 3 * NUM_CLASSES)),
            }
            w.write_record(&rec)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Validation score used for model selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub macro_f1: f64,
    pub loss: f64,
}

impl Score {
    /// Higher macro-F1 wins; an exact tie goes to the lower loss.
    pub fn beats(&self, other: &Score) -> bool {
        self.macro_f1 > other.macro_f1 || (self.macro_f1 == other.macro_f1 && self.loss < other.loss)
    }
}

/// Result of one training loop. The model passed in holds the selected
/// parameters when the loop returns.
#[derive(Clone, Debug, Default)]
pub struct Fit {
    pub history: History,
    pub best_epoch: Option<usize>,
    pub best: Option<Score>,
}

/// Keeps a copy of the best parameters seen so far.
struct Selector {
    best: Option<(Score, usize, ParamStore<f32>)>,
}

impl Selector {
    fn new() -> Self {
        Self { best: None }
    }

    fn offer(&mut self, score: Score, epoch: usize, store: &ParamStore<f32>) {
        if self.best.as_ref().map_or(true, |(b, _, _)| score.beats(b)) {
            self.best = Some((score, epoch, store.clone()));
        }
    }

    fn finish(self, store: &mut ParamStore<f32>, history: History) -> Fit {
        match self.best {
            Some((score, epoch, params)) => {
                store.copy_values_from(&params);
                Fit {
                    history,
                    best_epoch: Some(epoch),
                    best: Some(score),
                }
            }
            None => Fit {
                history,
                best_epoch: None,
                best: None,
            },
        }
    }
}

/// Runs `run` for `0..runs` and averages the reports.
pub fn multi_run(
    runs: usize,
    mut run: impl FnMut(usize) -> Result<MetricsReport>,
) -> Result<(MetricsReport, Vec<MetricsReport>)> {
    if runs == 0 {
        return Err(Error::contract("at least one run is required"));
    }
    let reports = (0..runs).map(&mut run).collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::average(&reports)?, reports))
}

/// Seed of run `r` derived from a global seed.
pub fn run_seed(seed: u64, r: usize) -> u64 {
    seed::derive(seed, &[seed::tag("run"), r as u64])
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
