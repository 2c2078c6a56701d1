//! One-vs-rest classification metrics.
//!
//! Per class: sensitivity `TP / (TP + FN)`, specificity `TN / (TN + FP)` and
//! `f1 = 2 se sp / (se + sp)`, the harmonic mean of the two. A ratio with a
//! zero denominator is 0, and so is `f1` when `se + sp == 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Class, NUM_CLASSES};

/// `counts[truth][predicted]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn from_pairs(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::contract(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(Error::contract(format!("class index out of range: {t} / {p}")));
            }
            c.counts[t][p] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// `(tp, fn, tn, fp)` for class `c` against the rest.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[c][c];
        let fneg: u64 = self.counts[c].iter().sum::<u64>() - tp;
        let fpos: u64 = (0..NUM_CLASSES).map(|t| self.counts[t][c]).sum::<u64>() - tp;
        let tn = self.total() - tp - fneg - fpos;
        (tp, fneg, tn, fpos)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic(se: f64, sp: f64) -> f64 {
    if se + sp == 0.0 {
        0.0
    } else {
        2.0 * se * sp / (se + sp)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn from_counts(tp: u64, fneg: u64, tn: u64, fpos: u64) -> Self {
        let sensitivity = ratio(tp, tp + fneg);
        let specificity = ratio(tn, tn + fpos);
        Self {
            sensitivity,
            specificity,
            f1: harmonic(sensitivity, specificity),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Indexed by class: normal, dryAMD, PCV, wetAMD.
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub instances: u64,
    /// Number of runs averaged into this report.
    pub runs: usize,
}

impl MetricsReport {
    pub fn from_confusion(c: &Confusion) -> Result<Self> {
        if c.total() == 0 {
            return Err(Error::contract("cannot evaluate an empty test set"));
        }
        let per_class: Vec<ClassMetrics> = (0..NUM_CLASSES)
            .map(|k| {
                let (tp, fneg, tn, fpos) = c.one_vs_rest(k);
                ClassMetrics::from_counts(tp, fneg, tn, fpos)
            })
            .collect();
        let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / NUM_CLASSES as f64;
        Ok(Self {
            per_class,
            macro_f1,
            accuracy: ratio(c.correct(), c.total()),
            instances: c.total(),
            runs: 1,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Self::from_confusion(&Confusion::from_pairs(truth, predicted)?)
    }

    pub fn class(&self, c: Class) -> &ClassMetrics {
        &self.per_class[c.index()]
    }

    /// Arithmetic mean of every field over runs. The averaged `f1` is
    /// generally not the harmonic mean of the averaged sensitivity and
    /// specificity.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        let r = reports.len();
        if r == 0 {
            return Err(Error::contract("cannot average zero runs"));
        }
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / r as f64;
        let per_class = (0..NUM_CLASSES)
            .map(|k| ClassMetrics {
                sensitivity: mean(&|m| m.per_class[k].sensitivity),
                specificity: mean(&|m| m.per_class[k].specificity),
                f1: mean(&|m| m.per_class[k].f1),
            })
            .collect();
        Ok(Self {
            per_class,
            macro_f1: mean(&|m| m.macro_f1),
            accuracy: mean(&|m| m.accuracy),
            instances: reports.iter().map(|m| m.instances).sum(),
            runs: reports.iter().map(|m| m.runs).sum(),
        })
    }
}
