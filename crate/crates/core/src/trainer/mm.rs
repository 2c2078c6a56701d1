use std::collections::BTreeMap;

use log::{info, warn};
use mmfuse_autograd::nn::Mode;
use mmfuse_autograd::{SgdState, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::{
    check_finite, cross_entropy, train_input, Fit, History, HistoryRow, ImageStore, RunConfig, Score, Selector,
};
use crate::dataset::{ImageRecord, LoosePair, LoosePairSampler, PairMode};
use crate::error::{Error, Result};
use crate::labels::{Class, Modality};
use crate::metrics::MetricsReport;
use crate::models::{argmax_rows, input_tensor, MmCnn};
use crate::seed;

const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    fn mode(self) -> PairMode {
        match self {
            Stage::Pretrain => PairMode::Pretrain,
            Stage::Finetune => PairMode::Finetune,
        }
    }
}

/// A true same-eye pair used for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub cfp: ImageRecord,
    pub oct: ImageRecord,
}

/// Every (CFP, OCT) combination within each real eye, in eye order.
pub fn same_eye_pairs(records: &[ImageRecord]) -> Vec<EvalPair> {
    let mut eyes: BTreeMap<&str, (Vec<&ImageRecord>, Vec<&ImageRecord>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_real()) {
        let e = eyes.entry(&r.eye_id).or_default();
        match r.modality {
            Modality::Cfp => e.0.push(r),
            Modality::Oct => e.1.push(r),
        }
    }
    let mut out = Vec::new();
    for (cfps, octs) in eyes.values() {
        for c in cfps {
            for o in octs {
                out.push(EvalPair {
                    cfp: (*c).clone(),
                    oct: (*o).clone(),
                });
            }
        }
    }
    out
}

pub fn evaluate_mm(model: &mut MmCnn<f32>, pairs: &[EvalPair], images: &ImageStore) -> Result<(MetricsReport, f64)> {
    if pairs.is_empty() {
        return Err(Error::contract("no CFP-OCT pairs to evaluate"));
    }
    let side = model.config().input_side;
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    let mut loss = 0.0;
    for chunk in pairs.chunks(EVAL_BATCH) {
        let mut cfp = Vec::with_capacity(chunk.len());
        let mut oct = Vec::with_capacity(chunk.len());
        for p in chunk {
            if p.cfp.eye_id != p.oct.eye_id || p.cfp.label != p.oct.label {
                return Err(Error::contract(format!(
                    "evaluation pair {} / {} is not from one eye",
                    p.cfp.image_id, p.oct.image_id
                )));
            }
            cfp.push(input_tensor(images.get(&p.cfp)?, side)?);
            oct.push(input_tensor(images.get(&p.oct)?, side)?);
        }
        let labels: Vec<usize> = chunk.iter().map(|p| p.cfp.label.index()).collect();
        let scores = model.predict(&Tensor::stack(&cfp), &Tensor::stack(&oct))?;
        loss += cross_entropy(&scores, &labels) * chunk.len() as f64;
        pred.extend(argmax_rows(&scores));
        truth.extend(labels);
    }
    Ok((
        MetricsReport::from_predictions(&truth, &pred)?,
        loss / pairs.len() as f64,
    ))
}

/// Provenance tally of the pairs one stage trained on.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAudit {
    pub batches: usize,
    pub pairs: usize,
    pub with_synthetic: usize,
    pub real_real: usize,
}

impl StageAudit {
    fn record(&mut self, stage: Stage, batch: &[LoosePair<'_>]) -> Result<()> {
        self.batches += 1;
        for p in batch {
            self.pairs += 1;
            if p.cfp.label != p.label || p.oct.label != p.label {
                return Err(Error::contract(format!(
                    "{} pair {} / {} mixes classes",
                    stage.name(),
                    p.cfp.image_id,
                    p.oct.image_id
                )));
            }
            if p.cfp.is_real() && p.oct.is_real() {
                self.real_real += 1;
            } else {
                self.with_synthetic += 1;
            }
        }
        let ok = match stage {
            Stage::Pretrain => self.real_real == 0,
            Stage::Finetune => self.with_synthetic == 0,
        };
        if !ok {
            return Err(Error::contract(format!(
                "{} batch {} breaks the provenance rule",
                stage.name(),
                self.batches
            )));
        }
        Ok(())
    }
}

/// One stage of multi-modal training on loose pairs. Pre-training draws
/// pairs with at least one synthetic image over the classes that have
/// synthetic images; fine-tuning draws real pairs over all classes. The
/// optimizer state starts fresh.
#[allow(clippy::too_many_arguments)]
pub fn train_mm_stage(
    model: &mut MmCnn<f32>,
    stage: Stage,
    train: &[ImageRecord],
    val: &[EvalPair],
    images: &ImageStore,
    config: &RunConfig,
    seed: u64,
) -> Result<(Fit, StageAudit)> {
    config.validate()?;
    let classes = match stage {
        Stage::Pretrain => LoosePairSampler::synthetic_classes(train),
        Stage::Finetune => Class::ALL.to_vec(),
    };
    if classes.is_empty() {
        return Err(Error::contract("pre-training needs synthetic images"));
    }
    let sampler = LoosePairSampler::new(train, stage.mode(), &classes)?;
    // An epoch draws as many pairs as there are real training images.
    let steps = config.steps(train.iter().filter(|r| r.is_real()).count());
    let mut rng = seed::rng(seed, &[seed::tag("batches"), seed::tag(stage.name())]);
    let mut opt = SgdState::new(
        config.learning_rate as f32,
        config.momentum as f32,
        config.weight_decay as f32,
    )?;
    let side = model.config().input_side;
    let mut audit = StageAudit::default();
    let mut history = History::default();
    let mut selector = Selector::new();
    if val.is_empty() && config.epochs > 0 {
        warn!("no validation pairs; keeping the last epoch of {}", stage.name());
    }
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        opt.learning_rate = lr as f32;
        let mut total = 0.0;
        for step in 0..steps {
            let batch = sampler.balanced_batch(&classes, config.batch_size, &mut rng)?;
            audit.record(stage, &batch)?;
            let mut cfp = Vec::with_capacity(batch.len());
            let mut oct = Vec::with_capacity(batch.len());
            for p in &batch {
                cfp.push(train_input(
                    images.get(p.cfp)?,
                    p.cfp,
                    &config.augment,
                    epoch,
                    step,
                    side,
                )?);
                oct.push(train_input(
                    images.get(p.oct)?,
                    p.oct,
                    &config.augment,
                    epoch,
                    step,
                    side,
                )?);
            }
            let labels: Vec<usize> = batch.iter().map(|p| p.label.index()).collect();
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::stack(&cfp));
            let b = tape.constant(Tensor::stack(&oct));
            let out = model.forward(&mut tape, a, b, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(out.scores, &labels);
            total += check_finite(&tape, loss, epoch + 1, step)?;
            let grads = tape.backward(loss)?;
            model.store.zero_grads();
            model.store.accumulate(&grads);
            opt.step(&mut model.store)?;
        }
        let train_loss = total / steps as f64;
        history.rows.push(HistoryRow {
            stage: stage.name().into(),
            epoch: epoch + 1,
            split: "train".into(),
            loss: train_loss,
            learning_rate: lr,
            metrics: None,
        });
        if !config.is_validation_epoch(epoch) {
            continue;
        }
        let score = if val.is_empty() {
            Score {
                macro_f1: 0.0,
                loss: -(epoch as f64),
            }
        } else {
            let (report, loss) = evaluate_mm(model, val, images)?;
            info!(
                "{} epoch {}: train loss {train_loss:.4}, val loss {loss:.4}, val macro-F1 {:.4}",
                stage.name(),
                epoch + 1,
                report.macro_f1
            );
            let score = Score {
                macro_f1: report.macro_f1,
                loss,
            };
            history.rows.push(HistoryRow {
                stage: stage.name().into(),
                epoch: epoch + 1,
                split: "val".into(),
                loss,
                learning_rate: lr,
                metrics: Some(report),
            });
            score
        };
        selector.offer(score, epoch + 1, &model.store);
    }
    info!(
        "{}: {} batches, {} pairs, {} with a synthetic image, {} real-real",
        stage.name(),
        audit.batches,
        audit.pairs,
        audit.with_synthetic,
        audit.real_real
    );
    Ok((selector.finish(&mut model.store, history), audit))
}

#[derive(Clone, Debug)]
pub struct TwoStage {
    pub pretrain: Option<(Fit, StageAudit)>,
    pub finetune: (Fit, StageAudit),
}

impl TwoStage {
    pub fn history(&self) -> History {
        let mut h = History::default();
        if let Some((f, _)) = &self.pretrain {
            h.extend(f.history.clone());
        }
        h.extend(self.finetune.0.history.clone());
        h
    }
}

/// Pre-training on pairs with a synthetic endpoint, then fine-tuning on
/// real pairs from the stage-1 selection. Without synthetic images this is
/// an error unless `allow_skip` is set, in which case stage 1 is skipped
/// with a warning.
#[allow(clippy::too_many_arguments)]
pub fn train_two_stage(
    model: &mut MmCnn<f32>,
    train: &[ImageRecord],
    val: &[EvalPair],
    images: &ImageStore,
    pretrain: &RunConfig,
    finetune: &RunConfig,
    seed: u64,
    allow_skip: bool,
) -> Result<TwoStage> {
    let has_synthetic = train.iter().any(|r| !r.is_real());
    let stage1 = if has_synthetic {
        Some(train_mm_stage(
            model,
            Stage::Pretrain,
            train,
            val,
            images,
            pretrain,
            seed,
        )?)
    } else if allow_skip {
        warn!("no synthetic images: skipping pre-training");
        None
    } else {
        return Err(Error::contract(
            "two-stage training needs synthetic images for pre-training",
        ));
    };
    let stage2 = train_mm_stage(model, Stage::Finetune, train, val, images, finetune, seed)?;
    Ok(TwoStage {
        pretrain: stage1,
        finetune: stage2,
    })
}
