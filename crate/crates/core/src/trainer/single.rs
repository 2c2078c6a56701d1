use log::{info, warn};
use mmfuse_autograd::nn::Mode;
use mmfuse_autograd::{SgdState, Tape, Tensor};

use super::{
    check_finite, cross_entropy, train_input, Fit, History, HistoryRow, ImageStore, RunConfig, Score, Selector,
};
use crate::dataset::{BalancedSampler, ImageRecord};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::models::{argmax_rows, input_tensor, SingleModalCnn};
use crate::seed;

const EVAL_BATCH: usize = 32;

/// Eval-mode metrics and mean loss over every record of the model's modality.
pub fn evaluate_single(
    model: &mut SingleModalCnn<f32>,
    records: &[ImageRecord],
    images: &ImageStore,
) -> Result<(MetricsReport, f64)> {
    let records: Vec<&ImageRecord> = records.iter().filter(|r| r.modality == model.modality).collect();
    if records.is_empty() {
        return Err(Error::contract(format!("no {} images to evaluate", model.modality)));
    }
    let side = model.config().input_side;
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    let mut loss = 0.0;
    for chunk in records.chunks(EVAL_BATCH) {
        let xs = chunk
            .iter()
            .map(|r| input_tensor(images.get(r)?, side))
            .collect::<Result<Vec<Tensor<f32>>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|r| r.label.index()).collect();
        let logits = model.predict(&Tensor::stack(&xs))?;
        loss += cross_entropy(&logits, &labels) * chunk.len() as f64;
        pred.extend(argmax_rows(&logits));
        truth.extend(labels);
    }
    Ok((
        MetricsReport::from_predictions(&truth, &pred)?,
        loss / records.len() as f64,
    ))
}

/// Trains on class-balanced batches and keeps the parameters with the best
/// validation macro-F1. With no validation images the last epoch is kept.
pub fn train_single(
    model: &mut SingleModalCnn<f32>,
    train: &[ImageRecord],
    val: &[ImageRecord],
    images: &ImageStore,
    config: &RunConfig,
    seed: u64,
) -> Result<Fit> {
    config.validate()?;
    let modality = model.modality;
    let train: Vec<ImageRecord> = train.iter().filter(|r| r.modality == modality).cloned().collect();
    let has_val = val.iter().any(|r| r.modality == modality);
    if !has_val && config.epochs > 0 {
        warn!("no {modality} validation images; keeping the last epoch");
    }
    let mut sampler = BalancedSampler::new(&train, config.batch_size)?;
    let mut rng = seed::rng(seed, &[seed::tag("batches"), seed::tag(modality.name())]);
    let mut opt = SgdState::new(
        config.learning_rate as f32,
        config.momentum as f32,
        config.weight_decay as f32,
    )?;
    let steps = config.steps(train.len());
    let side = model.config().input_side;
    let stage = modality.name().to_string();
    let mut history = History::default();
    let mut selector = Selector::new();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        opt.learning_rate = lr as f32;
        let mut total = 0.0;
        for step in 0..steps {
            let batch = sampler.next_batch(&mut rng);
            let xs = batch
                .iter()
                .map(|r| train_input(images.get(r)?, r, &config.augment, epoch, step, side))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|r| r.label.index()).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&xs));
            let out = model.forward(&mut tape, x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels);
            total += check_finite(&tape, loss, epoch + 1, step)?;
            let grads = tape.backward(loss)?;
            model.store.zero_grads();
            model.store.accumulate(&grads);
            opt.step(&mut model.store)?;
        }
        let train_loss = total / steps as f64;
        history.rows.push(HistoryRow {
            stage: stage.clone(),
            epoch: epoch + 1,
            split: "train".into(),
            loss: train_loss,
            learning_rate: lr,
            metrics: None,
        });
        if !config.is_validation_epoch(epoch) {
            continue;
        }
        let score = if has_val {
            let (report, loss) = evaluate_single(model, val, images)?;
            info!(
                "{stage} epoch {}: train loss {train_loss:.4}, val loss {loss:.4}, val macro-F1 {:.4}",
                epoch + 1,
                report.macro_f1
            );
            let score = Score {
                macro_f1: report.macro_f1,
                loss,
            };
            history.rows.push(HistoryRow {
                stage: stage.clone(),
                epoch: epoch + 1,
                split: "val".into(),
                loss,
                learning_rate: lr,
                metrics: Some(report),
            });
            score
        } else {
            Score {
                macro_f1: 0.0,
                loss: -(epoch as f64),
            }
        };
        selector.offer(score, epoch + 1, &model.store);
    }
    Ok(selector.finish(&mut model.store, history))
}
