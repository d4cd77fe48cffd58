//! Mini-batch training with the two-phase learning-rate schedule, evaluation
//! metrics over exact confusion counts, and the per-epoch metric CSV log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, LabeledExample, Vocabulary};
use crate::environment::EnvironmentMap;
use crate::error::{Error, Result};
use crate::model::{BoundModel, DualAttentionModel, ForwardOutput, ModelInput};
use crate::rng;
use crate::tensor::{AdamState, Scalar, Tape};

/// Probabilities at or above this threshold predict the positive class.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Optimization schedule. Epochs are 1-based; epochs `1..=lr_switch_epoch`
/// run at `lr_initial`, later epochs at `lr_after`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    /// Stop once this many epochs pass without a new best validation accuracy.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            lr_initial: 1e-3,
            lr_after: 1e-4,
            lr_switch_epoch: 2,
            patience: 5,
            seed: 17,
        }
    }
}

impl TrainConfig {
    /// Production-scale batch size; every other default is unchanged.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr_initial > 0.0 && self.lr_after > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    /// Learning rate in force during the given 1-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_switch_epoch {
            self.lr_initial
        } else {
            self.lr_after
        }
    }
}

/// Classification quality as percentages plus the exact confusion counts
/// they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub accuracy: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
    /// Set when precision + recall = 0; `f_measure` is then 0.00 by
    /// convention rather than a division by zero.
    pub f_undefined: bool,
}

impl Metrics {
    pub fn from_confusion(tp: u64, fp: u64, tn: u64, fn_count: u64) -> Result<Metrics> {
        let total = tp + fp + tn + fn_count;
        if total == 0 {
            return Err(Error::invalid("cannot compute metrics over zero examples"));
        }
        let pct = |num: u64, den: u64| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let precision = pct(tp, tp + fp);
        let recall = pct(tp, tp + fn_count);
        let f_undefined = precision + recall == 0.0;
        let f_measure = if f_undefined {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Metrics {
            precision,
            recall,
            f_measure,
            accuracy: pct(tp + tn, total),
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fn_count,
            f_undefined,
        })
    }
}

/// Everything needed to turn a [`LabeledExample`] into a model input.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub vocab: &'a Vocabulary,
    pub features: &'a FeatureMatrix,
    /// Required whenever the model's variant uses the environment branch.
    pub environments: Option<&'a EnvironmentMap>,
}

fn forward_example<E: Scalar>(
    model: &DualAttentionModel<E>,
    tape: &mut Tape<E>,
    bound: &BoundModel,
    data: &TrainData<'_>,
    example: &LabeledExample,
) -> Result<ForwardOutput> {
    let token_ids = data.vocab.encode(&example.caption, model.config().t_max);
    let image = data.features.row(example.features_row)?;
    let env = if model.config().use_environment {
        let map = data.environments.ok_or_else(|| {
            Error::invalid("this variant needs user environments but none were supplied")
        })?;
        let env = map.get(&example.user_id).ok_or_else(|| {
            Error::invalid(format!("no environment for user {}", example.user_id))
        })?;
        Some((env.image.as_slice(), env.topic.as_slice()))
    } else {
        None
    };
    let input = ModelInput {
        token_ids: &token_ids,
        image,
        env,
    };
    model.forward(tape, bound, &input)
}

/// Positive-class probability for each example, in order.
pub fn predict_probs<E: Scalar>(
    model: &DualAttentionModel<E>,
    data: &TrainData<'_>,
    examples: &[LabeledExample],
) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(examples.len());
    for example in examples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = forward_example(model, &mut tape, &bound, data, example)?;
        probs.push(tape.scalar(out.prob).to_f64());
    }
    Ok(probs)
}

/// Confusion counts and derived percentages at [`DECISION_THRESHOLD`].
pub fn evaluate<E: Scalar>(
    model: &DualAttentionModel<E>,
    data: &TrainData<'_>,
    examples: &[LabeledExample],
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let probs = predict_probs(model, data, examples)?;
    let (mut tp, mut fp, mut tn, mut fn_count) = (0u64, 0u64, 0u64, 0u64);
    for (example, prob) in examples.iter().zip(&probs) {
        let predicted = *prob >= DECISION_THRESHOLD;
        match (predicted, example.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_count += 1,
        }
    }
    Metrics::from_confusion(tp, fp, tn, fn_count)
}

/// One epoch of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's examples.
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch whose validation accuracy was best; the model is left holding
    /// that epoch's parameters.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Adam over seeded shuffled mini-batches with the two-phase learning-rate
/// schedule. After every epoch the validation set is scored; the parameters
/// from the best-accuracy epoch are restored into `model` before returning.
/// Training aborts with a diagnostic naming the batch if the loss leaves the
/// finite range.
pub fn train(
    model: &mut DualAttentionModel<f32>,
    data: &TrainData<'_>,
    train_set: &[LabeledExample],
    val_set: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must both be nonempty",
        ));
    }

    let mut adam = AdamState::new(&model.params);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, crate::tensor::ParamSet<f32>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::seeded(cfg.seed, &format!("train.epoch{epoch}")));

        let mut loss_sum = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut probs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let out = forward_example(model, &mut tape, &bound, data, &train_set[i])?;
                probs.push(out.prob);
                targets.push(train_set[i].label);
            }
            let stacked = tape.stack_rows(&probs)?;
            let preds = tape.reshape(stacked, vec![batch.len()])?;
            // The loss clamps predictions away from 0 and 1, which would also
            // hide a NaN prediction, so check the raw outputs first.
            let all_finite = tape.value(preds).iter().all(|p| p.is_finite());
            let loss = tape.bce_loss(preds, &targets)?;
            let loss_value = tape.scalar(loss).to_f64();
            if !all_finite || !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss left the finite range in epoch {epoch}, batch {batch_index}"
                )));
            }
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params, lr)?;
            loss_sum += loss_value * batch.len() as f64;
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let val = evaluate(model, data, val_set)?;
        let improved = best
            .as_ref()
            .is_none_or(|(_, acc, _)| val.accuracy > *acc);
        if improved {
            best = Some((epoch, val.accuracy, model.params.clone()));
        }
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val,
        });
        let best_epoch = best.as_ref().expect("recorded above").0;
        if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_accuracy, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_accuracy,
        stopped_early,
    })
}

/// Write the epoch log as CSV with a fixed header and formatting, so equal
/// logs produce byte-identical files.
pub fn write_metrics_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out =
        String::from("epoch,lr,train_loss,val_precision,val_recall,val_f,val_accuracy\n");
    for r in log {
        writeln!(
            out,
            "{},{},{:.6},{:.2},{:.2},{:.2},{:.2}",
            r.epoch, r.lr, r.train_loss, r.val.precision, r.val.recall, r.val.f_measure,
            r.val.accuracy
        )
        .expect("String writes cannot fail");
    }
    fs::write(path, out)?;
    Ok(())
}
