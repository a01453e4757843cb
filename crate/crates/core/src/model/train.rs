use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrainingConfig, OUTPUT_UNITS};
use super::network::{Model, Prediction};
use super::ModelError;
use crate::data::Samples;
use crate::nn::{adamax_step, categorical_cross_entropy, one_hot, softmax, softmax_cross_entropy_grad, AdamaxConfig, AdamaxState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Zero-based index into `epochs` of the selected checkpoint.
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Snapshot taken after the epoch with the highest held-out accuracy.
    pub best: Model,
    pub history: TrainingHistory,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        /// Epochs completed before the failure.
        history: TrainingHistory,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Accuracy and loss of a model over a sample set, in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean cross-entropy plus the regularization penalty.
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(model: &Model, samples: &Samples) -> Result<Evaluation, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::InvalidConfig("cannot evaluate an empty sample set".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let probs = model.infer(&samples.batch(&idx))?;
    let mut correct = 0usize;
    let mut ce = 0.0f64;
    let mut predictions = Vec::with_capacity(samples.len());
    for (i, &label) in samples.labels.iter().enumerate() {
        let p = Prediction {
            probabilities: [probs.row(i)[0], probs.row(i)[1]],
            label: u8::from(probs.row(i)[1] > probs.row(i)[0]),
        };
        correct += usize::from(p.label == label);
        ce -= (f64::from(p.probabilities[usize::from(label)]) + crate::nn::LOG_FLOOR).ln();
        predictions.push(p);
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: ce / n + model.penalty_value(),
        predictions,
    })
}

/// Mini-batch boundaries for one epoch; a trailing batch of one sample is dropped.
fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

pub fn train(model: &mut Model, train: &Samples, test: &Samples, cfg: &TrainingConfig) -> Result<TrainOutcome, TrainError> {
    train_with_progress(model, train, test, cfg, |_, _| {})
}

/// Adamax mini-batch training with best-held-out-accuracy checkpoint selection.
/// `progress` is called after every epoch with its one-based index.
pub fn train_with_progress(
    model: &mut Model,
    train: &Samples,
    test: &Samples,
    cfg: &TrainingConfig,
    mut progress: impl FnMut(usize, &EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(TrainError::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let opt = AdamaxConfig {
        learning_rate: cfg.learning_rate,
        ..AdamaxConfig::default()
    };
    let mut states: Vec<AdamaxState> = model.trainable_shapes().iter().map(|s| AdamaxState::new(s, opt)).collect();
    let dense_weight_slot = states.len() - 4;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.reseed_dropout(cfg.seed.wrapping_add(0x0d0d));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainingHistory::default();
    let mut best: Option<Model> = None;
    let mut best_acc = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
            let x = train.batch(idx);
            let targets = one_hot::<f32>(&train.labels_of(idx), OUTPUT_UNITS);
            let probs = softmax(&model.forward_train(&x)?);
            let ce = categorical_cross_entropy(&probs, &targets).map_err(ModelError::from)?;
            let (penalty, penalty_grad) = model.penalty();
            if !(ce + penalty).is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b + 1,
                    history,
                });
            }
            let dlogits = softmax_cross_entropy_grad(&probs, &targets).map_err(ModelError::from)?;
            let mut grads = model.backward(&dlogits)?;
            grads[dense_weight_slot].add_assign(&penalty_grad).map_err(ModelError::from)?;
            for ((param, grad), state) in model.trainable_mut().into_iter().zip(&grads).zip(&mut states) {
                adamax_step(param, grad, state).map_err(ModelError::from)?;
            }
        }
        let tr = evaluate(model, train)?;
        let te = evaluate(model, test)?;
        if !(tr.loss.is_finite() && te.loss.is_finite()) {
            return Err(TrainError::Diverged { epoch, batch: 0, history });
        }
        let record = EpochRecord {
            train_accuracy: tr.accuracy,
            train_loss: tr.loss,
            test_accuracy: te.accuracy,
            test_loss: te.loss,
        };
        history.epochs.push(record);
        if te.accuracy > best_acc {
            best_acc = te.accuracy;
            history.best_epoch = epoch - 1;
            best = Some(model.clone());
        }
        log::info!(
            "epoch {epoch}/{}: train acc {:.4} loss {:.4}, test acc {:.4} loss {:.4}",
            cfg.epochs,
            tr.accuracy,
            tr.loss,
            te.accuracy,
            te.loss
        );
        progress(epoch, &record);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        history,
    })
}
