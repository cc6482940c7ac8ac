//! Minibatch SGD training and metric evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchTargets, DatasetKind, LabeledDataset, Targets};
use crate::error::{Error, Result};
use crate::model::{Model, Task};
use crate::ops::{dice, sgd_step, sigmoid, sigmoid_grad, soft_dice_loss, softmax_cross_entropy, SgdConfig};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` from epoch `at_epoch` on.
    StepDecay { at_epoch: usize, factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            lr_schedule: LrSchedule::StepDecay {
                at_epoch: 20,
                factor: 0.1,
            },
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for train-mode batch norm"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if let LrSchedule::StepDecay { factor, .. } = self.lr_schedule {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::config("decay factor must be positive"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::StepDecay { at_epoch, factor } if epoch >= at_epoch => self.lr * factor,
            LrSchedule::StepDecay { .. } => self.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn final_metric(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_metric)
    }
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classify => "accuracy",
        Task::Segment => "dice",
    }
}

fn check_kind(model: &Model, data: &LabeledDataset) -> Result<()> {
    let ok = matches!(
        (model.config.task, data.kind),
        (Task::Classify, DatasetKind::Classification) | (Task::Segment, DatasetKind::Segmentation)
    );
    if !ok {
        return Err(Error::config(format!(
            "{:?} dataset does not fit a {:?} model",
            data.kind, model.config.task
        )));
    }
    if let Targets::Classes(labels) = &data.targets {
        if let Some(&bad) = labels.iter().find(|&&l| l >= model.config.num_classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {} classes",
                model.config.num_classes
            )));
        }
    }
    Ok(())
}

/// Loss and `dL/d(logits)` for one batch.
fn batch_loss(task: Task, logits: &Tensor, targets: &BatchTargets) -> Result<(f32, Tensor)> {
    match (task, targets) {
        (Task::Classify, BatchTargets::Classes(labels)) => softmax_cross_entropy(logits, labels),
        (Task::Segment, BatchTargets::Masks(masks)) => {
            let prob = sigmoid(logits);
            let (loss, g) = soft_dice_loss(&prob, masks)?;
            Ok((loss, sigmoid_grad(&prob, &g)?))
        }
        _ => Err(Error::config("targets do not match the model task")),
    }
}

/// Trains `model` in place order-deterministically and returns the per-epoch history.
///
/// Each epoch shuffles the training set with a generator seeded from
/// `hyper.seed`, runs momentum SGD over batches of `batch_size` (a trailing
/// batch of one sample is skipped), then scores the test set in eval mode.
pub fn train_in_place(
    model: &mut Model,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    hyper: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    hyper.validate()?;
    check_kind(model, train_set)?;
    check_kind(model, test_set)?;
    if train_set.len() < 2 {
        return Err(Error::config("training needs at least two samples"));
    }
    let task = model.config.task;
    let mut velocity: Vec<Vec<f32>> = model
        .param_buffers_mut()
        .iter()
        .map(|b| vec![0.0; b.len()])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        metric: metric_name(task).to_string(),
        epochs: Vec::with_capacity(hyper.epochs),
    };
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let cfg = SgdConfig {
            lr: hyper.lr_at(epoch),
            momentum: hyper.momentum,
            weight_decay: hyper.weight_decay,
        };
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for idx in order.chunks(hyper.batch_size).filter(|c| c.len() >= 2) {
            let (x, targets) = train_set.batch(idx);
            let (logits, trace) = model.forward_train(&x)?;
            let (loss, grad) = batch_loss(task, &logits, &targets)?;
            let grads = model.backward(&trace, &grad)?;
            for ((p, g), v) in model
                .param_buffers_mut()
                .into_iter()
                .zip(grads.buffers())
                .zip(velocity.iter_mut())
            {
                sgd_step(p, g, v, cfg);
            }
            loss_sum += loss as f64 * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = loss_sum / seen as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged in epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            lr: cfg.lr,
            train_loss,
            test_metric: evaluate(model, test_set)?,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

/// Consuming form of [`train_in_place`].
pub fn train(
    mut model: Model,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    hyper: &Hyperparams,
) -> Result<(Model, History)> {
    let history = train_in_place(&mut model, train_set, test_set, hyper, |_| {})?;
    Ok((model, history))
}

/// Per-sample scores: 1/0 correctness for classification, Dice of the
/// thresholded foreground probability for segmentation.
pub fn per_sample_scores(model: &Model, data: &LabeledDataset) -> Result<Vec<f64>> {
    check_kind(model, data)?;
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let mut scores = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let (x, targets) = data.batch(idx);
        let logits = model.forward_eval(&x)?;
        match targets {
            BatchTargets::Classes(labels) => {
                for (i, &label) in labels.iter().enumerate() {
                    scores.push((argmax(logits.sample(i)) == label) as u8 as f64);
                }
            }
            BatchTargets::Masks(masks) => {
                for i in 0..idx.len() {
                    // sigmoid(z) > 0.5 exactly when z > 0
                    let pred: Vec<bool> = logits.sample(i).iter().map(|&z| z > 0.0).collect();
                    let truth: Vec<bool> = masks.sample(i).iter().map(|&m| m > 0.5).collect();
                    scores.push(dice(&pred, &truth));
                }
            }
        }
    }
    Ok(scores)
}

/// Top-1 accuracy or mean per-image Dice, in eval mode.
pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<f64> {
    let scores = per_sample_scores(model, data)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Index of the largest value; the first one on ties.
fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
