//! Seeded mini-batch SGD with weight decay, and per-epoch group metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{GroupedDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::nn::{GradientRecord, Mode, Model, Pass};
use crate::seed;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives the per-epoch shuffle.
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every epoch. Off for sweeps that only need the final model.
    #[serde(default = "default_true")]
    pub record_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            record_history: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Metrics of one split evaluated in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub mode: Mode,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean weighted training loss over the epoch's batches.
    pub train_loss: f64,
    pub evaluations: Vec<Evaluation>,
}

impl EpochRecord {
    pub fn get(&self, split: Split, mode: Mode) -> Option<&Metrics> {
        self.evaluations
            .iter()
            .find(|e| e.split == split && e.mode == mode)
            .map(|e| &e.metrics)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Per-example loss weights `N / (C * n_c)`, so every class carries the
/// same total weight. Absent classes get weight 0.
pub fn inverse_class_weights(ds: &GroupedDataset) -> Vec<f64> {
    let counts = ds.class_counts();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    let n = ds.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n / (present * c) as f64
            }
        })
        .collect()
}

/// Evaluate `model` on `ds` in both modes. Without a fair dropout layer the
/// modes coincide, so the forward pass runs once.
pub fn evaluate_both_modes(model: &Model, ds: &GroupedDataset) -> Result<Vec<Evaluation>> {
    let test = evaluate(model, ds, Mode::Test)?;
    let train = if model.fair_dropout().is_some() {
        evaluate(model, ds, Mode::Train)?
    } else {
        test.clone()
    };
    Ok(vec![
        Evaluation {
            split: ds.split(),
            mode: Mode::Train,
            metrics: train,
        },
        Evaluation {
            split: ds.split(),
            mode: Mode::Test,
            metrics: test,
        },
    ])
}

/// Train with train-mode forward passes. `monitor` lists extra splits
/// (typically test) evaluated each epoch next to the training split.
pub fn train(
    model: Model,
    data: &GroupedDataset,
    monitor: &[&GroupedDataset],
    config: &TrainConfig,
    class_reweight: bool,
) -> Result<(Model, History)> {
    config.validate()?;
    if data.feature_dim() != model.input_width() {
        return Err(Error::Dimension {
            context: "training features",
            expected: model.input_width(),
            actual: data.feature_dim(),
        });
    }
    let original_mode = model.mode();
    let mut model = model.with_mode(Mode::Train);
    let weights = if class_reweight {
        inverse_class_weights(data)
    } else {
        vec![1.0; data.classes()]
    };
    let mut history = History::default();
    let mut rng = seed::rng(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = GradientRecord::zeros_like(&model);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            for l in &mut grads.layers {
                l.weights.data_mut().fill(0.0);
                l.bias.data_mut().fill(0.0);
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let e = &data.examples()[i];
                let w = weights[e.y];
                let loss = model.accumulate_gradient(
                    &e.features,
                    e.y,
                    Pass::example(e.id),
                    w * scale,
                    &mut grads,
                )?;
                batch_loss += w * scale * loss;
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: batch_loss,
                    history: Box::new(history),
                });
            }
            sgd_step(
                &mut model,
                &grads,
                config.learning_rate,
                config.weight_decay,
            );
            loss_sum += batch_loss;
            batches += 1;
        }
        if config.record_history {
            let mut evaluations = evaluate_both_modes(&model, data)?;
            for ds in monitor {
                evaluations.extend(evaluate_both_modes(&model, ds)?);
            }
            history.epochs.push(EpochRecord {
                epoch,
                train_loss: loss_sum / batches.max(1) as f64,
                evaluations,
            });
        }
    }
    model.set_mode(original_mode);
    Ok((model, history))
}

/// `θ ← θ − lr·(g + wd·θ)`; biases are not decayed.
fn sgd_step(model: &mut Model, grads: &GradientRecord, lr: f64, wd: f64) {
    for (d, g) in model.dense_layers_mut().zip(&grads.layers) {
        for (w, gw) in d.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *w -= lr * (gw + wd * *w);
        }
        for (b, gb) in d.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *b -= lr * gb;
        }
    }
}

const SPLITS: [(Split, &str); 2] = [(Split::Test, ""), (Split::Train, "trainset_")];

/// Column names of [`write_history_csv`].
pub fn history_columns() -> Vec<String> {
    let mut cols = vec!["epoch".to_string(), "train_loss".to_string()];
    for (_, prefix) in SPLITS {
        for mode in [Mode::Train, Mode::Test] {
            for metric in ["avg", "wga", "wca", "loss"] {
                cols.push(format!("{prefix}{mode}_mode_{metric}"));
            }
        }
    }
    cols
}

/// One row per epoch. Unprefixed columns refer to the held-out test split,
/// `trainset_` columns to the training split. Missing evaluations are left
/// empty.
pub fn write_history_csv(history: &History, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(history_columns())?;
    for rec in &history.epochs {
        let mut row = vec![rec.epoch.to_string(), rec.train_loss.to_string()];
        for (split, _) in SPLITS {
            for mode in [Mode::Train, Mode::Test] {
                match rec.get(split, mode) {
                    Some(m) => row.extend(
                        [
                            m.average_accuracy,
                            m.worst_group_accuracy,
                            m.worst_class_accuracy,
                            m.mean_loss,
                        ]
                        .iter()
                        .map(f64::to_string),
                    ),
                    None => row.extend(std::iter::repeat_n(String::new(), 4)),
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
