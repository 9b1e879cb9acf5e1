//! Group-level 0-1 evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{Group, GroupedDataset};
use crate::error::{Error, Result};
use crate::memprobe::NeuronMaskSet;
use crate::nn::{argmax, softmax_cross_entropy, Mode, Model, Pass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub y: usize,
    pub a: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl GroupAccuracy {
    pub fn group(&self) -> Group {
        Group::new(self.y, self.a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Every group of the grid, in canonical order.
    pub per_group: Vec<GroupAccuracy>,
    pub per_class_accuracy: Vec<f64>,
    /// Example-weighted.
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub worst_class_accuracy: f64,
    pub mean_loss: f64,
}

impl Metrics {
    pub fn group_accuracy(&self, g: Group) -> Option<f64> {
        self.per_group
            .iter()
            .find(|r| r.group() == g)
            .map(|r| r.accuracy)
    }

    /// Aggregate per-example predictions. Fails if any group of the
    /// dataset's grid has no examples.
    pub fn from_predictions(
        ds: &GroupedDataset,
        predictions: &[usize],
        losses: &[f64],
    ) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Config("cannot evaluate an empty dataset".into()));
        }
        let mut per_group = Vec::new();
        for g in ds.all_groups() {
            let idx = ds.group_index().get(&g).ok_or(Error::EmptyGroup(g))?;
            let correct = idx.iter().filter(|&&i| predictions[i] == g.y).count();
            per_group.push(GroupAccuracy {
                y: g.y,
                a: g.a,
                count: idx.len(),
                correct,
                accuracy: correct as f64 / idx.len() as f64,
            });
        }
        let mut class_hits = vec![(0usize, 0usize); ds.classes()];
        for r in &per_group {
            let c = &mut class_hits[r.y];
            c.0 += r.correct;
            c.1 += r.count;
        }
        let per_class_accuracy: Vec<f64> = class_hits
            .iter()
            .map(|&(hit, n)| hit as f64 / n as f64)
            .collect();
        let correct = ds
            .examples()
            .iter()
            .zip(predictions)
            .filter(|(e, &p)| e.y == p)
            .count();
        Ok(Metrics {
            average_accuracy: correct as f64 / ds.len() as f64,
            worst_group_accuracy: per_group.iter().map(|r| r.accuracy).fold(1.0, f64::min),
            worst_class_accuracy: per_class_accuracy.iter().copied().fold(1.0, f64::min),
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            per_group,
            per_class_accuracy,
        })
    }
}

/// Predicted class and loss for every example, in `mode`, optionally with
/// hidden neurons masked.
pub fn predictions(
    model: &Model,
    ds: &GroupedDataset,
    mode: Mode,
    mask: Option<&NeuronMaskSet>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let model = model.with_mode(mode);
    let mut preds = Vec::with_capacity(ds.len());
    let mut losses = Vec::with_capacity(ds.len());
    for e in ds.examples() {
        let pass = Pass {
            example_id: Some(e.id),
            mask,
        };
        let logits = model.forward(&e.features, pass)?;
        preds.push(argmax(&logits));
        losses.push(softmax_cross_entropy(&logits, e.y)?.0);
    }
    Ok((preds, losses))
}

pub fn evaluate(model: &Model, ds: &GroupedDataset, mode: Mode) -> Result<Metrics> {
    evaluate_masked(model, ds, mode, None)
}

pub fn evaluate_masked(
    model: &Model,
    ds: &GroupedDataset,
    mode: Mode,
    mask: Option<&NeuronMaskSet>,
) -> Result<Metrics> {
    let (preds, losses) = predictions(model, ds, mode, mask)?;
    Metrics::from_predictions(ds, &preds, &losses)
}

/// Train minus test accuracy for each group.
pub fn generalization_gap(train: &Metrics, test: &Metrics) -> Vec<(Group, f64)> {
    train
        .per_group
        .iter()
        .filter_map(|r| {
            test.group_accuracy(r.group())
                .map(|t| (r.group(), r.accuracy - t))
        })
        .collect()
}
