//! Memorization localization: greedily drop the hidden neuron whose
//! parameters most separate an example's loss gradient from a reference
//! batch's, until the example's prediction flips.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{Group, GroupedDataset, GroupedExample};
use crate::error::{Error, Result};
use crate::metrics::evaluate_masked;
use crate::nn::{GradientRecord, Model, Pass};

/// A hidden neuron: output `neuron_index` of the dense layer `layer_index`.
/// Ordering is layer first, then neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer_index: usize,
    pub neuron_index: usize,
}

impl NeuronRef {
    pub fn new(layer_index: usize, neuron_index: usize) -> Self {
        NeuronRef {
            layer_index,
            neuron_index,
        }
    }
}

/// Hidden neurons whose outputs are forced to zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMaskSet {
    neurons: BTreeSet<NeuronRef>,
}

impl NeuronMaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, n: NeuronRef) -> bool {
        self.neurons.insert(n)
    }

    pub fn contains(&self, n: &NeuronRef) -> bool {
        self.neurons.contains(n)
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NeuronRef> {
        self.neurons.iter()
    }

    /// Keep mask for one layer, or `None` when nothing in it is masked.
    pub fn keep_mask(&self, layer_index: usize, width: usize) -> Option<Vec<bool>> {
        let mut hits = self
            .neurons
            .range(NeuronRef::new(layer_index, 0)..=NeuronRef::new(layer_index, usize::MAX))
            .peekable();
        hits.peek()?;
        let mut keep = vec![true; width];
        for n in hits {
            if n.neuron_index < width {
                keep[n.neuron_index] = false;
            }
        }
        Some(keep)
    }
}

impl FromIterator<NeuronRef> for NeuronMaskSet {
    fn from_iter<T: IntoIterator<Item = NeuronRef>>(iter: T) -> Self {
        NeuronMaskSet {
            neurons: iter.into_iter().collect(),
        }
    }
}

fn pass<'a>(e: &GroupedExample, mask: &'a NeuronMaskSet) -> Pass<'a> {
    Pass::example(e.id).with_mask(mask)
}

/// Criticality of every unmasked hidden neuron: the L2 norm, over the
/// neuron's incoming weight row and bias, of
/// `∇θ [ L(example) − mean_{b ∈ B} L(b) ]`.
pub fn criticality_scores(
    model: &Model,
    example: &GroupedExample,
    reference: &[&GroupedExample],
    mask: &NeuronMaskSet,
) -> Result<BTreeMap<NeuronRef, f64>> {
    if reference.is_empty() {
        return Err(Error::Probe("reference batch is empty".into()));
    }
    if reference.iter().any(|b| b.id == example.id) {
        return Err(Error::Probe(format!(
            "reference batch contains the probed example {}",
            example.id
        )));
    }
    let mut diff = GradientRecord::zeros_like(model);
    model.accumulate_gradient(
        &example.features,
        example.y,
        pass(example, mask),
        1.0,
        &mut diff,
    )?;
    let mut batch = GradientRecord::zeros_like(model);
    for b in reference {
        model.accumulate_gradient(&b.features, b.y, pass(b, mask), 1.0, &mut batch)?;
    }
    diff.add_scaled(&batch, -1.0 / reference.len() as f64);
    let hidden = model.hidden_layers().count();
    let mut scores = BTreeMap::new();
    for g in diff.layers.iter().take(hidden) {
        let n_in = g.weights.shape()[1];
        let w = g.weights.data();
        for (j, b) in g.bias.data().iter().enumerate() {
            let neuron = NeuronRef::new(g.layer_index, j);
            if mask.contains(&neuron) {
                continue;
            }
            let sq: f64 = w[j * n_in..(j + 1) * n_in]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                + b * b;
            scores.insert(neuron, sq.sqrt());
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub example_id: u64,
    /// Neurons in removal order.
    pub removed: Vec<NeuronRef>,
    /// Prediction differs from the label after the last removal.
    pub flipped: bool,
    pub iterations: usize,
    pub reference_batch_ids: Vec<u64>,
    /// Example loss before any removal.
    pub initial_loss: f64,
    /// Example loss after each removal.
    pub losses: Vec<f64>,
}

impl LocalizationResult {
    pub fn mask(&self) -> NeuronMaskSet {
        self.removed.iter().copied().collect()
    }
}

/// Greedy search for the neurons that carry an example's prediction. Each
/// step masks the highest-scoring neuron (ties to the lowest layer, then
/// neuron) and stops once the prediction no longer matches the label or
/// after `max_iters` removals. An example that is already misclassified
/// comes back flipped with nothing removed. Runs in the model's mode.
pub fn critical_neurons(
    model: &Model,
    example: &GroupedExample,
    reference: &[&GroupedExample],
    max_iters: usize,
) -> Result<LocalizationResult> {
    let mut mask = NeuronMaskSet::new();
    let initial_loss = model.loss(&example.features, example.y, pass(example, &mask))?;
    let mut result = LocalizationResult {
        example_id: example.id,
        removed: Vec::new(),
        flipped: model.predict(&example.features, pass(example, &mask))? != example.y,
        iterations: 0,
        reference_batch_ids: reference.iter().map(|b| b.id).collect(),
        initial_loss,
        losses: Vec::new(),
    };
    let max_iters = max_iters.min(model.hidden_neuron_count());
    while !result.flipped && result.removed.len() < max_iters {
        let scores = criticality_scores(model, example, reference, &mask)?;
        let mut best: Option<(NeuronRef, f64)> = None;
        for (&n, &s) in &scores {
            if best.is_none_or(|(_, top)| s > top) {
                best = Some((n, s));
            }
        }
        let Some((neuron, _)) = best else { break };
        mask.insert(neuron);
        result.removed.push(neuron);
        result
            .losses
            .push(model.loss(&example.features, example.y, pass(example, &mask))?);
        result.flipped = model.predict(&example.features, pass(example, &mask))? != example.y;
    }
    result.iterations = result.removed.len();
    Ok(result)
}

fn hidden_neurons(model: &Model) -> Vec<NeuronRef> {
    model
        .hidden_layers()
        .flat_map(|d| (0..d.out_width()).map(move |j| NeuronRef::new(d.layer_index, j)))
        .collect()
}

/// Exhaustive oracle: the smallest number of hidden neurons whose removal
/// makes the prediction differ from the label, searching sizes up to
/// `size_limit`. `Some(0)` for an already misclassified example, `None`
/// when no set within the limit works.
pub fn brute_force_min_flip(
    model: &Model,
    example: &GroupedExample,
    size_limit: usize,
) -> Result<Option<usize>> {
    let neurons = hidden_neurons(model);
    if neurons.len() > 16 || size_limit > 4 {
        return Err(Error::Probe(format!(
            "exhaustive search limited to 16 neurons and sets of 4 (got {} and {size_limit})",
            neurons.len()
        )));
    }
    let flips = |mask: &NeuronMaskSet| -> Result<bool> {
        Ok(model.predict(&example.features, pass(example, mask))? != example.y)
    };
    if flips(&NeuronMaskSet::new())? {
        return Ok(Some(0));
    }
    for size in 1..=size_limit.min(neurons.len()) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let mask: NeuronMaskSet = idx.iter().map(|&i| neurons[i]).collect();
            if flips(&mask)? {
                return Ok(Some(size));
            }
            // next combination in lexicographic order
            let mut i = size;
            while i > 0 && idx[i - 1] == neurons.len() - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for k in i..size {
                idx[k] = idx[k - 1] + 1;
            }
        }
    }
    Ok(None)
}

/// One probed example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub example_id: u64,
    pub group_y: usize,
    pub group_a: usize,
    /// Drawn from the minority sample.
    pub minority: bool,
    pub n_removed: usize,
    pub flipped: bool,
    pub train_wga_after_drop: f64,
    pub test_wga_after_drop: f64,
    /// Example loss after the last removal minus before the first.
    pub loss_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Linear-interpolation quantiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Quartiles {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub examples: usize,
    pub flipped: usize,
    pub n_removed: Option<Quartiles>,
    pub train_wga_delta: Option<Quartiles>,
    pub test_wga_delta: Option<Quartiles>,
    /// Share of examples whose drop leaves test WGA no worse.
    pub test_wga_not_worse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_y: usize,
    pub group_a: usize,
    pub summary: SampleSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub baseline_train_wga: f64,
    pub baseline_test_wga: f64,
    pub minority: SampleSummary,
    pub majority: SampleSummary,
    pub per_group: Vec<GroupSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub results: Vec<LocalizationResult>,
    pub summary: ProbeSummary,
}

/// Inputs of [`probe_report`]. Ids refer to the training split.
#[derive(Debug, Clone)]
pub struct ProbeRequest<'a> {
    pub train: &'a GroupedDataset,
    pub test: &'a GroupedDataset,
    pub minority_ids: &'a [u64],
    pub majority_ids: &'a [u64],
    pub reference_ids: &'a [u64],
    pub max_iters: usize,
}

fn summarize(rows: &[&ProbeRow], base_train: f64, base_test: f64) -> SampleSummary {
    let col = |f: &dyn Fn(&ProbeRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let not_worse = rows
        .iter()
        .filter(|r| r.test_wga_after_drop >= base_test)
        .count();
    SampleSummary {
        examples: rows.len(),
        flipped: rows.iter().filter(|r| r.flipped).count(),
        n_removed: Quartiles::of(&col(&|r| r.n_removed as f64)),
        train_wga_delta: Quartiles::of(&col(&|r| r.train_wga_after_drop - base_train)),
        test_wga_delta: Quartiles::of(&col(&|r| r.test_wga_after_drop - base_test)),
        test_wga_not_worse: if rows.is_empty() {
            0.0
        } else {
            not_worse as f64 / rows.len() as f64
        },
    }
}

/// Localize every sampled example, then measure train and test worst-group
/// accuracy with that example's critical neurons dropped.
pub fn probe_report(model: &Model, req: &ProbeRequest<'_>) -> Result<ProbeReport> {
    if req.minority_ids.is_empty() {
        return Err(Error::Probe("minority sample is empty".into()));
    }
    if req.majority_ids.is_empty() {
        return Err(Error::Probe("majority sample is empty".into()));
    }
    let lookup = |id: u64| {
        req.train
            .get(id)
            .ok_or_else(|| Error::Probe(format!("example id {id} not in training split")))
    };
    let mode = model.mode();
    let no_mask = NeuronMaskSet::new();
    let base_train = evaluate_masked(model, req.train, mode, Some(&no_mask))?.worst_group_accuracy;
    let base_test = evaluate_masked(model, req.test, mode, Some(&no_mask))?.worst_group_accuracy;
    let reference_all: Vec<&GroupedExample> = req
        .reference_ids
        .iter()
        .map(|&id| lookup(id))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut results = Vec::new();
    let samples = req
        .minority_ids
        .iter()
        .map(|&id| (id, true))
        .chain(req.majority_ids.iter().map(|&id| (id, false)));
    for (id, minority) in samples {
        let example = lookup(id)?;
        let reference: Vec<&GroupedExample> = reference_all
            .iter()
            .copied()
            .filter(|b| b.id != id)
            .collect();
        let res = critical_neurons(model, example, &reference, req.max_iters)?;
        let (train_wga, test_wga) = if res.removed.is_empty() {
            (base_train, base_test)
        } else {
            let mask = res.mask();
            (
                evaluate_masked(model, req.train, mode, Some(&mask))?.worst_group_accuracy,
                evaluate_masked(model, req.test, mode, Some(&mask))?.worst_group_accuracy,
            )
        };
        rows.push(ProbeRow {
            example_id: id,
            group_y: example.y,
            group_a: example.a,
            minority,
            n_removed: res.removed.len(),
            flipped: res.flipped,
            train_wga_after_drop: train_wga,
            test_wga_after_drop: test_wga,
            loss_delta: res.losses.last().map_or(0.0, |l| l - res.initial_loss),
        });
        results.push(res);
    }

    let pick = |minority: bool| {
        rows.iter()
            .filter(|r| r.minority == minority)
            .collect::<Vec<_>>()
    };
    let mut groups: BTreeMap<Group, Vec<&ProbeRow>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry(Group::new(r.group_y, r.group_a))
            .or_default()
            .push(r);
    }
    let summary = ProbeSummary {
        baseline_train_wga: base_train,
        baseline_test_wga: base_test,
        minority: summarize(&pick(true), base_train, base_test),
        majority: summarize(&pick(false), base_train, base_test),
        per_group: groups
            .into_iter()
            .map(|(g, rs)| GroupSummary {
                group_y: g.y,
                group_a: g.a,
                summary: summarize(&rs, base_train, base_test),
            })
            .collect(),
    };
    Ok(ProbeReport {
        rows,
        results,
        summary,
    })
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "example_id",
    "group_y",
    "group_a",
    "n_removed",
    "flipped",
    "train_wga_after_drop",
    "test_wga_after_drop",
];

/// The documented columns first, then `minority` and `loss_delta`.
pub fn write_report_csv(report: &ProbeReport, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = REPORT_COLUMNS.to_vec();
    header.extend(["minority", "loss_delta"]);
    w.write_record(&header)?;
    for r in &report.rows {
        w.write_record(&[
            r.example_id.to_string(),
            r.group_y.to_string(),
            r.group_a.to_string(),
            r.n_removed.to_string(),
            r.flipped.to_string(),
            r.train_wga_after_drop.to_string(),
            r.test_wga_after_drop.to_string(),
            r.minority.to_string(),
            r.loss_delta.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
