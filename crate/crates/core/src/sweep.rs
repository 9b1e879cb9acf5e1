//! Hyperparameter grid sweeps ranked by validation worst-class accuracy.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{DropoutPosition, FairDropoutSpec, ModelSpec};
use crate::data::GroupedDataset;
use crate::error::Result;
use crate::metrics::{evaluate, GroupAccuracy, Metrics};
use crate::nn::Mode;
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub p_gen: f64,
    pub p_mem: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub position: DropoutPosition,
}

impl GridPoint {
    fn key(&self) -> (u64, u64, u64, u64, DropoutPosition) {
        (
            self.p_gen.to_bits(),
            self.p_mem.to_bits(),
            self.learning_rate.to_bits(),
            self.weight_decay.to_bits(),
            self.position,
        )
    }
}

/// Cartesian product over each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub p_gen: Vec<f64>,
    pub p_mem: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub position: Vec<DropoutPosition>,
}

impl Grid {
    /// The tuning ranges used for the image and text benchmarks, with the
    /// projection slot as the only position.
    pub fn reference() -> Self {
        Grid {
            p_gen: vec![0.2, 0.3, 0.4, 0.5, 0.6],
            p_mem: vec![0.001, 0.1, 0.2, 0.4],
            learning_rate: vec![1e-3, 1e-4, 1e-5],
            weight_decay: vec![1e-3, 1e-4, 1e-5, 1e-6],
            position: vec![DropoutPosition::Projection],
        }
    }

    /// Points in row-major order (`p_gen` outermost, `position` innermost).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &p_gen in &self.p_gen {
            for &p_mem in &self.p_mem {
                for &learning_rate in &self.learning_rate {
                    for &weight_decay in &self.weight_decay {
                        for &position in &self.position {
                            out.push(GridPoint {
                                p_gen,
                                p_mem,
                                learning_rate,
                                weight_decay,
                                position,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Drop repeated points, keeping the first occurrence.
pub fn dedup(points: &[GridPoint]) -> Vec<GridPoint> {
    let mut seen = std::collections::HashSet::new();
    points
        .iter()
        .filter(|p| seen.insert(p.key()))
        .copied()
        .collect()
}

/// Everything shared by the runs of one sweep.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    /// Widths of the base network; its fair dropout entry is replaced per point.
    pub model: &'a ModelSpec,
    /// Epochs, batch size and shuffle seed. Learning rate and weight decay
    /// come from each point.
    pub base: &'a TrainConfig,
    pub init_seed: u64,
    pub allocation_seed: u64,
    pub class_reweight: bool,
    pub train: &'a GroupedDataset,
    pub val: &'a GroupedDataset,
    pub test: &'a GroupedDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub val_worst_class_accuracy: f64,
    pub val_average_accuracy: f64,
    /// Test split, memorizing neurons dropped.
    pub test: Metrics,
    /// Test split, memorizing neurons kept.
    pub test_train_mode: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// 1-based; failed runs rank after every successful one.
    pub rank: usize,
    /// Position in the deduplicated grid.
    pub config_index: usize,
    pub point: GridPoint,
    /// `ok`, or the error that stopped the run.
    pub status: String,
    pub metrics: Option<RunMetrics>,
}

fn run_point(setup: &SweepSetup<'_>, point: &GridPoint) -> Result<RunMetrics> {
    let spec = setup.model.clone().with_fair_dropout(FairDropoutSpec {
        position: point.position,
        p_gen: point.p_gen,
        p_mem: point.p_mem,
    });
    let model = spec.build(setup.init_seed, setup.allocation_seed)?;
    let config = TrainConfig {
        learning_rate: point.learning_rate,
        weight_decay: point.weight_decay,
        record_history: false,
        ..setup.base.clone()
    };
    let (model, _) = train(model, setup.train, &[], &config, setup.class_reweight)?;
    let val = evaluate(&model, setup.val, Mode::Test)?;
    Ok(RunMetrics {
        val_worst_class_accuracy: val.worst_class_accuracy,
        val_average_accuracy: val.average_accuracy,
        test: evaluate(&model, setup.test, Mode::Test)?,
        test_train_mode: evaluate(&model, setup.test, Mode::Train)?,
    })
}

fn rank_order(a: &SweepRow, b: &SweepRow) -> Ordering {
    match (&a.metrics, &b.metrics) {
        (Some(x), Some(y)) => y
            .val_worst_class_accuracy
            .total_cmp(&x.val_worst_class_accuracy)
            .then(y.val_average_accuracy.total_cmp(&x.val_average_accuracy))
            .then(a.config_index.cmp(&b.config_index)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.config_index.cmp(&b.config_index),
    }
}

/// Train every distinct point and rank by validation worst-class accuracy
/// in test mode, then validation average accuracy, then grid order. A
/// failing run becomes a row with its error in `status`.
pub fn sweep(points: &[GridPoint], setup: &SweepSetup<'_>) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = dedup(points)
        .into_iter()
        .enumerate()
        .map(|(config_index, point)| {
            let (status, metrics) = match run_point(setup, &point) {
                Ok(m) => ("ok".to_string(), Some(m)),
                Err(e) => (format!("error: {e}"), None),
            };
            SweepRow {
                rank: 0,
                config_index,
                point,
                status,
                metrics,
            }
        })
        .collect();
    rows.sort_by(rank_order);
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}

/// Fixed leading columns of [`write_sweep_csv`]. Per-group test accuracies
/// follow as `test_mode_acc_y{y}_a{a}` then `train_mode_acc_y{y}_a{a}`.
pub const SWEEP_COLUMNS: [&str; 19] = [
    "rank",
    "config_index",
    "p_gen",
    "p_mem",
    "learning_rate",
    "weight_decay",
    "position",
    "status",
    "val_wca",
    "val_avg",
    "test_mode_avg",
    "test_mode_wga",
    "test_mode_wca",
    "test_mode_loss",
    "train_mode_avg",
    "train_mode_wga",
    "train_mode_wca",
    "train_mode_loss",
    "mode_wga_gap",
];

fn group_columns(rows: &[SweepRow]) -> Vec<(usize, usize)> {
    let mut groups: Vec<(usize, usize)> = rows
        .iter()
        .filter_map(|r| r.metrics.as_ref())
        .flat_map(|m| m.test.per_group.iter().map(|g| (g.y, g.a)))
        .collect();
    groups.sort_unstable();
    groups.dedup();
    groups
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let groups = group_columns(rows);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    for mode in ["test_mode", "train_mode"] {
        header.extend(groups.iter().map(|(y, a)| format!("{mode}_acc_y{y}_a{a}")));
    }
    w.write_record(&header)?;
    for r in rows {
        let p = &r.point;
        let mut rec = vec![
            r.rank.to_string(),
            r.config_index.to_string(),
            p.p_gen.to_string(),
            p.p_mem.to_string(),
            p.learning_rate.to_string(),
            p.weight_decay.to_string(),
            p.position.to_string(),
            r.status.clone(),
        ];
        let blanks = SWEEP_COLUMNS.len() - rec.len() + 2 * groups.len();
        match &r.metrics {
            Some(m) => {
                let summary = |x: &Metrics| {
                    [
                        x.average_accuracy,
                        x.worst_group_accuracy,
                        x.worst_class_accuracy,
                        x.mean_loss,
                    ]
                };
                let mut nums = vec![m.val_worst_class_accuracy, m.val_average_accuracy];
                nums.extend(summary(&m.test));
                nums.extend(summary(&m.test_train_mode));
                nums.push(m.test.worst_group_accuracy - m.test_train_mode.worst_group_accuracy);
                rec.extend(nums.iter().map(f64::to_string));
                for per_group in [&m.test.per_group, &m.test_train_mode.per_group] {
                    rec.extend(groups.iter().map(|&(y, a)| {
                        per_group
                            .iter()
                            .find(|g: &&GroupAccuracy| g.y == y && g.a == a)
                            .map_or(String::new(), |g| g.accuracy.to_string())
                    }));
                }
            }
            None => rec.extend(std::iter::repeat_n(String::new(), blanks)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
