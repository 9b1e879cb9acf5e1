//! Experiment configs and the commands behind the `fairdrop` binary.
//!
//! Every command reads JSON, writes CSV and JSON into an output directory,
//! and draws all randomness from one root seed through [`Seeds`].

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::arch::{FairDropoutSpec, ModelSpec};
use crate::checkpoint;
use crate::data::{self, Group, GroupedDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::memprobe::{self, ProbeReport, ProbeRequest};
use crate::metrics::{evaluate, generalization_gap, Metrics};
use crate::nn::{Mode, Model};
use crate::seed::{self, Seeds};
use crate::sweep::{self, Grid, GridPoint, SweepRow, SweepSetup};
use crate::trainer::{self, History, TrainConfig};

/// Where an experiment's three splits come from. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated in memory; the spec's own seed is replaced by the data subseed.
    Synthetic(SyntheticSpec),
    /// A JSON [`SyntheticSpec`] on disk, same seeding as `synthetic`.
    SpecPath(PathBuf),
    /// Pre-generated CSV files.
    Csv {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
    },
}

/// Network shape. Input and class counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fair_dropout: Option<FairDropoutSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub minority_samples: usize,
    pub majority_samples: usize,
    /// Size of the reference batch the example's loss is compared against.
    pub reference_size: usize,
    /// Greedy steps before giving up; `None` allows every hidden neuron.
    pub max_iters: Option<usize>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            minority_samples: 100,
            majority_samples: 100,
            reference_size: 64,
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelConfig,
    /// `seed` here is ignored in favour of the shuffle subseed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub class_reweight: bool,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = checkpoint::to_canonical_json(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        cfg.base_dir = parent_dir(path);
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Train, validation and test splits.
    pub fn datasets(&self) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
        let synthetic = |spec: &SyntheticSpec| {
            let mut spec = spec.clone();
            spec.seed = self.seeds().data;
            spec.generate()
        };
        match &self.data {
            DataSource::Synthetic(spec) => synthetic(spec),
            DataSource::SpecPath(p) => synthetic(&read_json(&self.resolve(p))?),
            DataSource::Csv { train, val, test } => Ok((
                data::load_csv(&self.resolve(train), Split::Train)?,
                data::load_csv(&self.resolve(val), Split::Val)?,
                data::load_csv(&self.resolve(test), Split::Test)?,
            )),
        }
    }

    pub fn model_spec(&self, train: &GroupedDataset) -> ModelSpec {
        ModelSpec {
            input: train.feature_dim(),
            hidden: self.model.hidden.clone(),
            classes: train.classes(),
            fair_dropout: self.model.fair_dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().shuffle,
            ..self.train.clone()
        }
    }
}

/// Write `train.csv`, `val.csv`, `test.csv` and per-split group statistics
/// (`group_stats.csv` for train, `group_stats_val.csv`, `group_stats_test.csv`)
/// with columns `group_y, group_a, count, fraction`. The spec's seed is
/// used as is.
pub fn cmd_gen_data(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (train, val, test) = spec.generate()?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for ds in [&train, &val, &test] {
        let split = ds.split().as_str();
        let path = out_dir.join(format!("{split}.csv"));
        data::save_csv(ds, &path)?;
        written.push(path);
        let stats = match ds.split() {
            Split::Train => out_dir.join("group_stats.csv"),
            _ => out_dir.join(format!("group_stats_{split}.csv")),
        };
        data::write_group_stats(&data::group_stats(ds), &stats)?;
        written.push(stats);
    }
    Ok(written)
}

pub struct TrainOutput {
    pub model: Model,
    pub history: History,
}

fn write_history(history: &History, out_dir: &Path) -> Result<()> {
    trainer::write_history_csv(history, &out_dir.join("history.csv"))?;
    write_json(history, &out_dir.join("history.json"))
}

/// Train and write `checkpoint.json`, `history.csv` and `history.json`.
/// On divergence the partial history is still written before the error
/// is returned.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutput> {
    let (train, _val, test) = cfg.datasets()?;
    let seeds = cfg.seeds();
    let model = cfg.model_spec(&train).build(seeds.init, seeds.allocation)?;
    fs::create_dir_all(out_dir)?;
    let result = trainer::train(
        model,
        &train,
        &[&test],
        &cfg.train_config(),
        cfg.class_reweight,
    );
    match result {
        Ok((model, history)) => {
            checkpoint::save(&model, &out_dir.join("checkpoint.json"))?;
            write_history(&history, out_dir)?;
            Ok(TrainOutput { model, history })
        }
        Err(Error::Diverged {
            epoch,
            batch,
            loss,
            history,
        }) => {
            write_history(&history, out_dir)?;
            Err(Error::Diverged {
                epoch,
                batch,
                loss,
                history,
            })
        }
        Err(e) => Err(e),
    }
}

/// Groups ordered by size, smallest first; ties by group order.
fn groups_by_size(ds: &GroupedDataset) -> Vec<(Group, &[usize])> {
    let mut groups: Vec<(Group, &[usize])> = ds
        .group_index()
        .iter()
        .map(|(g, idx)| (*g, idx.as_slice()))
        .collect();
    groups.sort_by_key(|(g, idx)| (idx.len(), *g));
    groups
}

fn sample_ids(
    ds: &GroupedDataset,
    pool: &[usize],
    n: usize,
    what: &str,
    rng: &mut rand_chacha::ChaCha8Rng,
    warnings: &mut Vec<String>,
) -> Vec<u64> {
    let take = if n > pool.len() {
        warnings.push(format!(
            "{what} sample of {n} capped at the {} available examples",
            pool.len()
        ));
        pool.len()
    } else {
        n
    };
    let mut ids: Vec<u64> = index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| ds.examples()[pool[i]].id)
        .collect();
    ids.sort_unstable();
    ids
}

pub struct ProbeOutput {
    pub report: ProbeReport,
    pub warnings: Vec<String>,
}

/// Probe a checkpoint in train mode. The minority sample comes from the smallest training
/// group and the majority sample from the largest. Writes
/// `probe_report.csv` and `probe_summary.json`.
pub fn cmd_probe(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<ProbeOutput> {
    let model = checkpoint::load(checkpoint_path)?;
    let (train, _val, test) = cfg.datasets()?;
    if model.input_width() != train.feature_dim() || model.classes() != train.classes() {
        return Err(Error::Config(format!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            model.input_width(),
            model.classes(),
            train.feature_dim(),
            train.classes()
        )));
    }
    let model = model.with_mode(Mode::Train);
    let groups = groups_by_size(&train);
    let (Some(smallest), Some(largest)) = (groups.first(), groups.last()) else {
        return Err(Error::Probe("training split has no groups".into()));
    };
    let mut rng = seed::rng(cfg.seeds().probe);
    let mut warnings = Vec::new();
    let s = &cfg.probe;
    let minority = sample_ids(
        &train,
        smallest.1,
        s.minority_samples,
        "minority",
        &mut rng,
        &mut warnings,
    );
    let majority = sample_ids(
        &train,
        largest.1,
        s.majority_samples,
        "majority",
        &mut rng,
        &mut warnings,
    );
    let all: Vec<usize> = (0..train.len()).collect();
    let reference = sample_ids(
        &train,
        &all,
        s.reference_size,
        "reference",
        &mut rng,
        &mut warnings,
    );
    let report = memprobe::probe_report(
        &model,
        &ProbeRequest {
            train: &train,
            test: &test,
            minority_ids: &minority,
            majority_ids: &majority,
            reference_ids: &reference,
            max_iters: s.max_iters.unwrap_or(usize::MAX),
        },
    )?;
    fs::create_dir_all(out_dir)?;
    memprobe::write_report_csv(&report, &out_dir.join("probe_report.csv"))?;
    write_json(&report.summary, &out_dir.join("probe_summary.json"))?;
    Ok(ProbeOutput { report, warnings })
}

/// A base experiment plus the grid to sweep over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub points: Vec<GridPoint>,
    #[serde(default)]
    pub grid: Option<Grid>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: SweepConfig = read_json(path)?;
        cfg.experiment.base_dir = parent_dir(path);
        Ok(cfg)
    }

    /// Explicit points first, then the grid's product.
    pub fn all_points(&self) -> Vec<GridPoint> {
        let mut pts = self.points.clone();
        if let Some(g) = &self.grid {
            pts.extend(g.points());
        }
        pts
    }
}

/// Run the sweep and write `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(cfg: &SweepConfig, out_dir: &Path) -> Result<Vec<SweepRow>> {
    let exp = &cfg.experiment;
    let (train, val, test) = exp.datasets()?;
    let seeds = exp.seeds();
    let mut spec = exp.model_spec(&train);
    spec.fair_dropout = None;
    let base = exp.train_config();
    let rows = sweep::sweep(
        &cfg.all_points(),
        &SweepSetup {
            model: &spec,
            base: &base,
            init_seed: seeds.init,
            allocation_seed: seeds.allocation,
            class_reweight: exp.class_reweight,
            train: &train,
            val: &val,
            test: &test,
        },
    );
    fs::create_dir_all(out_dir)?;
    sweep::write_sweep_csv(&rows, &out_dir.join("sweep.csv"))?;
    write_json(&rows, &out_dir.join("sweep.json"))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub mode: Mode,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub evaluations: Vec<SplitReport>,
}

/// Evaluate a checkpoint on every split in both modes. Writes `report.json`
/// and `group_report.csv` with columns `mode, group_y, group_a,
/// train_accuracy, val_accuracy, test_accuracy, generalization_gap`.
pub fn cmd_report(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<Report> {
    let model = checkpoint::load(checkpoint_path)?;
    let (train, val, test) = cfg.datasets()?;
    let modes: &[Mode] = if model.fair_dropout().is_some() {
        &[Mode::Train, Mode::Test]
    } else {
        &[Mode::Test]
    };
    let mut evaluations = Vec::new();
    for &mode in modes {
        for ds in [&train, &val, &test] {
            evaluations.push(SplitReport {
                split: ds.split(),
                mode,
                metrics: evaluate(&model, ds, mode)?,
            });
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("group_report.csv"))?;
    w.write_record([
        "mode",
        "group_y",
        "group_a",
        "train_accuracy",
        "val_accuracy",
        "test_accuracy",
        "generalization_gap",
    ])?;
    for &mode in modes {
        let get = |split: Split| {
            evaluations
                .iter()
                .find(|e| e.split == split && e.mode == mode)
                .map(|e| &e.metrics)
                .expect("evaluated above")
        };
        let (tr, va, te) = (get(Split::Train), get(Split::Val), get(Split::Test));
        for (g, gap) in generalization_gap(tr, te) {
            let acc = |m: &Metrics| m.group_accuracy(g).map_or(String::new(), |a| a.to_string());
            w.write_record([
                mode.to_string(),
                g.y.to_string(),
                g.a.to_string(),
                acc(tr),
                acc(va),
                acc(te),
                gap.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let report = Report { evaluations };
    write_json(&report, &out_dir.join("report.json"))?;
    Ok(report)
}
