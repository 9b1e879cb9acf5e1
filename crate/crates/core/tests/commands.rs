use std::fs;
use std::path::Path;
use std::process::Command;

use fairdrop::experiment::{
    cmd_gen_data, cmd_probe, cmd_report, cmd_sweep, cmd_train, DataSource, ExperimentConfig,
    ModelConfig, ProbeSettings, SweepConfig,
};
use fairdrop::sweep::{Grid, GridPoint};
use fairdrop::{
    checkpoint, DropoutPosition, Error, FairDropoutSpec, GroupSpec, SyntheticSpec, TrainConfig,
};

fn synthetic(group_spec: GroupSpec) -> SyntheticSpec {
    SyntheticSpec {
        group_spec,
        core_dim: 1,
        spurious_dim: 1,
        noise_dim: 6,
        core_separation: 1.5,
        spurious_separation: 3.0,
        noise_std: 1.0,
        seed: 4,
        val_count: 200,
        test_count: 200,
    }
}

fn experiment(fd: Option<(f64, f64)>, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: 17,
        data: DataSource::Synthetic(synthetic(GroupSpec::celeba_like(2_000))),
        model: ModelConfig {
            hidden: vec![12],
            fair_dropout: fd.map(|(p_gen, p_mem)| FairDropoutSpec {
                position: DropoutPosition::Hidden(0),
                p_gen,
                p_mem,
            }),
        },
        train: TrainConfig {
            epochs,
            batch_size: 64,
            ..TrainConfig::default()
        },
        class_reweight: false,
        probe: ProbeSettings::default(),
        out_dir: "unused".into(),
        base_dir: Default::default(),
    }
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records()
        .map(|rec| rec.unwrap()[idx].to_string())
        .collect()
}

#[test]
fn gen_data_is_reproducible_and_creates_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = synthetic(GroupSpec::celeba_like(20_000));
    let a = dir.path().join("nested/one");
    let b = dir.path().join("two");
    let files = cmd_gen_data(&spec, &a).unwrap();
    cmd_gen_data(&spec, &b).unwrap();
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let stats = read(&a.join("group_stats.csv"));
    assert!(stats.starts_with("group_y,group_a,count,fraction\n"));
    let fractions = column(&stats, "fraction");
    assert!(fractions.contains(&"0.009".to_string()));
}

#[test]
fn train_writes_both_mode_columns_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(Some((0.2, 0.2)), 3);
    let out = cmd_train(&cfg, &dir.path().join("a")).unwrap();
    assert_eq!(out.history.epochs.len(), 3);
    cmd_train(&cfg, &dir.path().join("b")).unwrap();
    for f in ["checkpoint.json", "history.csv", "history.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let hist = read(&dir.path().join("a/history.csv"));
    assert_eq!(column(&hist, "train_mode_wga").len(), 3);
    assert_eq!(column(&hist, "test_mode_wga").len(), 3);
}

#[test]
fn identity_layer_gives_identical_mode_columns() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&experiment(Some((1.0, 0.3)), 3), dir.path()).unwrap();
    let hist = read(&dir.path().join("history.csv"));
    for prefix in ["", "trainset_"] {
        for metric in ["avg", "wga", "wca", "loss"] {
            assert_eq!(
                column(&hist, &format!("{prefix}train_mode_{metric}")),
                column(&hist, &format!("{prefix}test_mode_{metric}"))
            );
        }
    }
}

#[test]
fn zero_epochs_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(Some((0.5, 0.2)), 0);
    let out = cmd_train(&cfg, dir.path()).unwrap();
    assert!(out.history.epochs.is_empty());
    assert_eq!(
        column(&read(&dir.path().join("history.csv")), "epoch").len(),
        0
    );
    let (train, _, _) = cfg.datasets().unwrap();
    let seeds = cfg.seeds();
    let init = cfg
        .model_spec(&train)
        .build(seeds.init, seeds.allocation)
        .unwrap();
    let saved = checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(
        checkpoint::to_string(&saved).unwrap(),
        checkpoint::to_string(&init).unwrap()
    );
}

#[test]
fn divergence_keeps_partial_history() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment(None, 3);
    cfg.train.learning_rate = 1e300;
    match cmd_train(&cfg, dir.path()) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
    assert!(dir.path().join("history.csv").exists());
    assert!(!dir.path().join("checkpoint.json").exists());
}

#[test]
fn probe_report_has_one_row_per_sampled_example() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment(None, 2);
    cfg.data = DataSource::Synthetic(synthetic(GroupSpec::balanced(2, 2, 800)));
    cmd_train(&cfg, dir.path()).unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let out = cmd_probe(&cfg, &ckpt, &dir.path().join("probe")).unwrap();
    assert!(out.warnings.is_empty());
    assert_eq!(out.report.rows.len(), 200);
    let csv_text = read(&dir.path().join("probe/probe_report.csv"));
    assert!(csv_text.starts_with(
        "example_id,group_y,group_a,n_removed,flipped,train_wga_after_drop,test_wga_after_drop"
    ));
    assert_eq!(column(&csv_text, "example_id").len(), 200);
    let summary: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("probe/probe_summary.json"))).unwrap();
    assert!(summary["minority"]["test_wga_delta"]["median"].is_number());
}

#[test]
fn probe_caps_small_groups_and_handles_untrained_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(None, 0);
    cmd_train(&cfg, dir.path()).unwrap();
    let out = cmd_probe(&cfg, &dir.path().join("checkpoint.json"), dir.path()).unwrap();
    assert_eq!(out.warnings.len(), 1, "{:?}", out.warnings);
    assert_eq!(out.report.summary.minority.examples, 18);
    for (row, res) in out.report.rows.iter().zip(&out.report.results) {
        assert_eq!(row.n_removed, res.removed.len());
        if res.iterations == 0 && res.flipped {
            assert_eq!(
                row.test_wga_after_drop,
                out.report.summary.baseline_test_wga
            );
        }
    }
    assert!(out
        .report
        .results
        .iter()
        .any(|r| r.flipped && r.iterations == 0));
}

#[test]
fn probe_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&experiment(None, 0), dir.path()).unwrap();
    let mut other = experiment(None, 0);
    let mut s = synthetic(GroupSpec::celeba_like(2_000));
    s.noise_dim = 3;
    other.data = DataSource::Synthetic(s);
    assert!(cmd_probe(&other, &dir.path().join("checkpoint.json"), dir.path()).is_err());
}

#[test]
fn report_lists_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(Some((0.5, 0.2)), 1);
    cmd_train(&cfg, dir.path()).unwrap();
    cmd_report(&cfg, &dir.path().join("checkpoint.json"), dir.path()).unwrap();
    let text = read(&dir.path().join("group_report.csv"));
    assert_eq!(column(&text, "mode").len(), 8);
}

fn sweep_cfg(grid: Grid) -> SweepConfig {
    let mut experiment = experiment(None, 1);
    experiment.data = DataSource::Synthetic(synthetic(GroupSpec::celeba_like(1_000)));
    SweepConfig {
        experiment,
        points: vec![],
        grid: Some(grid),
    }
}

#[test]
fn sweep_row_counts_follow_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let lr = Grid {
        p_gen: vec![0.5],
        p_mem: vec![0.1],
        learning_rate: vec![1e-3, 1e-4, 1e-5],
        weight_decay: vec![1e-4],
        position: vec![DropoutPosition::Projection],
    };
    assert_eq!(cmd_sweep(&sweep_cfg(lr), dir.path()).unwrap().len(), 3);
    let p_gen = Grid {
        p_gen: vec![0.2, 0.4, 0.5],
        p_mem: vec![0.1],
        learning_rate: vec![0.1],
        weight_decay: vec![0.0],
        position: vec![DropoutPosition::Hidden(0)],
    };
    let rows = cmd_sweep(&sweep_cfg(p_gen.clone()), dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    let text = read(&dir.path().join("sweep.csv"));
    assert_eq!(column(&text, "rank"), ["1", "2", "3"]);
    let again = cmd_sweep(&sweep_cfg(p_gen), &dir.path().join("again")).unwrap();
    assert_eq!(rows, again);
    assert_eq!(text, read(&dir.path().join("again/sweep.csv")));

    let single = SweepConfig {
        points: vec![GridPoint {
            p_gen: 0.3,
            p_mem: 0.2,
            learning_rate: 0.1,
            weight_decay: 0.0,
            position: DropoutPosition::Projection,
        }],
        grid: None,
        ..sweep_cfg(Grid::reference())
    };
    assert_eq!(cmd_sweep(&single, dir.path()).unwrap().len(), 1);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairdrop"))
}

#[test]
fn binary_runs_end_to_end_with_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    fs::write(
        &spec_path,
        serde_json::to_string(&synthetic(GroupSpec::celeba_like(1_000))).unwrap(),
    )
    .unwrap();
    let mut exp = experiment(Some((0.4, 0.2)), 1);
    exp.data = DataSource::SpecPath("spec.json".into());
    let exp_path = dir.path().join("exp.json");
    fs::write(&exp_path, serde_json::to_string(&exp).unwrap()).unwrap();
    let out = dir.path().join("out");

    let status = bin()
        .args(["gen-data", "--config"])
        .arg(&spec_path)
        .env("FAIRDROP_OUT", &out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(out.join("train.csv").exists());

    let loaded = ExperimentConfig::load(&exp_path).unwrap();
    assert_eq!(loaded.data, exp.data);
    let status = bin()
        .args(["train", "--seed", "5", "--config"])
        .arg(&exp_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    assert!(out.join("checkpoint.json").exists());

    let status = bin()
        .args(["probe", "--config"])
        .arg(&exp_path)
        .arg("--checkpoint")
        .arg(out.join("checkpoint.json"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    assert!(String::from_utf8_lossy(&status.stderr).contains("warning"));
}

#[test]
fn binary_fails_on_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    for args in [&["train"][..], &["sweep"][..]] {
        let status = bin().args(args).arg("--config").arg(&bad).output().unwrap();
        assert!(!status.status.success());
    }
    let status = bin().args(["train"]).output().unwrap();
    assert!(!status.status.success());
}
