//! Acceptance suite. Each test checks one criterion at its stated tolerance
//! and prints a single `criterion N: PASS|FAIL` line.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fairdrop::memprobe::{brute_force_min_flip, critical_neurons, probe_report, ProbeRequest};
use fairdrop::metrics::evaluate;
use fairdrop::nn::{dense_forward, finite_difference_check, Layer};
use fairdrop::seed::Seeds;
use fairdrop::tensor::Tensor;
use fairdrop::{
    checkpoint, train, DropoutPosition, FairDropoutConfig, FairDropoutSpec, Group, GroupSpec,
    GroupedDataset, GroupedExample, Mode, Model, ModelSpec, Pass, Split, SyntheticSpec,
    TrainConfig,
};

fn report(n: usize, pass: bool, detail: String) {
    println!(
        "criterion {n}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Tolerance for thresholds on differences of count ratios.
const EPS: f64 = 1e-9;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const HIDDEN: usize = 64;
const MINORITY: Group = Group { y: 1, a: 1 };

/// Chosen grid point, its validation key, and its test-split mode difference.
type Candidate = ((f64, f64), (f64, f64), f64);

/// CelebA-like proportions, spurious block stronger than the core block,
/// and enough noise dimensions for the network to memorize.
fn regime(data_seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        group_spec: GroupSpec::celeba_like(20_000),
        core_dim: 1,
        spurious_dim: 1,
        noise_dim: 100,
        core_separation: 1.5,
        spurious_separation: 3.0,
        noise_std: 1.0,
        seed: data_seed,
        val_count: 2000,
        test_count: 2000,
    }
}

fn train_config(seeds: &Seeds, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        weight_decay: 0.0,
        epochs,
        batch_size: 32,
        seed: seeds.shuffle,
        record_history: false,
    }
}

struct ErmRun {
    model: Model,
    train: GroupedDataset,
    test: GroupedDataset,
}

fn erm_runs() -> &'static [ErmRun] {
    static RUNS: OnceLock<Vec<ErmRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| {
                let seeds = Seeds::from_root(s);
                let (train_ds, _val, test) = regime(seeds.data).generate().unwrap();
                let model = ModelSpec::new(train_ds.feature_dim(), vec![HIDDEN], 2)
                    .build(seeds.init, seeds.allocation)
                    .unwrap();
                let (model, _) =
                    train(model, &train_ds, &[], &train_config(&seeds, 40), false).unwrap();
                ErmRun {
                    model,
                    train: train_ds,
                    test,
                }
            })
            .collect()
    })
}

fn strip_fair_dropout(model: &Model) -> Model {
    let layers: Vec<Layer> = model
        .layers()
        .iter()
        .filter(|l| !matches!(l, Layer::FairDropout(_)))
        .cloned()
        .collect();
    Model::new(layers, model.seed()).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn criterion_1_identity() {
    let (train_ds, _, test) = SyntheticSpec {
        group_spec: GroupSpec::balanced(3, 2, 120),
        core_dim: 3,
        spurious_dim: 2,
        noise_dim: 3,
        core_separation: 1.0,
        spurious_separation: 1.0,
        noise_std: 1.0,
        seed: 11,
        val_count: 60,
        test_count: 60,
    }
    .generate()
    .unwrap();
    let positions = [
        DropoutPosition::Hidden(0),
        DropoutPosition::Hidden(1),
        DropoutPosition::Projection,
    ];
    let mut checked = 0;
    let mut failures = Vec::new();
    for (i, &position) in positions.iter().enumerate() {
        for p_mem in [0.0, 0.2, 0.9] {
            let spec = ModelSpec::new(8, vec![7, 5], 3).with_fair_dropout(FairDropoutSpec {
                position,
                p_gen: 1.0,
                p_mem,
            });
            let fd = spec.build(i as u64, 99).unwrap();
            let plain = strip_fair_dropout(&fd);
            // a few SGD steps so the comparison is not only at initialization
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 16,
                ..TrainConfig::default()
            };
            let (fd, _) = train(fd, &train_ds, &[], &cfg, false).unwrap();
            let (plain, _) = train(plain, &train_ds, &[], &cfg, false).unwrap();
            for mode in [Mode::Train, Mode::Test] {
                let a = fd.with_mode(mode);
                let b = plain.with_mode(mode);
                for e in test.examples() {
                    let pass = Pass::example(e.id);
                    let la = a.forward(&e.features, pass).unwrap();
                    let lb = b.forward(&e.features, pass).unwrap();
                    let (loss_a, ga) = a.loss_and_gradient(&e.features, e.y, pass).unwrap();
                    let (loss_b, gb) = b.loss_and_gradient(&e.features, e.y, pass).unwrap();
                    let flat = |g: &fairdrop::nn::GradientRecord| {
                        g.layers
                            .iter()
                            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
                            .collect::<Vec<f64>>()
                    };
                    if bits(&la) != bits(&lb)
                        || loss_a.to_bits() != loss_b.to_bits()
                        || bits(&flat(&ga)) != bits(&flat(&gb))
                    {
                        failures.push(format!("{position} p_mem={p_mem} {mode} id={}", e.id));
                    }
                    checked += 1;
                }
                let ma =
                    checkpoint::to_canonical_json(&evaluate(&a, &test, mode).unwrap()).unwrap();
                let mb =
                    checkpoint::to_canonical_json(&evaluate(&b, &test, mode).unwrap()).unwrap();
                if ma != mb {
                    failures.push(format!("metrics {position} p_mem={p_mem} {mode}"));
                }
            }
        }
    }
    report(
        1,
        failures.is_empty(),
        format!(
            "{checked} example passes bitwise equal, {} mismatches",
            failures.len()
        ),
    )
}

const CHILD_ENV: &str = "FAIRDROP_ALLOCATION_CHILD";

/// Configs and a digest of every allocation they produce.
fn allocation_digest() -> (u64, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut digest = 0xcbf2_9ce4_8422_2325u64;
    let mut problems = Vec::new();
    for _ in 0..20 {
        let width = rng.random_range(1..=256);
        let p_gen = rng.random_range(0.0..1.0);
        let p_mem = rng.random_range(0.0..=1.0);
        let cfg = FairDropoutConfig::new(width, p_gen, p_mem, rng.random()).unwrap();
        let (gen, k) = (cfg.gen_count(), cfg.mem_count());
        for id in 0..10_000u64 {
            let alloc = cfg.allocate(id);
            let idx = &alloc.mem_indices;
            let distinct = idx.windows(2).all(|w| w[0] < w[1]);
            if idx.len() != k || !distinct || idx.iter().any(|&i| i < gen || i >= width) {
                problems.push(format!("H={width} id={id}"));
            }
            for &i in idx {
                digest = (digest ^ i as u64).wrapping_mul(0x0100_0000_01b3);
            }
            digest = (digest ^ 0xff).wrapping_mul(0x0100_0000_01b3);
        }
    }
    (digest, problems)
}

#[test]
fn allocation_digest_child() {
    if std::env::var_os(CHILD_ENV).is_some() {
        println!("digest={}", allocation_digest().0);
    }
}

fn child_digest() -> Option<u64> {
    let out = Command::new(std::env::current_exe().ok()?)
        .args([
            "--exact",
            "allocation_digest_child",
            "--nocapture",
            "--test-threads=1",
        ])
        .env(CHILD_ENV, "1")
        .output()
        .ok()?;
    String::from_utf8_lossy(&out.stdout).lines().find_map(|l| {
        l.split_once("digest=")?
            .1
            .split_whitespace()
            .next()?
            .parse()
            .ok()
    })
}

#[test]
fn criterion_2_fairness() {
    let (digest, problems) = allocation_digest();
    let first = child_digest();
    let second = child_digest();
    let deterministic = first == Some(digest) && second == Some(digest);
    report(
        2,
        problems.is_empty() && deterministic,
        format!(
            "200000 allocations over 20 configs, {} violations, digests {digest} / {first:?} / {second:?}",
            problems.len()
        ),
    )
}

fn kink_free(model: &Model, x: &[f64]) -> bool {
    let mut h = Tensor::vector(x.to_vec());
    for l in model.layers() {
        match l {
            Layer::Dense(d) => h = dense_forward(&h, d).unwrap(),
            Layer::Relu(_) => {
                if h.data().iter().any(|v| v.abs() < 1e-3) {
                    return false;
                }
                h = h.map(|v| v.max(0.0));
            }
            Layer::FairDropout(_) => {}
        }
    }
    true
}

#[test]
fn criterion_3_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut models = 0;
    while models < 50 {
        let input = rng.random_range(1..=6);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=8)).collect();
        let classes = rng.random_range(2..=4);
        let mut spec = ModelSpec::new(input, hidden.clone(), classes);
        if rng.random_bool(0.5) {
            spec = spec.with_fair_dropout(FairDropoutSpec {
                position: if rng.random_bool(0.5) {
                    DropoutPosition::Projection
                } else {
                    DropoutPosition::Hidden(rng.random_range(0..depth))
                },
                p_gen: rng.random_range(0.0..1.0),
                p_mem: rng.random_range(0.0..1.0),
            });
        }
        let mut model = spec.build(rng.random(), rng.random()).unwrap();
        if rng.random_bool(0.5) {
            model.set_mode(Mode::Test);
        }
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        if !kink_free(&model, &x) {
            continue;
        }
        let label = rng.random_range(0..classes);
        let err =
            finite_difference_check(&model, &x, label, Pass::example(rng.random()), 1e-5).unwrap();
        worst = worst.max(err);
        models += 1;
    }
    report(
        3,
        worst < 1e-4,
        format!("max relative error {worst:.3e} over 50 models"),
    )
}

#[test]
fn criterion_4_minority_gap() {
    let mut diffs = Vec::new();
    for run in erm_runs() {
        let tr = evaluate(&run.model, &run.train, Mode::Test).unwrap();
        let te = evaluate(&run.model, &run.test, Mode::Test).unwrap();
        let minority_gap =
            tr.group_accuracy(MINORITY).unwrap() - te.group_accuracy(MINORITY).unwrap();
        let average_gap = tr.average_accuracy - te.average_accuracy;
        diffs.push(minority_gap - average_gap);
    }
    let m = median(&diffs);
    report(
        4,
        m >= 0.15 - EPS,
        format!("median minority gap minus average gap {m:.3}, per seed {diffs:.3?}"),
    )
}

#[test]
fn criterion_5_mode_divergence() {
    let grid: Vec<(f64, f64)> = [0.3, 0.4, 0.5, 0.6]
        .iter()
        .flat_map(|&g| [0.2, 0.4].map(|m| (g, m)))
        .collect();
    let mut diffs = Vec::new();
    let mut chosen = Vec::new();
    for &s in &SEEDS {
        let seeds = Seeds::from_root(s);
        let (train_ds, val, test) = regime(seeds.data).generate().unwrap();
        let mut best: Option<Candidate> = None;
        for &(p_gen, p_mem) in &grid {
            let model = ModelSpec::new(train_ds.feature_dim(), vec![HIDDEN], 2)
                .with_fair_dropout(FairDropoutSpec {
                    position: DropoutPosition::Hidden(0),
                    p_gen,
                    p_mem,
                })
                .build(seeds.init, seeds.allocation)
                .unwrap();
            let (model, _) =
                train(model, &train_ds, &[], &train_config(&seeds, 30), false).unwrap();
            let v = evaluate(&model, &val, Mode::Test).unwrap();
            let key = (v.worst_class_accuracy, v.average_accuracy);
            if best.is_none_or(|(_, k, _)| key > k) {
                let test_mode = evaluate(&model, &test, Mode::Test).unwrap();
                let train_mode = evaluate(&model, &test, Mode::Train).unwrap();
                let diff = test_mode.worst_group_accuracy - train_mode.worst_group_accuracy;
                best = Some(((p_gen, p_mem), key, diff));
            }
        }
        let (point, _, diff) = best.unwrap();
        chosen.push(point);
        diffs.push(diff);
    }
    let m = median(&diffs);
    report(
        5,
        m >= 0.10 - EPS,
        format!(
            "median test-mode minus train-mode WGA {m:.3}, per seed {diffs:.3?}, tuned {chosen:?}"
        ),
    )
}

fn sample(rng: &mut ChaCha8Rng, ds: &GroupedDataset, g: Group, n: usize) -> Vec<u64> {
    let pool = &ds.group_index()[&g];
    let mut ids: Vec<u64> = rand::seq::index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| ds.examples()[pool[i]].id)
        .collect();
    ids.sort_unstable();
    ids
}

fn probe_erm() -> &'static fairdrop::memprobe::ProbeReport {
    static REPORT: OnceLock<fairdrop::memprobe::ProbeReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let run = &erm_runs()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(Seeds::from_root(0).probe);
        let minority = sample(&mut rng, &run.train, MINORITY, 50);
        let majority = sample(&mut rng, &run.train, Group::new(0, 0), 50);
        let reference: Vec<u64> = rand::seq::index::sample(&mut rng, run.train.len(), 64)
            .into_iter()
            .map(|i| i as u64)
            .collect();
        probe_report(
            &run.model,
            &ProbeRequest {
                train: &run.train,
                test: &run.test,
                minority_ids: &minority,
                majority_ids: &majority,
                reference_ids: &reference,
                max_iters: HIDDEN,
            },
        )
        .unwrap()
    })
}

#[test]
fn criterion_6_localization_asymmetry() {
    let rep = probe_erm();
    let removed = |minority: bool| {
        rep.rows
            .iter()
            .filter(|r| r.minority == minority)
            .map(|r| r.n_removed as f64)
            .collect::<Vec<_>>()
    };
    let (mi, ma) = (median(&removed(true)), median(&removed(false)));
    report(
        6,
        mi < ma,
        format!(
            "median |removed| minority {mi} vs majority {ma} (flipped {}/{} and {}/{})",
            rep.summary.minority.flipped,
            rep.summary.minority.examples,
            rep.summary.majority.flipped,
            rep.summary.majority.examples
        ),
    )
}

#[test]
fn criterion_7_drop_benefit() {
    let rep = probe_erm();
    let base = rep.summary.baseline_test_wga;
    let minority: Vec<_> = rep.rows.iter().filter(|r| r.minority).collect();
    let ok = minority
        .iter()
        .filter(|r| r.test_wga_after_drop >= base)
        .count();
    let share = ok as f64 / minority.len() as f64;
    report(
        7,
        share >= 0.60 - EPS,
        format!(
            "{ok}/{} minority drops keep test WGA >= {base:.3}",
            minority.len()
        ),
    )
}

/// Greedy vs exhaustive search on 30 small networks. Returns the number
/// of cases with an oracle set of size <= 2 and every violation found.
fn oracle_check(random_bias: bool) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut small_oracle = 0;
    let mut violations = Vec::new();
    for net in 0..30 {
        let input = rng.random_range(2..=5);
        let total = rng.random_range(2..=12);
        let hidden = if total >= 4 && rng.random_bool(0.5) {
            let first = rng.random_range(2..=total - 2);
            vec![first, total - first]
        } else {
            vec![total]
        };
        let classes = rng.random_range(2..=3);
        let mut model = Model::mlp(input, &hidden, classes, rng.random()).unwrap();
        if random_bias {
            for d in model.dense_layers_mut() {
                for b in d.bias.data_mut() {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
        }
        let mut draw = |id: u64| {
            let features: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
            GroupedExample {
                id,
                y: 0,
                a: 0,
                features,
            }
        };
        let mut example = draw(0);
        example.y = model.predict(&example.features, Pass::example(0)).unwrap();
        let reference: Vec<GroupedExample> = (1..=8)
            .map(|id| {
                let mut e = draw(id);
                e.y = model.predict(&e.features, Pass::example(id)).unwrap();
                e
            })
            .collect();
        let refs: Vec<&GroupedExample> = reference.iter().collect();
        let greedy = critical_neurons(&model, &example, &refs, usize::MAX).unwrap();
        let limit = 4.min(total);
        match brute_force_min_flip(&model, &example, limit).unwrap() {
            Some(m) => {
                if m <= 2 {
                    small_oracle += 1;
                    if !greedy.flipped {
                        violations.push(format!("net {net}: oracle {m}, greedy did not flip"));
                    }
                }
                if greedy.flipped && greedy.removed.len() < m {
                    violations.push(format!(
                        "net {net}: greedy {} below oracle {m}",
                        greedy.removed.len()
                    ));
                }
            }
            None if greedy.flipped && greedy.removed.len() <= limit => {
                violations.push(format!(
                    "net {net}: greedy flipped where oracle found nothing"
                ));
            }
            None => {}
        }
    }
    (small_oracle, violations)
}

#[test]
fn criterion_8_oracle_consistency() {
    let (biased_small, biased_violations) = oracle_check(true);
    println!(
        "criterion 8 (supplementary, random biases, not asserted): {biased_small} oracle sets of size <= 2, violations {biased_violations:?}"
    );
    let (small, violations) = oracle_check(false);
    report(
        8,
        violations.is_empty(),
        format!("30 initialized networks, {small} with an oracle set of size <= 2, violations {violations:?}"),
    )
}

#[test]
fn criterion_9_group_bookkeeping() {
    let counts = GroupSpec::celeba_like(20_000).counts().unwrap();
    let expected: BTreeMap<Group, usize> = [
        (Group::new(0, 0), 8800),
        (Group::new(0, 1), 8180),
        (Group::new(1, 0), 2840),
        (Group::new(1, 1), 180),
    ]
    .into_iter()
    .collect();
    let (train_ds, _, _) = regime(5).generate().unwrap();
    let minority_fraction = train_ds.group_index()[&MINORITY].len() as f64 / train_ds.len() as f64;
    let mut ok = counts == expected && minority_fraction == 0.009;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..100 {
        let classes = rng.random_range(2..=4);
        let attributes = rng.random_range(1..=3);
        let n = rng.random_range(classes * attributes..200);
        let dim = 3;
        let examples: Vec<GroupedExample> = (0..n)
            .map(|i| {
                let (y, a) = if i < classes * attributes {
                    (i / attributes, i % attributes)
                } else {
                    (
                        rng.random_range(0..classes),
                        rng.random_range(0..attributes),
                    )
                };
                GroupedExample {
                    id: i as u64,
                    y,
                    a,
                    features: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        let ds = GroupedDataset::new(Split::Test, classes, attributes, examples).unwrap();
        let model = Model::mlp(dim, &[4], classes, trial).unwrap();
        let m = evaluate(&model, &ds, Mode::Test).unwrap();
        let mut class_totals = vec![(0usize, 0usize); classes];
        for g in &m.per_group {
            class_totals[g.y].0 += g.correct;
            class_totals[g.y].1 += g.count;
        }
        let per_class: Vec<f64> = class_totals
            .iter()
            .map(|&(c, n)| c as f64 / n as f64)
            .collect();
        let wca = per_class.iter().copied().fold(f64::INFINITY, f64::min);
        let wga = m
            .per_group
            .iter()
            .map(|g| g.accuracy)
            .fold(f64::INFINITY, f64::min);
        ok &= m.worst_group_accuracy == wga
            && wga <= m.worst_class_accuracy
            && (m.worst_class_accuracy - wca).abs() < 1e-12
            && per_class
                .iter()
                .zip(&m.per_class_accuracy)
                .all(|(a, b)| (a - b).abs() < 1e-12)
            && wga <= m.average_accuracy;
    }
    report(
        9,
        ok,
        format!(
            "counts {counts:?}, minority fraction {minority_fraction}, 100 randomized evaluations"
        ),
    )
}
