//! Acceptance suite: one PASS/FAIL line per criterion on stderr; per-seed
//! details appear with `--nocapture`. Known shortfalls print FAIL with the
//! reason. The test itself fails only when a checked value regresses.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, RngAlgorithm, TestRng, TestRunner};
use semifscil::distill::{
    adaptive_weight, estimate_uncertainty, estimate_uncertainty_traced, mean_class_variance, refine_exemplars_with, NoiseModel,
    UncertaintyConfig,
};
use semifscil::equilibrium::{class_balanced_select, partition_confident, Balance, Quota, SelectionPolicy};
use semifscil::exec::Execution;
use semifscil::exemplar::herding_select;
use semifscil::harness::golden::{check_row, find, round2, rows_for};
use semifscil::harness::{
    average_accuracy, performance_drop, run_experiment, run_experiment_with, Ablation, ExperimentConfig, RunOptions, RunReport,
};
use semifscil::model::{nme_classify, ParamLocation, PrototypeTable};
use semifscil::protocol::UnlabeledItem;

struct Outcome {
    pass: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: false,
        detail: detail.into(),
    }
}

/// Written to the stderr handle directly so the summary survives output capture.
fn line(n: usize, name: &str, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {status:<4} {name}: {}", o.detail);
}

fn criterion_1() -> Outcome {
    let icarl = find("cub", "FSCIL", "iCaRL").unwrap();
    assert_eq!(round2(performance_drop(68.68, 21.16)), 47.52);
    assert!(check_row(icarl).pd_ok);
    let ours = find("cub", "Semi-FSCIL", "UaD-CE").unwrap();
    assert_eq!(ours.sessions.len(), 11);
    assert_eq!(round2(performance_drop(75.17, 60.72)), 14.45);
    let avg = average_accuracy(ours.sessions).unwrap();
    assert!((round2(avg) - 65.70).abs() <= 0.01 + 1e-9, "{avg}");
    assert!(check_row(ours).ok());

    let rows: Vec<_> = rows_for("cub").map(check_row).collect();
    let bad: Vec<String> = rows
        .iter()
        .filter(|c| !c.pd_ok)
        .map(|c| {
            format!(
                "{} {} reports PD {:.2}, its sessions give {:.2}",
                c.row.task, c.row.method, c.row.pd, c.computed_pd
            )
        })
        .collect();
    // the source table itself is inconsistent on exactly this row
    assert_eq!(bad.len(), 1, "{bad:?}");
    assert!(bad[0].starts_with("Semi-FSCIL SS-NCM "), "{bad:?}");
    let summary = format!(
        "{} of {} PD values reproduced, UaD-CE average {:.4}",
        rows.len() - bad.len(),
        rows.len(),
        avg
    );
    if bad.is_empty() {
        pass(summary)
    } else {
        fail(format!("{summary}; {} (source row inconsistent)", bad.join("; ")))
    }
}

fn criterion_2() -> Outcome {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    if readme.contains("not reproduced") && readme.contains("desk") {
        pass("README states that full-scale accuracies are not reproduced; criteria 3 to 9 substitute")
    } else {
        fail("README lacks the statement on full-scale accuracies")
    }
}

const SEEDS: std::ops::Range<u64> = 0..10;

/// Final overall accuracy and PD of the desk preset per seed, pinned from
/// the first verified runs.
const PINNED: [(f64, f64); 10] = [
    (75.15, 9.52),
    (74.45, 9.55),
    (73.65, 10.18),
    (76.25, 9.33),
    (74.85, 6.98),
    (76.45, 6.88),
    (73.50, 10.67),
    (72.80, 10.03),
    (74.60, 5.98),
    (74.00, 10.50),
];
const PINNED_MEAN: (f64, f64) = (74.57, 8.96);
const PIN_TOLERANCE: f64 = 2.0;
const TIME_LIMIT: Duration = Duration::from_secs(180);

fn desk_run(seed: u64, ablation: Option<Ablation>) -> RunReport {
    let mut config = ExperimentConfig::desk();
    config.seed = seed;
    if let Some(a) = ablation {
        config = config.with_ablation(a);
    }
    run_experiment_with(
        &config,
        &RunOptions {
            exec: Execution::Parallel,
            resume: None,
            in_memory: true,
        },
    )
    .unwrap()
}

fn final_novel(r: &RunReport) -> f64 {
    r.final_session().novel_acc.unwrap()
}

fn criterion_3(full: &[RunReport]) -> Outcome {
    let config = ExperimentConfig::desk();
    let started = Instant::now();
    let timed = run_experiment_with(
        &config,
        &RunOptions {
            exec: Execution::Sequential,
            resume: None,
            in_memory: true,
        },
    )
    .unwrap();
    let elapsed = started.elapsed();
    assert_eq!(
        timed.final_session().overall_acc,
        full[0].final_session().overall_acc,
        "sequential and parallel differ"
    );
    assert!(elapsed < TIME_LIMIT, "single-core run took {elapsed:?}");

    for (seed, (r, &(acc, pd))) in full.iter().zip(&PINNED).enumerate() {
        let got = (r.final_session().overall_acc, r.pd);
        println!(
            "    seed {seed}: final {:.2} (pin {acc:.2})  PD {:.2} (pin {pd:.2})",
            got.0, got.1
        );
        assert!(
            (got.0 - acc).abs() <= PIN_TOLERANCE && (got.1 - pd).abs() <= PIN_TOLERANCE,
            "seed {seed} left its pin"
        );
    }
    let n = full.len() as f64;
    let mean_acc = full.iter().map(|r| r.final_session().overall_acc).sum::<f64>() / n;
    let mean_pd = full.iter().map(|r| r.pd).sum::<f64>() / n;
    assert!((mean_acc - PINNED_MEAN.0).abs() <= PIN_TOLERANCE && (mean_pd - PINNED_MEAN.1).abs() <= PIN_TOLERANCE);

    let acc_in = full
        .iter()
        .filter(|r| (r.final_session().overall_acc - PINNED_MEAN.0).abs() <= PIN_TOLERANCE)
        .count();
    let pd_in = full.iter().filter(|r| (r.pd - PINNED_MEAN.1).abs() <= PIN_TOLERANCE).count();
    let summary = format!(
        "single-core run {:.1}s; mean final {mean_acc:.2} PD {mean_pd:.2}; seeds within ±2 of the pinned mean: final {acc_in}/{}, PD {pd_in}/{}",
        elapsed.as_secs_f64(),
        full.len(),
        full.len()
    );
    if acc_in == full.len() && pd_in == full.len() {
        pass(summary)
    } else {
        fail(format!("{summary} (5-shot sampling spreads PD beyond ±2 across seeds)"))
    }
}

fn criterion_4(full: &[RunReport], no_uad: &[RunReport], no_ce: &[RunReport], naive: &[RunReport]) -> Outcome {
    let n = full.len() as f64;
    let mut pd_wins = 0;
    let mut novel_wins = 0;
    let (mut pd_gap, mut novel_gap) = (0.0, 0.0);
    for (seed, ((f, u), c)) in full.iter().zip(no_uad).zip(no_ce).enumerate() {
        let dp = u.pd - f.pd;
        let dn = final_novel(f) - final_novel(c);
        pd_wins += usize::from(dp >= 0.0);
        novel_wins += usize::from(dn >= 0.0);
        pd_gap += dp / n;
        novel_gap += dn / n;
        println!(
            "    seed {seed}: PD full {:.2} no-uad {:.2}  novel full {:.2} no-ce {:.2}",
            f.pd,
            u.pd,
            final_novel(f),
            final_novel(c)
        );
    }
    let base = |rs: &[RunReport]| rs.iter().map(|r| r.final_session().base_acc).sum::<f64>() / n;
    println!(
        "    naive final base {:.2} vs full {:.2} (informational)",
        base(naive),
        base(full)
    );
    let summary = format!(
        "paired means over seeds 0-9: PD(no-uad) - PD(full) = {pd_gap:+.2} ({pd_wins}/10 seeds), novel(full) - novel(no-ce) = {novel_gap:+.2} ({novel_wins}/10 seeds)"
    );
    if pd_gap >= 0.0 && novel_gap >= 0.0 {
        pass(summary)
    } else {
        fail(summary)
    }
}

fn criterion_5() -> Outcome {
    let worst = (0..3)
        .map(|seed| check_gradients(&gradient_case(seed), Execution::Sequential))
        .fold(0.0, f64::max);
    pass(format!(
        "worst relative error {worst:.1e} over every unfrozen parameter of 3 toy models"
    ))
}

fn criterion_6() -> Outcome {
    for seed in 0..200u64 {
        let n = 1 + seed as usize % 10;
        let feats = random_inputs(n, 1 + seed as usize % 4, seed);
        for m in 0..=n {
            assert_eq!(herding_select(&feats, m).unwrap(), oracle_herding(&feats, m));
        }
    }
    for seed in 0..100u64 {
        let dim = 1 + seed as usize % 5;
        let protos: BTreeMap<usize, Vec<f64>> = random_inputs(1 + seed as usize % 7, dim, seed + 1000)
            .into_iter()
            .enumerate()
            .collect();
        let queries = random_inputs(50, dim, seed);
        assert_eq!(
            nme_classify(
                &queries,
                &PrototypeTable {
                    prototypes: protos.clone(),
                    normalized: false
                }
            ),
            oracle_nme(&queries, &protos)
        );
    }
    for seed in 0..60u64 {
        let model = toy_model(4, &[6], 5, &[0, 1, 2, 3, 4], seed);
        let inputs = random_inputs(40, 4, seed + 7);
        let pool: Vec<UnlabeledItem> = inputs
            .iter()
            .enumerate()
            .map(|(id, x)| UnlabeledItem { id, input: x.clone() })
            .collect();
        let gamma = [0.0, 0.4, 0.6, 0.9][seed as usize % 4];
        let policy = SelectionPolicy {
            gamma,
            quota: Quota::Equal,
            iteration_budget: 4,
            iterations: 1,
            balance: Balance::ClassBalanced,
        };
        let got = partition_confident(&pool, &model, &policy, &[2, 3, 4]).unwrap();
        let want = oracle_partition(&inputs, &model, gamma, &[2, 3, 4]);
        let got: BTreeMap<usize, Vec<usize>> = got
            .into_iter()
            .map(|(c, l)| (c, l.into_iter().map(|x| x.id).collect()))
            .collect();
        let want: BTreeMap<usize, Vec<usize>> = want
            .into_iter()
            .map(|(c, l)| (c, l.into_iter().map(|(p, _)| p).collect()))
            .collect();
        assert_eq!(got, want);
    }
    let model = toy_model(3, &[8], 4, &[0, 1, 2, 3], 5);
    let memory = random_memory(&[0, 1, 2, 3], 2, 3, 21);
    let cfg = UncertaintyConfig {
        noise_scale: 0.5,
        ..Default::default()
    };
    let noise = NoiseModel::isotropic(0.5);
    let r = refine_exemplars_with(Execution::Parallel, &memory, &model, &cfg, &noise, 2, 77).unwrap();
    let kept: Vec<usize> = r.refined.iter().map(|e| e.sample_id).collect();
    assert_eq!((memory.len(), kept.len()), (8, 6));
    assert_eq!(kept, oracle_refine(&memory, &model, &cfg, &noise, 77));
    pass("herding (200 sets), NME (100 tables), partition (60 pools) and refinement 8 -> 6 match their oracles exactly")
}

fn criterion_7() -> Outcome {
    let zeta = adaptive_weight(1.0, 80, 60, 60, 5).unwrap().zeta;
    assert!((zeta - 4.6188).abs() < 1e-4, "{zeta}");
    for base in [0.5, 1.0, 2.0, 7.25] {
        assert_eq!(adaptive_weight(base, 33, 33, 9, 9).unwrap().zeta, base);
    }
    pass(format!(
        "adaptive_weight(1.0, 80, 60, 60, 5) = {zeta:.4}; unit ratios return the base weight exactly"
    ))
}

fn criterion_8() -> Outcome {
    let config = ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = (
        prop::collection::vec(0usize..40, 1..8),
        0usize..60,
        prop::collection::vec(0.0f64..=1.0, 8),
        any::<bool>(),
    );
    let events = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |(sizes, budget, props, proportional)| {
        let quota = if proportional {
            Quota::Proportions((0..sizes.len()).map(|c| (c, props[c])).collect())
        } else {
            Quota::Equal
        };
        let policy = SelectionPolicy {
            gamma: 0.0,
            quota,
            iteration_budget: budget,
            iterations: 1,
            balance: Balance::ClassBalanced,
        };
        let lists = lists_from_sizes(&sizes);
        let Ok(batch) = class_balanced_select(&lists, &policy, 2, 0) else {
            // infeasible proportion tables are rejected before selection
            prop_assert!(proportional);
            return Ok(());
        };
        let mut counts = vec![0; sizes.len()];
        batch.items.iter().for_each(|i| counts[i.class_id] += 1);
        let q = budget / sizes.len();
        if !proportional && sizes.iter().all(|&n| n >= q) {
            prop_assert!(counts.iter().all(|&c| c == q));
        }
        let ev: Vec<_> = sizes.iter().zip(&counts).enumerate().map(|(c, (&n, &s))| (c, n, s)).collect();
        prop_assert!(monotone_violations(&ev).is_empty(), "{ev:?}");
        events.set(events.get() + 1);
        Ok(())
    });
    match result {
        Ok(()) => pass(format!(
            "1000 randomized pools and policies, {} selection events checked",
            events.get()
        )),
        Err(e) => fail(e.to_string()),
    }
}

fn criterion_9() -> Outcome {
    let model = toy_model(4, &[6], 5, &[0, 1, 2], 9);
    let inputs = random_inputs(20, 4, 3);
    for (i, x) in inputs.iter().enumerate() {
        assert_eq!(
            estimate_uncertainty(&model, x, 10, &NoiseModel::isotropic(0.0), i as u64).unwrap(),
            0.0
        );
    }
    let mut constant = model.clone();
    constant
        .param_mut(ParamLocation::Backbone { group: 0, tensor: 0 })
        .iter_mut()
        .for_each(|w| *w = 0.0);
    for (i, x) in inputs.iter().enumerate() {
        assert_eq!(
            estimate_uncertainty(&constant, x, 10, &NoiseModel::isotropic(1.0), i as u64).unwrap(),
            0.0
        );
    }
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let t = estimate_uncertainty_traced(&model, x, 10, &NoiseModel::isotropic(0.4), i as u64).unwrap();
        let classes = t.probs[0].len();
        let passes = t.probs.len() as f64;
        let mut total = 0.0;
        for c in 0..classes {
            let mean = t.probs.iter().map(|p| p[c]).sum::<f64>() / passes;
            total += t.probs.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / passes;
        }
        worst = worst.max((total / classes as f64 - t.lambda).abs());
        assert_eq!(mean_class_variance(&t.probs), t.lambda);
    }
    assert!(worst < 1e-9);
    pass(format!(
        "zero noise and input-independent model give 0; trace recomputation error {worst:.1e}"
    ))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let mut c = ExperimentConfig::desk();
        c.seed = 3;
        c.output_dir = dir.path().join(name);
        run_experiment(&c).unwrap();
        std::fs::read(c.output_dir.join("metrics.csv")).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    if a == b {
        pass(format!("two runs wrote identical metrics.csv ({} bytes)", a.len()))
    } else {
        fail("metrics.csv differs between identical runs")
    }
}

#[test]
fn acceptance() {
    let variants = [None, Some(Ablation::NoUad), Some(Ablation::NoCe), Some(Ablation::Naive)];
    let runs: Vec<Vec<RunReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| s.spawn(move || SEEDS.map(|seed| desk_run(seed, v)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let results = [
        ("table arithmetic", criterion_1()),
        ("full-scale accuracies", criterion_2()),
        ("desk-scale end-to-end", criterion_3(&runs[0])),
        ("ablation orderings", criterion_4(&runs[0], &runs[1], &runs[2], &runs[3])),
        ("gradient check", criterion_5()),
        ("oracle equivalence", criterion_6()),
        ("adaptive weight", criterion_7()),
        ("class balance", criterion_8()),
        ("uncertainty degenerate cases", criterion_9()),
        ("determinism", criterion_10()),
    ];
    let _ = writeln!(std::io::stderr());
    for (i, (name, o)) in results.iter().enumerate() {
        line(i + 1, name, o);
    }
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, (_, o))| !o.pass)
        .map(|(i, _)| i + 1)
        .collect();
    // criteria 1 and 3 carry documented shortfalls; any other FAIL is a regression
    assert!(failed.iter().all(|c| [1, 3].contains(c)), "unexpected failures: {failed:?}");
}
