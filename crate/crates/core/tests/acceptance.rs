//! Acceptance suite: one PASS/FAIL line per criterion, with the tolerance and
//! runtime budget it was held to. Criterion 11 runs only when a Cora dataset
//! directory is supplied through `TGNN_CORA_DIR` and never gates the result.
//!
//! Everything runs inside a single test so that the timed criteria do not
//! compete with sibling tests for the CPU.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use tgnn::bench::{bench_rank_scaling, bench_sum_rank_scaling, doubling_ranks};
use tgnn::graph::io::{load_dataset, DatasetPaths};
use tgnn::graph::{generate_sbm, SbmParams};
use tgnn::model::Pooling;
use tgnn::train::{train_node, TrainConfig};
use tgnn::verify::run_suite;

const SBM_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Bypasses the test harness capture so the report is always visible.
fn say(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

struct Outcome {
    id: &'static str,
    gating: bool,
    passed: Option<bool>,
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn suite_criterion(id: &'static str, suite: &str, budget: Option<Duration>) -> Outcome {
    let rep = run_suite(suite, 0).expect("suite runs");
    let in_time = budget.is_none_or(|b| rep.seconds < b.as_secs_f64());
    let passed = rep.passed && in_time;
    let budget_note = budget.map(|b| format!(" (budget {}s)", b.as_secs())).unwrap_or_default();
    say(&format!(
        "[{id:>2}] {} {suite}: cases {}, {} {:.3e} vs tol {:.0e}, {:.2}s{budget_note}{}",
        verdict(passed),
        rep.cases,
        if suite == "strictness" { "min |mixed|" } else { "max err" },
        rep.max_err,
        rep.tolerance,
        rep.seconds,
        if rep.detail.is_empty() { String::new() } else { format!("; {}", rep.detail) }
    ));
    Outcome { id, gating: true, passed: Some(passed) }
}

fn sbm(seed: u64) -> tgnn::graph::Graph {
    generate_sbm(&SbmParams {
        classes: 2,
        per_class: 200,
        p_in: 0.05,
        p_out: 0.005,
        seed,
        ..SbmParams::default()
    })
    .expect("SBM generates")
}

fn sbm_accuracy(seed: u64, pooling: Pooling) -> f64 {
    let cfg = TrainConfig {
        pooling,
        seed,
        epochs: 200,
        ..TrainConfig::default()
    };
    train_node(&sbm(seed), &cfg).expect("training runs").summary.test_acc.expect("node task")
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_accs(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")
}

/// Returns the outcome and the per-seed CP+sum accuracies for the ablation.
fn training_sanity() -> (Outcome, Vec<f64>) {
    let t = Instant::now();
    let accs: Vec<f64> = SBM_SEEDS.iter().map(|&s| sbm_accuracy(s, Pooling::CpSum)).collect();
    let secs = t.elapsed().as_secs_f64();
    let med = median(&accs);
    let passed = med >= 0.90 && secs < 120.0;
    say(&format!(
        "[ 8] {} SBM training (cp+sum, 200 epochs): median test acc {med:.4} vs >= 0.90 over seeds [{}], {secs:.1}s (budget 120s)",
        verdict(passed),
        fmt_accs(&accs)
    ));
    (Outcome { id: "8", gating: true, passed: Some(passed) }, accs)
}

fn ablation(cp_sum: &[f64]) -> Outcome {
    let t = Instant::now();
    let sum: Vec<f64> = SBM_SEEDS.iter().map(|&s| sbm_accuracy(s, Pooling::Sum)).collect();
    let cp: Vec<f64> = SBM_SEEDS.iter().map(|&s| sbm_accuracy(s, Pooling::Cp)).collect();
    // Accuracies are multiples of 1/|test|, so a tie is exact equality.
    let best_or_tied = (0..SBM_SEEDS.len())
        .filter(|&i| cp_sum[i] >= sum[i] && cp_sum[i] >= cp[i])
        .count();
    let gap = mean(cp_sum) - mean(&sum);
    let passed = gap >= -0.01 && best_or_tied >= 3;
    say(&format!(
        "[ 9] {} ablation: mean cp+sum {:.4}, sum {:.4}, cp {:.4} (cp+sum - sum = {gap:+.4} vs >= -0.01); cp+sum best or tied in {best_or_tied}/5 seeds vs >= 3; sum [{}], cp [{}], {:.1}s",
        verdict(passed),
        mean(cp_sum),
        mean(&sum),
        mean(&cp),
        fmt_accs(&sum),
        fmt_accs(&cp),
        t.elapsed().as_secs_f64()
    ));
    Outcome { id: "9", gating: true, passed: Some(passed) }
}

fn complexity() -> Outcome {
    let t = Instant::now();
    let ranks = doubling_ranks(8, 1024);
    let cp = bench_rank_scaling(64, 16, 1024, &ranks, 5).expect("bench runs");
    let sum = bench_sum_rank_scaling(64, 16, 1024, &ranks, 5).expect("bench runs");
    let secs = t.elapsed().as_secs_f64();
    let s_cp = cp.slope.expect("several ranks");
    let s_sum = sum.slope.expect("several ranks");
    let passed = (0.8..=1.2).contains(&s_cp) && s_sum.abs() <= 0.1 && secs < 120.0;
    let times: Vec<String> = cp.points.iter().map(|p| format!("{}:{:.0}us", p.x, p.time_ns / 1e3)).collect();
    say(&format!(
        "[10] {} rank scaling (F=64, N=1024, R=8..1024): cp slope {s_cp:.3} vs [0.8, 1.2], sum slope {s_sum:+.3} vs |.| <= 0.1, monotone {}, {secs:.1}s (budget 120s); {}",
        verdict(passed),
        cp.is_monotone(),
        times.join(" ")
    ));
    Outcome { id: "10", gating: true, passed: Some(passed) }
}

fn cora_stretch() -> Outcome {
    let Some(dir) = std::env::var_os("TGNN_CORA_DIR").map(PathBuf::from) else {
        say("[11] SKIP Cora reproduction (stretch, not gating): set TGNN_CORA_DIR to a directory with edges.tsv, features.csv, labels.csv");
        return Outcome { id: "11", gating: false, passed: None };
    };
    let t = Instant::now();
    let paths = DatasetPaths { splits: None, ..DatasetPaths::in_dir(&dir) };
    let accs: Vec<f64> = (0..10u64)
        .map(|run| {
            let g = load_dataset(&paths, run).expect("Cora loads");
            let cfg = TrainConfig { seed: run, ..TrainConfig::preset("cora").unwrap() };
            train_node(&g, &cfg).expect("training runs").summary.test_acc.unwrap()
        })
        .collect();
    let m = mean(&accs);
    let passed = m >= 0.80;
    say(&format!(
        "[11] {} Cora reproduction (stretch, not gating): mean test acc {m:.4} vs >= 0.80 over 10 random 60/20/20 splits [{}], {:.0}s",
        verdict(passed),
        fmt_accs(&accs),
        t.elapsed().as_secs_f64()
    ));
    Outcome { id: "11", gating: false, passed: Some(passed) }
}

#[test]
fn acceptance() {
    let start = Instant::now();
    say("acceptance suite");
    let mut outcomes = vec![
        suite_criterion("1", "eq1", Some(Duration::from_secs(5))),
        suite_criterion("2", "permutation", Some(Duration::from_secs(5))),
        suite_criterion("3", "multilinear", None),
        suite_criterion("4", "sum-tensor", Some(Duration::from_secs(60))),
        suite_criterion("5", "lemma", None),
        suite_criterion("6", "strictness", None),
        suite_criterion("7", "gradients", Some(Duration::from_secs(30))),
    ];
    let (sanity, cp_sum) = training_sanity();
    outcomes.push(sanity);
    outcomes.push(ablation(&cp_sum));
    outcomes.push(complexity());
    outcomes.push(cora_stretch());
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.gating && o.passed == Some(false))
        .map(|o| o.id)
        .collect();
    let passed = outcomes.iter().filter(|o| o.gating && o.passed == Some(true)).count();
    say(&format!(
        "acceptance: {passed}/10 gating criteria passed in {:.0}s{}",
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    ));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
