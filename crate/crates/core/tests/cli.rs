use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgnn")).args(args).output().expect("binary runs")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(tgnn(&["--help"]).status.code(), Some(0));
    assert_eq!(tgnn(&["verify", "--suite", "nosuch"]).status.code(), Some(2));
    let ok = tgnn(&["verify", "--suite", "lemma"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let missing = tgnn(&["eval", "--checkpoint", "/nonexistent/checkpoint.json", "--dir", "."]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sbm_default_config_and_ablation_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sbm");
    let d = data.to_str().unwrap();
    assert!(tgnn(&["generate", "--out", d, "--seed", "1"]).status.success());
    for f in ["edges.tsv", "features.csv", "labels.csv", "split.txt"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let full = tmp.path().join("cp_sum");
    let out = tgnn(&["train", "--dir", d, "--seed", "1", "--out", full.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&full);
    assert!(s["test_acc"].as_f64().unwrap() >= 0.90, "{s}");
    assert_eq!(s["pooling"], "cp+sum");

    let eval = tgnn(&["eval", "--checkpoint", full.join("checkpoint.json").to_str().unwrap(), "--dir", d]);
    assert!(eval.status.success());
    let e: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(e["acc"].as_f64().unwrap().to_bits(), s["test_acc"].as_f64().unwrap().to_bits());

    let sum = tmp.path().join("sum");
    let out = tgnn(&["train", "--dir", d, "--seed", "1", "--pooling", "sum", "--out", sum.to_str().unwrap()]);
    assert!(out.status.success());
    let t = summary(&sum);
    assert_eq!(t["pooling"], "sum");
    assert_eq!(t["config"]["seed"], s["config"]["seed"]);
    assert!(t["params"].as_u64().unwrap() < s["params"].as_u64().unwrap());
}

#[test]
fn training_is_deterministic_given_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sbm");
    let d = data.to_str().unwrap();
    assert!(tgnn(&["generate", "--out", d, "--per-class", "40", "--seed", "5"]).status.success());
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let o = tmp.path().join(run);
        let args = ["train", "--dir", d, "--rank", "16", "--epochs", "10", "--seed", "9", "--out", o.to_str().unwrap()];
        assert!(tgnn(&args).status.success());
        let lines: Vec<serde_json::Value> = fs::read_to_string(o.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("seconds");
                v
            })
            .collect();
        metrics.push(lines);
    }
    assert_eq!(metrics[0].len(), 10);
    assert_eq!(metrics[0], metrics[1]);
}
