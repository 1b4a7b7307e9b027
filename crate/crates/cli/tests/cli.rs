use std::path::Path;
use std::process::{Command, Output};

use repq_train::metrics::{read_summary, RunMetrics};

fn repq(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_repq"));
    cmd.args(args).env_remove("REPQ_OUTPUT_DIR");
    if let Some(d) = out_dir {
        cmd.env("REPQ_OUTPUT_DIR", d);
    }
    cmd.output().unwrap()
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny_config(seeds: &str, extra: &str) -> String {
    format!(
        r#"model = "minivgg"
widths = [4, 4]
pools = [0]
topology = ["repvgg"]
{extra}
seeds = {seeds}
output_dir = "unused"
[dataset]
kind = "synthetic"
train_size = 40
eval_size = 20
[strategy]
name = "repq"
bn_mode = "estimate"
[strategy.fp]
epochs = 1
batch_size = 20
[strategy.qat]
epochs = 1
"#
    )
}

#[test]
fn bundled_plain_config_writes_an_eight_bit_summary_row() {
    let out = tempfile::tempdir().unwrap();
    let o = repq(&["run", configs().join("plain_8bit.toml").to_str().unwrap()], Some(out.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_summary(&out.path().join("summary.csv")).unwrap();
    let row = rows.iter().find(|r| r.bits == 8).unwrap();
    assert_eq!(row.strategy, "plain");
    assert!((0.0..=1.0).contains(&row.metric));
    assert!(out.path().join("seed_0/qat.ckpt").exists());
}

#[test]
fn three_seeds_give_three_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, tiny_config("[3, 4, 5]", "bits = 4")).unwrap();
    let out = dir.path().join("out");
    let o = repq(&["run", cfg.to_str().unwrap(), "--jobs", "2"], Some(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut metric_files = Vec::new();
    for e in walk(&out) {
        if e.file_name().unwrap() == "metrics.jsonl" {
            metric_files.push(e);
        }
    }
    assert_eq!(metric_files.len(), 3);
    for f in &metric_files {
        let m = RunMetrics::from_jsonl(&std::fs::read_to_string(f).unwrap()).unwrap();
        assert_eq!(m.records().len(), 2);
    }
    let rows = read_summary(&out.join("summary.csv")).unwrap();
    let seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [3, 3, 4, 4, 5, 5]);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn runs_are_reproducible_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, tiny_config("[1]", "bits = 4")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(repq(&["run", cfg.to_str().unwrap()], Some(&a)).status.success());
    assert!(repq(&["run", cfg.to_str().unwrap()], Some(&b)).status.success());
    for f in ["summary.csv", "seed_1/fp.ckpt", "seed_1/qat.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_bits_exits_with_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, tiny_config("[0]", "")).unwrap();
    let o = repq(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bits"));
    let o = repq(&["flops", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(repq(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(repq(&["verify", "--sabotage", "nope"], None).status.code(), Some(2));
    assert_eq!(repq(&["run"], None).status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_run_failure() {
    let o = repq(&["run", "/nonexistent/c.toml"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes_and_sabotage_fails_on_the_named_suite() {
    let o = repq(&["verify"], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 11);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");

    let o = repq(&["verify", "--json", "--sabotage", "bnfold"], None);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<&str> = v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["bn_fold"]);
}

#[test]
fn flops_report_prints_per_layer_rows_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, tiny_config("[0]", "bits = 4")).unwrap();
    let o = repq(&["flops", cfg.to_str().unwrap()], None);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("step total"));

    let o = repq(&["flops", "--json", cfg.to_str().unwrap()], None);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    let sum: u64 = layers.iter().map(|l| l["exact"]["stats"].as_u64().unwrap()).sum();
    assert_eq!(sum + v["exact_rest"]["stats"].as_u64().unwrap(), v["exact_total"]["stats"].as_u64().unwrap());
}
