use std::path::Path;
use std::process::{Command, Output};

use attractsp::cli::{hash_file, Manifest, RunConfig};
use attractsp::serving::{display_len, RefinedResult};

const SMALL: &[&str] = &[
    "--world.n_users=150",
    "--world.n_keywords=800",
    "--world.n_categories=8",
    "--world.n_ads=200",
    "--world.n_sf_impressions=500",
    "--world.n_ad_sessions=800",
    "--model.dims.keyword_dim=12",
    "--model.dims.feature_dim=4",
    "--model.dims.hidden1=16",
    "--model.dims.hidden2=16",
    "--training.max_epochs_main=2",
    "--training.max_epochs_aux=1",
    "--experiment.pages=2",
    "--experiment.ads_per_page=10",
    "--experiment.bench_pages=3",
    "--seed=4",
];

fn attractsp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attractsp"))
        .args(args)
        .args(SMALL)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = attractsp(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn generate_train_eval_writes_reports_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["generate"]);
    ok(out, &["train", "--strategy", "alternate"]);
    let stdout = ok(out, &["eval"]);
    assert!(stdout.starts_with("task,instances,auc\nmain,"), "{stdout}");

    let csv = std::fs::read_to_string(out.join("auc.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "task,instances,auc");
    assert_eq!(rows.len(), 3, "main and aux rows expected: {csv}");
    for row in &rows[1..] {
        let v: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let manifest = Manifest::load(&out.join("run.json")).unwrap();
    let commands: Vec<&str> = manifest.runs.iter().map(|r| r.command.as_str()).collect();
    assert_eq!(commands, ["generate", "train", "eval"]);
    let train = &manifest.runs[1];
    assert_eq!(train.config_hash, train.config.hash().unwrap());
    assert_eq!(train.config.seed, 4);
    assert!(train.outputs.iter().any(|p| p.ends_with("model.ckpt")));
    for input in &train.inputs {
        assert_eq!(input.sha256, hash_file(Path::new(&input.path)).unwrap());
    }
    // the recorded config reproduces the run on its own
    let again: RunConfig = RunConfig::from_value(serde_json::to_value(&train.config).unwrap()).unwrap();
    assert_eq!(&again, &train.config);
}

#[test]
fn aux_evaluation_of_a_basic_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["generate"]);
    ok(out, &["train", "--strategy", "basic", "--variant", "basic"]);
    let main_only = ok(out, &["eval"]);
    assert_eq!(main_only.lines().count(), 2);
    let o = attractsp(out, &["eval", "--experiment.eval_tasks=[\"aux\"]"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("variant lacks auxiliary head"));
}

#[test]
fn refine_and_serve_bench_respect_the_exhibition_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["generate"]);
    ok(out, &["train", "--strategy", "pretrain", "--variant", "augmented", "--features", "profile"]);
    ok(out, &["refine", "--k", "1", "--budget", "20", "--emphasis", "off"]);
    let text = std::fs::read_to_string(out.join("refined.jsonl")).unwrap();
    let results: Vec<RefinedResult> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(results.len(), 20);
    for r in &results {
        assert!(display_len(&r.display) <= 20);
        assert_eq!(r.chosen_sps.len(), 1);
        assert!(r.display.starts_with(&r.chosen_sps[0]));
        assert!(!r.display.contains('【'));
    }
    let bench = ok(out, &["serve-bench"]);
    assert!(bench.starts_with("pages,ads_per_page,candidates_per_ad,p50_ms,p95_ms,p99_ms"));
    assert!(out.join("bench_pages.csv").is_file());
}

#[test]
fn abtest_with_oracle_treatment_reports_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["generate"]);
    let text = ok(out, &["abtest", "--experiment.ab_treatment=oracle", "--experiment.ab_impressions=4000"]);
    assert!(text.contains("oracle-top-2"), "{text}");
    let csv = std::fs::read_to_string(out.join("ab.csv")).unwrap();
    let fields: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let counts: u64 = fields[2..6].iter().map(|f| f.parse::<u64>().unwrap()).sum();
    assert_eq!(counts, 4000);
}

#[test]
fn gradcheck_exits_zero_when_gradients_match() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--experiment.gradcheck_configs=3"]);
    assert!(stdout.contains("0 failed"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 3);
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = attractsp(dir.path(), &["compile"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage:"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"training": {"learning_rate": "fast"}}"#).unwrap();
    let o = attractsp(dir.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("training.learning_rate"));

    let o = attractsp(dir.path(), &["train", "--world.nusers=3"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("world.nusers"));
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = attractsp(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("vocab.jsonl") && err.contains("missing input file"), "{err}");
}
