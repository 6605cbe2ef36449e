//! End-to-end checks of the binary: exit codes and a tiny cached pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_udaknn"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to spawn udaknn")
}

/// A configuration small enough that the whole pipeline runs in seconds.
const TINY_CFG: &str = r#"
[experiment]
seed = 5
baselines = ["basic", "copy"]
n_general = 300
n_indomain = 150
n_dev = 16
n_test = 16
max_sentence_len = 8
measure_similarity = false

[model]
d_model = 32
n_heads = 2
n_enc_layers = 2
n_dec_layers = 2
d_ff = 64
adapter_hidden = 32
max_len = 32

[train]
batch_tokens = 400
warmup_steps = 4
base_steps = 12
adapter_steps = 6
finetune_steps = 4

[knn]
nlist = 8
nprobe = 8
kmeans_iters = 3
"#;

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["no-such-command"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    // config with an unknown key is a usage error, not a data error
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[experiment]\nnot_a_key = 1\n").unwrap();
    let out = run(
        &["--config", cfg.to_str().unwrap(), "--out", "run", "gen-data"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["--config", "does-not-exist.toml", "--out", "run", "gen-data"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn tiny_pipeline_runs_and_lambda_zero_matches_plain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, TINY_CFG).unwrap();
    let cfg = cfg.to_str().unwrap();

    let out = run(&["--config", cfg, "--out", "run", "run-all"], tmp.path());
    assert!(
        out.status.success(),
        "run-all failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let results = std::fs::read_to_string(tmp.path().join("run/results.tsv")).unwrap();
    assert!(results.lines().count() >= 3, "results:\n{results}");
    assert!(results.contains("basic") && results.contains("copy"));

    // retrieval with lambda = 0 must produce the plain NMT output
    let plain = run(
        &["--config", cfg, "--out", "run", "translate", "--domain", "medical"],
        tmp.path(),
    );
    assert!(plain.status.success());
    let with_store = run(
        &[
            "--config", cfg, "--out", "run", "translate", "--domain", "medical",
            "--method", "copy", "--lambda", "0.0",
        ],
        tmp.path(),
    );
    assert!(with_store.status.success());
    assert_eq!(plain.stdout, with_store.stdout);

    // the trace file records per-step candidate distributions
    let trace = tmp.path().join("trace.tsv");
    let src = tmp.path().join("src.txt");
    let data = std::fs::read_to_string(tmp.path().join("run/data/medical.test.tsv")).unwrap();
    let first_src = data.lines().next().unwrap().split('\t').next().unwrap();
    std::fs::write(&src, format!("{first_src}\n")).unwrap();
    let traced = run(
        &[
            "--config", cfg, "--out", "run", "translate", "--domain", "medical",
            "--method", "copy", "--lambda", "0.5",
            "--input", src.to_str().unwrap(),
            "--trace", trace.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(traced.status.success());
    let trace = std::fs::read_to_string(&trace).unwrap();
    assert!(trace.contains("nmt") && trace.contains("knn") && trace.contains("interp"));
}
