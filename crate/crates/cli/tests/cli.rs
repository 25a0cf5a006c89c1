use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn data(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(rel)
        .to_string_lossy()
        .into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("streamcap-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_streamcap"));
    cmd.args(args).env_remove("TREVOR_SEED");
    if let Some(s) = seed {
        cmd.env("TREVOR_SEED", s);
    }
    cmd.output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn sweep(metrics: &Path, seed: &str) -> Output {
    run(
        &[
            "simulate",
            "--dag",
            &data("wordcount/dag.json"),
            "--gt",
            &data("wordcount/truth.json"),
            "--config",
            &data("wordcount/config-training.json"),
            "--sweep",
            "--duration",
            "300",
            "--emit-metrics",
            metrics.to_str().unwrap(),
        ],
        Some(seed),
    )
}

/// Models trained once from a simulated sweep and shared by the tests below.
fn models() -> &'static PathBuf {
    static MODELS: OnceLock<PathBuf> = OnceLock::new();
    MODELS.get_or_init(|| {
        let metrics = scratch("shared-metrics.jsonl");
        json(&sweep(&metrics, "7"));
        let out = scratch("shared-models.json");
        let v = json(&run(
            &[
                "train",
                "--dag",
                &data("wordcount/dag.json"),
                "--metrics",
                metrics.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            None,
        ));
        assert_eq!(v["models"], 3);
        out
    })
}

fn predict(config: &str) -> Value {
    json(&run(
        &[
            "predict",
            "--dag",
            &data("wordcount/dag.json"),
            "--models",
            models().to_str().unwrap(),
            "--config",
            &data(config),
        ],
        None,
    ))
}

#[test]
fn help_succeeds_and_unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["--help"], None).status.code(), Some(0));
    assert_eq!(run(&["predict", "--bogus"], None).status.code(), Some(2));
}

#[test]
fn missing_model_file_is_a_usage_error() {
    let out = run(
        &[
            "predict",
            "--dag",
            &data("wordcount/dag.json"),
            "--models",
            "/nonexistent/models.json",
            "--config",
            &data("wordcount/config-shared.json"),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_positive_target_is_a_usage_error() {
    for target in ["0", "-5"] {
        let out = run(
            &[
                "allocate",
                "--dag",
                &data("wordcount/dag.json"),
                "--models",
                models().to_str().unwrap(),
                &format!("--target={target}"),
            ],
            None,
        );
        assert_eq!(out.status.code(), Some(2), "target {target}");
    }
}

#[test]
fn simulate_requires_a_seed_and_env_overrides_flag() {
    let base = [
        "simulate",
        "--dag",
        &data("wordcount/dag.json"),
        "--gt",
        &data("wordcount/truth.json"),
        "--config",
        &data("wordcount/config-shared.json"),
        "--rate",
        "500",
        "--duration",
        "60",
    ];
    assert_eq!(run(&base, None).status.code(), Some(2));

    let mut with_flag = base.to_vec();
    with_flag.extend(["--seed", "3"]);
    assert_eq!(json(&run(&with_flag, None))["seed"], 3);
    assert_eq!(json(&run(&with_flag, Some("9")))["seed"], 9);
}

#[test]
fn training_on_empty_metrics_fails() {
    let empty = scratch("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = run(
        &[
            "train",
            "--dag",
            &data("wordcount/dag.json"),
            "--metrics",
            empty.to_str().unwrap(),
            "--out",
            scratch("unused.json").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shared_containers_are_bound_by_the_stream_manager() {
    let v = predict("wordcount/config-shared.json");
    let kinds: Vec<&str> = v["bottlenecks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["kind"].as_str().unwrap())
        .collect();
    assert!(kinds.contains(&"sm-cpu"), "{kinds:?}");
    assert!(v["max_rate"].as_f64().unwrap() > 0.0);
}

#[test]
fn single_container_has_no_link_bottleneck() {
    let v = predict("wordcount/config-training.json");
    assert!(v["bottlenecks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|b| b["kind"] != "link"));
}

#[test]
fn dump_lp_writes_the_program() {
    let lp = scratch("program.lp");
    let out = run(
        &[
            "predict",
            "--dag",
            &data("wordcount/dag.json"),
            "--models",
            models().to_str().unwrap(),
            "--config",
            &data("wordcount/config-shared.json"),
            "--dump-lp",
            lp.to_str().unwrap(),
        ],
        None,
    );
    json(&out);
    assert!(!std::fs::read_to_string(&lp).unwrap().trim().is_empty());
}

#[test]
fn allocation_meets_the_adjusted_target() {
    let cfg = scratch("alloc.json");
    let v = json(&run(
        &[
            "allocate",
            "--dag",
            &data("wordcount/dag.json"),
            "--models",
            models().to_str().unwrap(),
            "--target",
            "3000",
            "--policy",
            &data("policy-half-machine.json"),
            "--out",
            cfg.to_str().unwrap(),
        ],
        None,
    ));
    let adjusted = v["adjusted_target"].as_f64().unwrap();
    assert!((adjusted - 3000.0 * 1.15).abs() < 1e-6);
    assert!(v["predicted_rate"].as_f64().unwrap() >= adjusted * (1.0 - 1e-9));
    assert!(v["configuration"]["container"]["cpu"].as_f64().unwrap() <= 2.0 + 1e-9);

    let written: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(written, v["configuration"]);
}

#[test]
fn calibrate_reports_the_overprovision_factor() {
    let ledger = scratch("ledger.jsonl");
    let _ = std::fs::remove_file(&ledger);
    let v = json(&run(
        &[
            "calibrate",
            "--ledger",
            ledger.to_str().unwrap(),
            "--config-id",
            "a",
            "--predicted",
            "1050",
            "--measured",
            "965",
            "--ts",
            "1",
        ],
        None,
    ));
    assert_eq!(v["records"], 1);
    assert!((v["overprovision_factor"].as_f64().unwrap() - 1050.0 / 965.0).abs() < 1e-9);
    assert_eq!(v["drift"]["verdict"], "stable");
}

#[test]
fn missing_ledger_without_a_record_is_a_usage_error() {
    let out = run(
        &["calibrate", "--ledger", "/nonexistent/ledger.jsonl"],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let a = scratch("det-a.jsonl");
    let b = scratch("det-b.jsonl");
    json(&sweep(&a, "42"));
    json(&sweep(&b, "42"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
