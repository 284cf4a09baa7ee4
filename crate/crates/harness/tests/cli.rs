use std::path::Path;
use std::process::{Command, Output};

use ccfi_harness::config::{DataSource, ExtractorSpec};
use ccfi_harness::metrics::{read_metrics, MetricsFormat};
use ccfi_harness::ProtocolSpec;

fn small_spec() -> ProtocolSpec {
    ProtocolSpec {
        seeds: vec![3],
        data: DataSource::Synthetic {
            classes: 4,
            per_class: 60,
            dim: 8,
            separation: 10.0,
        },
        extractor: ExtractorSpec::Dense { hidden: 16 },
        initial_classes: vec!["c0".into(), "c1".into()],
        increments: vec![vec!["c2".into()], vec!["c3".into()]],
        sample_rate: 0.1,
        batch_size: 16,
        ..ProtocolSpec::default()
    }
}

fn write_config(dir: &Path, spec: &ProtocolSpec) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, spec.to_toml().unwrap()).unwrap();
    path
}

fn ccfi(args: &[&str], run_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccfi"))
        .args(args)
        .env("CCFI_RUN_DIR", run_dir)
        .env_remove("CCFI_THREADS")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_data_then_protocol_on_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_spec());
    let data = tmp.path().join("data.jsonl");
    let run = tmp.path().join("run");
    ok(ccfi(
        &[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ],
        &run,
    ));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 240);
    let stdout = ok(ccfi(
        &[
            "run-protocol",
            "--config",
            config.to_str().unwrap(),
            "--embeddings",
            data.to_str().unwrap(),
        ],
        &run,
    ));
    assert!(stdout.starts_with("round"));
    let rows = read_metrics(&run.join("metrics.csv"), MetricsFormat::Csv).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(run.join("seed-3/round-2/state.ckpt").exists());
    assert!(run.join("seed-3/round-1/trace.csv").exists());
    assert!(run.join("seed-3/round-0/exemplars.csv").exists());
}

#[test]
fn train_initial_then_increment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_spec());
    let run = tmp.path().join("run");
    let c = config.to_str().unwrap();
    ok(ccfi(&["train-initial", "--config", c], &run));
    let first = run.join("seed-3/round-0/state.ckpt");
    assert!(first.exists());
    assert!(run.join("config.toml").exists());
    let stdout = ok(ccfi(
        &[
            "increment",
            "--config",
            c,
            "--state",
            first.to_str().unwrap(),
            "--classes",
            "c2,c3",
        ],
        &run,
    ));
    let row: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(row["round"], 1);
    assert_eq!(row["classes_seen"], 4);
    assert!(run.join("seed-3/round-1/state.ckpt").exists());
    assert!(run.join("seed-3/round-1/trace.csv").exists());
}

#[test]
fn export_round_trips_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_spec());
    let run = tmp.path().join("run");
    ok(ccfi(&["run-protocol", "--config", config.to_str().unwrap()], &run));
    let csv = run.join("metrics.csv");
    let jsonl = tmp.path().join("metrics.jsonl");
    let back = tmp.path().join("back.csv");
    ok(ccfi(
        &[
            "export",
            "--input",
            csv.to_str().unwrap(),
            "--output",
            jsonl.to_str().unwrap(),
        ],
        &run,
    ));
    ok(ccfi(
        &[
            "export",
            "--input",
            jsonl.to_str().unwrap(),
            "--output",
            back.to_str().unwrap(),
        ],
        &run,
    ));
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&back).unwrap());
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_spec());
    let run = tmp.path().join("run");
    ok(ccfi(
        &[
            "run-protocol",
            "--config",
            config.to_str().unwrap(),
            "--seeds",
            "5,6",
            "--method",
            "fine-tune",
            "--increment",
            "c2,c3",
        ],
        &run,
    ));
    let snapshot = ProtocolSpec::load(&run.join("config.toml")).unwrap();
    assert_eq!(snapshot.seeds, vec![5, 6]);
    assert_eq!(snapshot.increments, vec![vec!["c2".to_string(), "c3".to_string()]]);
    // untouched settings come from the file
    assert_eq!(snapshot.batch_size, 16);
    let rows = read_metrics(&run.join("metrics.csv"), MetricsFormat::Csv).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.method == "fine-tune"));
}

#[test]
fn run_dir_flag_beats_env() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_spec());
    let env_dir = tmp.path().join("from-env");
    let flag_dir = tmp.path().join("from-flag");
    ok(ccfi(
        &[
            "--run-dir",
            flag_dir.to_str().unwrap(),
            "train-initial",
            "--config",
            config.to_str().unwrap(),
        ],
        &env_dir,
    ));
    assert!(flag_dir.join("seed-3/round-0/state.ckpt").exists());
    assert!(!env_dir.exists());
}

#[test]
fn bad_input_exits_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_spec());
    let run = tmp.path().join("run");
    let c = config.to_str().unwrap();
    for args in [
        vec!["run-protocol", "--config", c, "--method", "nonsense"],
        vec!["run-protocol", "--config", c, "--increment", "c9"],
        vec!["run-protocol", "--config", "/nonexistent/run.toml"],
    ] {
        let out = ccfi(&args, &run);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
    std::fs::write(&config, "unknown_key = 1\n").unwrap();
    assert!(!ccfi(&["run-protocol", "--config", c], &run).status.success());
}
