use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
version = 1
seed = 3
seeds = 2
rounds = 4

[task]
num_classes = 4
input_dim = 6
samples_per_class = 40
class_separation = 3.0

[partition]
num_servers = 3
clients_per_server = 3
alpha_server = 0.5
alpha_client = 0.5

[learner]
hidden_dims = [8]

[sgd]
local_epochs = 1

[method]
name = "fedbac"
reassign_period = 2
ifca_k = 2

[metrics]
convergence_targets = [0.3]
"#;

fn fedbac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbac")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_into(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fedbac(&args)
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_into(&cfg, &a, &["--deterministic"]).status.success());
    fs::rename(&a, &b).unwrap();
    assert!(run_into(&cfg, &a, &["--deterministic"]).status.success());
    assert_eq!(files(&a), ["fedbac_seed3.csv", "fedbac_seed3.json", "fedbac_seed4.csv", "fedbac_seed4.json"]);
    for f in files(&a) {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
    }
    // distinct seeds give distinct traces
    assert_ne!(fs::read(a.join("fedbac_seed3.csv")).unwrap(), fs::read(a.join("fedbac_seed4.csv")).unwrap());
}

#[test]
fn csv_and_summary_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("o");
    assert!(run_into(&cfg, &out, &["--seeds", "1"]).status.success());
    let csv = fs::read_to_string(out.join("fedbac_seed3.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0].split(',').count(), 6 + 4 * 3);
    assert!(lines[0].starts_with("round,distributed_accuracy,global_objective,comm_bytes_client_edge"));

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fedbac_seed3.json")).unwrap()).unwrap();
    assert!(json["timestamp_unix"].is_u64());
    assert_eq!(json["rounds"], 4);
    assert_eq!(json["config"]["partition"]["num_servers"], 3);
    assert_eq!(json["convergence"][0]["target"], 0.3);
    assert!(json["fairness_pp"]["sigma"].is_f64());
}

#[test]
fn hierfavg_conflict_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("reassign_period = 2", "reassign_period = 2\nparticipation = 0.7"));
    let out = run_into(&cfg, &tmp.path().join("o"), &["--method", "hierfavg"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 28") && err.contains("participation"), "{err}");

    // without the explicit conflicting value hierfavg runs with K=1, p=1
    let cfg = write_config(tmp.path(), SMALL);
    let o = tmp.path().join("h");
    assert!(run_into(&cfg, &o, &["--method", "hierfavg", "--seeds", "1"]).status.success());
    let csv = fs::read_to_string(o.join("hierfavg_seed3.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[row.len() - 3..], ["3", "3", "3"]);
}

#[test]
fn invalid_configs_exit_two_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("alpha_server = 0.5", "alpha_server = 0.0"));
    let out = run_into(&cfg, &tmp.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 16"));

    let out = fedbac(&["run", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = write_config(tmp.path(), SMALL);
    let out = run_into(&cfg, &tmp.path().join("o"), &["--method", "fedavg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_runs_one_per_value_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("s");
    let o = fedbac(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--axis", "alpha_server", "--values", "0.5,0.1", "--deterministic",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csvs = files(&out).into_iter().filter(|f| f.ends_with(".csv")).count();
    assert_eq!(csvs, 2 * 2);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep_alpha_server.json")).unwrap()).unwrap();
    assert_eq!(summary["points"].as_array().unwrap().len(), 2);

    let out = tmp.path().join("p");
    let o = fedbac(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "1",
        "--axis", "participation", "--values", "0.6,0.7,0.8,0.9",
    ]);
    assert!(o.status.success());
    assert_eq!(files(&out).into_iter().filter(|f| f.ends_with(".csv")).count(), 4);
}

#[test]
fn sweep_rejects_bad_axis_and_empty_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let c = cfg.to_str().unwrap();
    assert_eq!(fedbac(&["sweep", "--config", c, "--axis", "colour", "--values", "1"]).status.code(), Some(2));
    assert_eq!(fedbac(&["sweep", "--config", c, "--axis", "lr", "--values"]).status.code(), Some(2));
    assert_eq!(fedbac(&["sweep", "--config", c, "--axis", "rounds", "--values", "2.5"]).status.code(), Some(2));
}

#[test]
fn compare_writes_three_methods_and_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("c");
    let o = fedbac(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for m in ["fedbac", "hierfavg", "ifca"] {
        for s in [3, 4] {
            assert!(out.join(format!("{m}_seed{s}.csv")).exists());
        }
    }
    let text = fs::read_to_string(out.join("comparison.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v.get("timestamp_unix").is_none());
    let acc = |j: usize| v["methods"][j]["accuracy_pp"]["mean"].as_f64().unwrap();
    let dh = v["delta_h_pp"]["mean"].as_f64().unwrap();
    let di = v["delta_i_pp"]["mean"].as_f64().unwrap();
    assert!((dh - (acc(0) - acc(1))).abs() < 1e-9);
    assert!((di - (acc(0) - acc(2))).abs() < 1e-9);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("delta_H") && stdout.contains("delta_I"));
}
