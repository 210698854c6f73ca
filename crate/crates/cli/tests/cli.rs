use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str = "round,sim_time,strategy,seed,test_accuracy,test_loss,mean_tau,max_tau,mean_S,mean_raw_weight,flags";

const CONFIG: &str = r#"
clients = 6
buffer_size = 3
local_steps = 3
batch_size = 8
max_rounds = 50
seed = 4

[strategy]
kind = "contribution_aware"

[dataset]
kind = "synthetic"
classes = 4
dim = 6
per_class = 90
test_per_class = 20
"#;

fn fedsim(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedsim"));
    cmd.args(args).env_remove("FEDSIM_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("FEDSIM_OUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let status = fedsim(&["run", &cfg, "--max-rounds", "7", "--quiet", "--out", out.to_str().unwrap()], None);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(status.stderr.is_empty());
    let csv = std::fs::read_to_string(out.join("contribution_aware_seed4.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(HEADER));
    assert_eq!(lines.count(), 7);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("contribution_aware_seed4.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["rounds_completed"], 7);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn output_directory_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let env_out = dir.path().join("from-env");
    let status = fedsim(&["run", &cfg, "--max-rounds", "3", "-q"], Some(&env_out));
    assert!(status.status.success());
    assert!(env_out.join("contribution_aware_seed4.csv").is_file());
}

#[test]
fn sweep_writes_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("sweep");
    let status = fedsim(
        &[
            "sweep",
            &cfg,
            "--strategies",
            "fedbuff,staleness_decay,contribution_aware",
            "--seeds",
            "1..3",
            "--max-rounds",
            "10",
            "--quiet",
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(HEADER));
    assert_eq!(metrics.lines().count(), 1 + 9 * 10);
    for f in ["curves.csv", "summary.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_dir(out.join("runs")).unwrap().count(), 9);
    assert!(out.join("runs/staleness_decay_seed2.csv").is_file());
}

#[test]
fn invalid_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("buffer_size = 7\n{CONFIG}").replace("buffer_size = 3\n", ""));
    let status = fedsim(&["run", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert!(!status.status.success());
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("buffer_size"), "{stderr}");
    assert!(!dir.path().join("contribution_aware_seed4.csv").exists());

    let cfg = write_config(dir.path(), &format!("{CONFIG}\nbogus_key = 1\n"));
    let status = fedsim(&["run", &cfg], None);
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("bogus_key"));
}

#[test]
fn unknown_strategy_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let status = fedsim(&["sweep", &cfg, "--strategies", "fedbuff,nonsense", "-q", "--out", dir.path().to_str().unwrap()], None);
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("nonsense"));
}
