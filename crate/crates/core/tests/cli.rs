use std::process::Command;

fn funreg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_funreg"))
        .args(args)
        .output()
        .expect("spawn funreg")
}

#[test]
fn missing_input_is_exit_2_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = funreg(&["fosr", "--long", "/no/such/file.csv", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "input");
    assert!(err["message"].as_str().unwrap().contains("/no/such/file.csv"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"fosr": {"min_ob": 3}}"#).unwrap();
    let out = funreg(&["fpca", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = funreg(&["simulate", "--n", "20", "--seed", "4", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let run = std::path::PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-seed4"));
    for f in ["truth.json", "samples.csv", "covariates.csv", "resolved_config.json", "run_log.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["master_seed"], 4);
    assert!(cfg.get("thread_count").is_none());
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("run_log.json")).unwrap()).unwrap();
    assert_eq!(log["status"], "ok");
}
