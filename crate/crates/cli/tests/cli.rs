use std::process::Command;

fn tdmr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdmr"))
}

fn small_config(dir: &std::path::Path) -> std::path::PathBuf {
    let mut cfg = tdmr::harness::selftest::noiseless_config();
    cfg.nn.train.epochs = 2;
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn missing_config_is_a_json_error() {
    let out = tdmr().args(["sweep", "--config", "/nonexistent/cfg.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "io-error");
}

#[test]
fn bad_flag_is_a_usage_error() {
    let out = tdmr().args(["sweep", "--system", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "usage");
}

#[test]
fn selftest_filter_passes() {
    let out = tdmr().args(["selftest", "--filter", "channel_"]).output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|v| v["passed"] == true));
}

#[test]
fn train_then_evaluate_matches_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |args: &[&str], out: &str| {
        let o = tdmr()
            .args(args)
            .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().join(out).to_str().unwrap(), "--system", "gprml_linear,gprml_nn"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["train"], "a");
    assert!(dir.path().join("a/artifacts/point-0000.toml").exists());
    run(&["evaluate"], "a");
    run(&["sweep"], "b");
    let a = std::fs::read_to_string(dir.path().join("a/ber.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/ber.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1 + 2 * 3);
}
