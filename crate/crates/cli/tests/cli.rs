use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedjoint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedjoint"))
        .args(args)
        .env_remove("FEDJOINT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn epsilon(text: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with("epsilon = ")).expect("epsilon line");
    line["epsilon = ".len()..].split_whitespace().next().unwrap().parse().unwrap()
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn account_table_anchor() {
    let out = stdout(&fedjoint(&[
        "account", "--mech", "skellam", "--sigma", "0.69", "--clients", "1", "--steps", "1", "--q", "0.1", "--delta", "1e-5",
    ]));
    assert!((epsilon(&out) - 5.0).abs() < 0.05, "{out}");
}

#[test]
fn account_zero_rate() {
    let out = stdout(&fedjoint(&["account", "--clients", "10", "--sigma", "1", "--q", "0"]));
    assert_eq!(epsilon(&out), 0.0);
}

#[test]
fn epochs_flag_matches_steps() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    stdout(&fedjoint(&["account", "--epochs", "1", "--q", "0.1", "--sigma", "0.9", "--out", a.to_str().unwrap()]));
    stdout(&fedjoint(&["account", "--steps", "10", "--q", "0.1", "--sigma", "0.9", "--out", b.to_str().unwrap()]));
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn report_round_trips_printed_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = stdout(&fedjoint(&[
        "account", "--sigma", "1.1", "--clients", "3", "--steps", "4", "--rounds", "2", "--q", "0.05", "--colluders", "1", "--out",
        path.to_str().unwrap(),
    ]));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let eps = json["epsilon"].as_f64().unwrap();
    assert_eq!(format!("{eps:.6}"), format!("{:.6}", epsilon(&out)));
    assert!(json["curve"].as_array().unwrap().len() > 10);
    assert!(json["trust_model"]["sigma_per_client"].as_f64().unwrap() > 1.1);
}

#[test]
fn heterogeneity_file() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.json");
    std::fs::write(&h, r#"{"client_lr_divisors": [1.0, 2.0]}"#).unwrap();
    let out = stdout(&fedjoint(&[
        "account", "--mech", "gaussian", "--sigma", "1", "--clients", "2", "--q", "1", "--heterogeneity", h.to_str().unwrap(),
    ]));
    assert!(out.contains("sigma_total = 1.118034"), "{out}");
    // Skellam noise cannot be rescaled per client.
    let bad = fedjoint(&["account", "--sigma", "1", "--clients", "2", "--q", "1", "--heterogeneity", h.to_str().unwrap()]);
    assert!(!bad.status.success());
}

#[test]
fn calibrate_examples() {
    let sigma = |args: &[&str]| -> f64 {
        let out = stdout(&fedjoint(args));
        let line = out.lines().find(|l| l.starts_with("sigma per client")).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    let one = sigma(&["calibrate", "--target-eps", "5", "--clients", "1", "--steps", "1", "--q", "0.1"]);
    assert!((one - 0.69).abs() < 0.01);
    let five = sigma(&["calibrate", "--target-eps", "5", "--clients", "1", "--epochs", "5", "--q", "0.1"]);
    assert!((five - 1.18).abs() < 0.01);
    let two = sigma(&["calibrate", "--target-eps", "5", "--clients", "2", "--epochs", "5", "--q", "0.1"]);
    assert!(two < five);
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!fedjoint(&["account", "--sigma", "1"]).status.success());
    assert!(!fedjoint(&["account", "--sigma", "1", "--q", "0.1", "--steps", "1", "--epochs", "1"]).status.success());
    assert!(!fedjoint(&["account", "--sigma", "-1", "--q", "0.1"]).status.success());
    assert!(!fedjoint(&["frobnicate"]).status.success());
}

#[test]
fn table1_renders_all_rows() {
    let out = stdout(&fedjoint(&["table1"]));
    assert_eq!(out.lines().count(), 13);
    assert!(out.contains("5 epochs"));
}

#[test]
fn oracle_dominates() {
    let out = stdout(&fedjoint(&["oracle", "--mech", "skellam", "--mu", "10", "--sensitivity", "2"]));
    for line in out.lines().skip(1) {
        let gap: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
        assert!(gap >= 0.0);
    }
}

#[test]
fn simulate_is_reproducible_and_seed_overridable() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let cfg = config("synthetic_step.toml");
    let run = |dir: &Path, seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedjoint"));
        cmd.args(["simulate", cfg.to_str().unwrap(), "--rounds", "3", "--out-dir", dir.to_str().unwrap()]);
        match seed {
            Some(s) => cmd.env("FEDJOINT_SEED", s),
            None => cmd.env_remove("FEDJOINT_SEED"),
        };
        stdout(&cmd.output().unwrap());
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    let a = run(dirs[0].path(), None);
    let b = run(dirs[1].path(), None);
    assert_eq!(a, b);
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 4);
    let c = run(dirs[2].path(), Some("99"));
    assert_ne!(a, c);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dirs[2].path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 99);
}

#[test]
fn simulate_zero_rounds_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&fedjoint(&[
        "simulate",
        config("synthetic_epoch.toml").to_str().unwrap(),
        "--rounds",
        "0",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), "round,loss,accuracy,eps_spent\n");
}

#[test]
fn simulate_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(config("synthetic_step.toml")).unwrap().replace("lr = 0.1", "lr = -1.0");
    std::fs::write(&cfg, text).unwrap();
    let out = fedjoint(&["simulate", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("training.lr"));
}
