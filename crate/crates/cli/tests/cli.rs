use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_elrdyn"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .arg("--quiet")
        .args(extra)
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn uniform_network_has_equal_elrs_and_no_flips() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "u.json",
        r#"{ "schema": 1, "profile": { "kind": "uniform", "depth": 4 },
             "schedule": { "kind": "constant", "lr": 0.3 }, "steps": 10 }"#,
    );
    let out = run("simulate", &cfg, dir.path(), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let (header, rows) = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(
        header[..9].join(","),
        "step,lambda,kappa_crit,kappa_sub,s_rel,flip,sigma_sq_1,gradnorm_1,elr_1"
    );
    assert_eq!(header.len(), 6 + 3 * 4);
    assert_eq!(rows.len(), 11);
    let flip = column(&header, "flip");
    let elr: Vec<usize> = (1..=4)
        .map(|i| column(&header, &format!("elr_{i}")))
        .collect();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        assert_eq!(row[flip], "0");
        assert!(elr.iter().all(|&c| row[c] == row[elr[0]]));
    }
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["total_flips"], 0);
    assert_eq!(summary["convergence_horizon"], 0);
}

#[test]
fn deep_feedforward_subcritical_converges_without_flips() {
    let dir = TempDir::new().unwrap();
    let out = run(
        "simulate",
        &scenario("simulate_feedforward110_subcritical.json"),
        dir.path(),
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["total_flips"], 0);
    assert!(summary["convergence_horizon"].as_u64().unwrap() <= 110);
    assert!(summary["failure"].is_null());
    let (_, rows) = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 111);
}

#[test]
fn large_constant_lr_flips_at_step_zero() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "ff.json",
        r#"{ "schema": 1, "profile": { "kind": "feedforward", "depth": 56 },
             "schedule": { "kind": "constant", "lr": 1.0 }, "steps": 50 }"#,
    );
    let out = run("simulate", &cfg, dir.path(), &[]);
    assert!(out.status.success());
    let (header, rows) = read_csv(&dir.path().join("trajectory.csv"));
    let kappa: f64 = rows[0][column(&header, "kappa_crit")].parse().unwrap();
    let alpha = (std::f64::consts::PI / (std::f64::consts::PI - 1.0)).sqrt();
    assert!((kappa - 2.0 / alpha.powi(55).sqrt()).abs() < 1e-12 * kappa);
    assert!(kappa < 1.0);
    assert_eq!(rows[0][column(&header, "flip")], "1");
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["flip_steps"], serde_json::json!([0]));
}

#[test]
fn record_every_thins_rows_but_not_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "ff.json",
        r#"{ "schema": 1, "profile": { "kind": "feedforward", "depth": 8 },
             "schedule": { "kind": "constant", "lr": 0.05 }, "steps": 100 }"#,
    );
    let full = dir.path().join("full");
    let thin = dir.path().join("thin");
    assert!(run("simulate", &cfg, &full, &[]).status.success());
    assert!(run("simulate", &cfg, &thin, &["--record-every", "10"])
        .status
        .success());
    let (_, rows) = read_csv(&thin.join("trajectory.csv"));
    let steps: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(steps.first(), Some(&"0"));
    assert_eq!(steps.last(), Some(&"100"));
    assert_eq!(rows.len(), 11);
    let a = read_json(&full.join("summary.json"));
    let b = read_json(&thin.join("summary.json"));
    assert_eq!(a, b);
}

#[test]
fn compare_ranks_subcritical_first_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "cmp.json",
        r#"{ "schema": 1, "profile": { "kind": "feedforward", "depth": 56 }, "steps": 300,
             "schedules": [
               { "name": "tiny", "schedule": { "kind": "constant", "lr": 1e-4 } },
               { "name": "huge", "schedule": { "kind": "constant", "lr": 10.0 } },
               { "name": "sub", "schedule": { "kind": "subcritical_warmup" } },
               { "name": "sub twin", "schedule": { "kind": "subcritical_warmup" } }
             ] }"#,
    );
    let out = run("compare", &cfg, dir.path(), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cmp = read_json(&dir.path().join("comparison.json"));
    let ranking = cmp["ranking"].as_array().unwrap();
    assert_eq!(ranking.len(), 4);
    assert_eq!(ranking[0]["name"], "sub");
    assert_eq!(ranking[1]["name"], "sub twin");
    assert!(ranking[0]["convergence_horizon"].as_u64().unwrap() <= 56);
    assert_eq!(ranking[0]["total_flips"], 0);
    for r in ranking {
        assert_eq!(
            r["rank"].as_u64().unwrap() as usize,
            ranking.iter().position(|x| x == r).unwrap() + 1
        );
    }
    let a = std::fs::read(dir.path().join("trajectory_sub.csv")).unwrap();
    let b = std::fs::read(dir.path().join("trajectory_sub_twin.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn always_supercritical_schedule_flips_every_step() {
    // Two layers with kappa(0) = 1; lr grows tenfold per step, which keeps it
    // above the critical rate after every flip.
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "super.json",
        r#"{ "schema": 1, "profile": { "kind": "explicit", "explicit_c": [4.0, 1.0] }, "steps": 6,
             "schedules": [
               { "name": "growing", "schedule": { "kind": "multistep", "lr": 2.0, "gamma": 10.0,
                                                  "milestones": [1, 2, 3, 4, 5] } },
               { "name": "flat", "schedule": { "kind": "constant", "lr": 0.5 } }
             ] }"#,
    );
    let out = run("compare", &cfg, dir.path(), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) = read_csv(&dir.path().join("trajectory_growing.csv"));
    let (flip, lambda, kappa) = (
        column(&header, "flip"),
        column(&header, "lambda"),
        column(&header, "kappa_crit"),
    );
    for row in &rows[..rows.len() - 1] {
        let l: f64 = row[lambda].parse().unwrap();
        let k: f64 = row[kappa].parse().unwrap();
        assert!(l > k);
        assert_eq!(row[flip], "1", "step {}", row[0]);
    }
    let (_, flat) = read_csv(&dir.path().join("trajectory_flat.csv"));
    assert!(flat.iter().all(|r| r[column(&header, "flip")] == "0"));
}

#[test]
fn overflow_writes_partial_output_and_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "boom.json",
        r#"{ "schema": 1, "profile": { "kind": "uniform", "depth": 2 },
             "schedule": { "kind": "multistep", "lr": 1.0, "gamma": 1e100, "milestones": [1, 2, 3] },
             "steps": 10 }"#,
    );
    let out = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["failure"]["step"], 2);
    assert_eq!(summary["steps_taken"], 2);
    let (_, rows) = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn config_errors_exit_1_with_position() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        "{\n  \"schema\": 1,\n  \"profile\": { \"kind\": \"uniform\", \"depth\": 2 },\n  \"setps\": 10\n}\n",
    );
    let out = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:4:"), "{err}");
    assert!(err.contains("setps"), "{err}");

    let cfg = write_config(
        dir.path(),
        "nosched.json",
        r#"{ "schema": 1, "profile": { "kind": "uniform", "depth": 2 }, "steps": 10 }"#,
    );
    assert_eq!(
        run("simulate", &cfg, dir.path(), &[]).status.code(),
        Some(1)
    );
    assert_eq!(run("mc", &cfg, dir.path(), &[]).status.code(), Some(1));
    assert_eq!(run("compare", &cfg, dir.path(), &[]).status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_3() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = write_config(
        dir.path(),
        "u.json",
        r#"{ "schema": 1, "profile": { "kind": "uniform", "depth": 2 },
             "schedule": { "kind": "constant", "lr": 0.1 }, "steps": 3 }"#,
    );
    let out = run("simulate", &cfg, &blocker.join("sub"), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(
        run(
            "simulate",
            Path::new("/nonexistent/x.json"),
            dir.path(),
            &[]
        )
        .status
        .code(),
        Some(3)
    );
}

const SMALL_MC: &str = r#"{ "schema": 1, "profile": { "kind": "explicit", "explicit_c": [4.0, 1.0] },
    "schedule": { "kind": "constant", "lr": 0.1 }, "steps": 10,
    "mc": { "rows": 8, "cols": 8, "trials": TRIALS, "seed": 5 } }"#;

#[test]
fn mc_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "mc.json", &SMALL_MC.replace("TRIALS", "1"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("mc", &cfg, &a, &[]).status.success());
    assert!(run("mc", &cfg, &b, &[]).status.success());
    for f in ["ensemble.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    assert!(run("mc", &cfg, &c, &["--seed", "6"]).status.success());
    assert_ne!(
        std::fs::read(a.join("ensemble.csv")).unwrap(),
        std::fs::read(c.join("ensemble.csv")).unwrap()
    );
}

#[test]
fn mc_output_does_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "mc.json", &SMALL_MC.replace("TRIALS", "24"));
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = dir.path().join(threads);
        let status = bin()
            .args([
                "mc",
                cfg.to_str().unwrap(),
                "--quiet",
                "--out-dir",
                out_dir.to_str().unwrap(),
            ])
            .env("ELRDYN_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push(std::fs::read(out_dir.join("ensemble.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let (header, rows) = read_csv(&dir.path().join("1").join("ensemble.csv"));
    assert_eq!(
        header.join(","),
        "step,layer,mean_wnorm_sq,std_wnorm_sq,mean_gnorm_sq,std_gnorm_sq,mean_elr,std_elr"
    );
    assert_eq!(rows.len(), 11 * 2);
    let summary = read_json(&dir.path().join("1").join("summary.json"));
    assert_eq!(summary["trials_included"], 24);
    assert_eq!(summary["excluded_trials"], 0);
    assert!(
        summary["model_deviation"]["max_rel_deviation"]
            .as_f64()
            .unwrap()
            < 0.1
    );
}

#[test]
fn mc_constrain_holds_mean_elr_at_goal() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{ "schema": 1, "profile": { "kind": "feedforward", "depth": 4 },
             "schedule": { "kind": "constant", "lr": 0.1 }, "steps": 20,
             "mc": { "rows": 16, "cols": 16, "trials": 8, "constrain": { "e_goal": 0.05 },
                     "renormalize_weights": true } }"#,
    );
    assert!(run("mc", &cfg, dir.path(), &[]).status.success());
    let summary = read_json(&dir.path().join("summary.json"));
    assert!(summary["model_deviation"].is_null());
    let dev = summary["elr_goal_deviation"]["max_rel_deviation"]
        .as_f64()
        .unwrap();
    assert!(dev < 0.01, "{dev}");
    let (header, rows) = read_csv(&dir.path().join("ensemble.csv"));
    let mean_elr = column(&header, "mean_elr");
    for row in rows.iter().filter(|r| r[0] != "0") {
        let e: f64 = row[mean_elr].parse().unwrap();
        assert!((e / 0.05 - 1.0).abs() < 0.01);
    }
}

#[test]
fn invalid_thread_env_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "mc.json", &SMALL_MC.replace("TRIALS", "1"));
    let status = bin()
        .args([
            "mc",
            cfg.to_str().unwrap(),
            "--quiet",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .env("ELRDYN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stderr).contains("ELRDYN_THREADS"));
}
