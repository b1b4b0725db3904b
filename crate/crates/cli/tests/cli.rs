use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const M1: &str = r#"{"model": {"d": 1, "sigma": [[1]], "mu": [-1], "R": [[1]], "u": [1]}}"#;

const M2_SMALL: &str = r#"{
  "model": {"d": 2, "sigma": [[1, 0], [0, 1]], "mu": [-1, -1], "R": [[1, 0], [0, 1]], "u": [1, 1]},
  "sim": {"dt": 0.001, "horizon": 200, "burn_in": 10, "seed": 3, "replicas": 2},
  "analyses": {
    "bar": {"theta_grid": [[-1, -1], [-0.5, -2]], "tolerance": 0.5},
    "stationary": {"mass_tolerance": 0.1},
    "tails": {"gumbel_block": 20},
    "ldp": {"targets": [[1, 1]], "segments": 8, "restarts": 2}
  }
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stickybm"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn check_reports_skew_symmetry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), M2_SMALL);
    let out = dir.path().join("out");
    let o = run(&[
        "check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("skew_symmetric=true"));
    let files: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(files, vec!["manifest.json"]);
}

#[test]
fn closed_form_bar_on_one_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), M1);
    let out = dir.path().join("out");
    let o = run(&[
        "bar",
        "--closed-form",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bar = read_json(&out.join("bar.json"));
    let row = &bar["reports"][0]["rows"][0];
    assert_eq!(row["theta"][0].as_f64(), Some(-1.0));
    assert_eq!(row["lhs"].as_f64(), Some(-1.25));
    assert_eq!(row["rhs"].as_f64(), Some(-1.25));
    assert_eq!(row["abs_resid"].as_f64(), Some(0.0));
    let text = std::fs::read_to_string(out.join("bar.json")).unwrap();
    assert!(text.contains("-1.2500000000000000e0"));
}

#[test]
fn ldp_on_one_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let text = M1.replacen(
        "}}",
        r#"}, "analyses": {"ldp": {"targets": [[1]], "expected": [2], "rel_tolerance": 0.02}}}"#,
        1,
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = run(&[
        "ldp",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ldp = read_json(&out.join("ldp.json"));
    let v = ldp["results"][0]["value"].as_f64().unwrap();
    assert!((v - 2.0).abs() < 0.04, "{v}");
    assert_eq!(ldp["results"][0]["label"], "srbm");
    assert!(
        ldp["results"][0]["path"]["increments"]
            .as_array()
            .unwrap()
            .len()
            == 32
    );
}

#[test]
fn tolerance_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = M1.replacen(
        "}}",
        r#"}, "analyses": {"ldp": {"targets": [[1]], "expected": [3], "rel_tolerance": 0.02, "segments": 4}}}"#,
        1,
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = run(&[
        "ldp",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL value_0"));
    assert_eq!(read_json(&out.join("manifest.json"))["pass"], false);
}

#[test]
fn config_errors_exit_two_with_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"d": 2, "sigma": [[1, 0.3], [0, 1]], "mu": [-1, -1], "R": [[1, 0], [0, 1]], "u": [1, 1]}}"#,
    );
    let o = run(&["check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.sigma"));

    let cfg = write_config(dir.path(), M2_SMALL);
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--replicas",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sim.replicas"));

    let o = run(&["check"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), M1);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = run(&[
        "check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        blocker.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn empty_report_is_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), M1);
    let out = dir.path().join("out");
    let o = run(&[
        "report",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(files, vec!["manifest.json"]);
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn full_report_inventory_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), M2_SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "report",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            matches!(o.status.code(), Some(0) | Some(1)),
            "{}",
            stderr(&o)
        );
    }
    let files = sorted_files(&a);
    assert_eq!(
        files,
        vec![
            "bar.json",
            "ldp.json",
            "manifest.json",
            "stationary.csv",
            "tails_decay.csv",
            "tails_pair_0_1.csv"
        ]
    );
    for f in &files {
        if f == "manifest.json" {
            let mut x = read_json(&a.join(f));
            let mut y = read_json(&b.join(f));
            x["wall_clock_seconds"] = serde_json::Value::Null;
            y["wall_clock_seconds"] = serde_json::Value::Null;
            assert_eq!(x, y);
        } else {
            assert_eq!(
                std::fs::read(a.join(f)).unwrap(),
                std::fs::read(b.join(f)).unwrap(),
                "{f}"
            );
        }
    }
    let csv = std::fs::read_to_string(a.join("stationary.csv")).unwrap();
    assert!(csv.starts_with("coordinate,threshold,survival\n"));
}

#[test]
fn seed_override_and_json_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), M2_SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run_seed = |out: &Path, seed: &str| {
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run_seed(&a, "5");
    run_seed(&b, "6");
    assert_ne!(
        std::fs::read(a.join("path.csv")).unwrap(),
        std::fs::read(b.join("path.csv")).unwrap()
    );
    assert_eq!(read_json(&a.join("manifest.json"))["seed"], 5);

    let c = dir.path().join("c");
    let o = run(&[
        "stationary",
        "--config",
        cfg.to_str().unwrap(),
        "--format",
        "json",
        "--out",
        c.to_str().unwrap(),
    ]);
    assert!(
        matches!(o.status.code(), Some(0) | Some(1)),
        "{}",
        stderr(&o)
    );
    let rows = read_json(&c.join("stationary.json"));
    assert!(rows.as_array().unwrap().len() > 10);
    assert!(rows[0]["survival"].as_f64().is_some());
}
