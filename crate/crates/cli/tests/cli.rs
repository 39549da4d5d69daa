use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concavity-lab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn torsion_run_writes_artifacts_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.toml", "[grid]\nn = 16\n");
    let out_dir = dir.path().join("out");
    let out = lab(&["run", "torsion", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--lambda-steps", "8", "--refine"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["verdict"], "pass");
    assert_eq!(report["h"], 1.0 / 16.0);
    let defect = &report["defect"];
    for key in ["sup_value", "argmax", "location_class", "evaluations"] {
        assert!(defect.get(key).is_some(), "missing {key}");
    }
    for name in ["report.json", "u.csv", "transformed.csv", "envelope.csv", "witness.csv", "defect_table.csv"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let env = lab(&["envelope", out_dir.join("transformed.csv").to_str().unwrap()]);
    assert_eq!(env.status.code(), Some(0));
    let summary = json(&env);
    assert!(summary["gap"].as_f64().unwrap() <= 2e-3);
    assert!(summary["witness_distance"].is_number());
    assert!(summary["argmax"].is_array());
}

#[test]
fn grid_override_changes_the_spacing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.toml", "[grid]\nn = 64\n");
    let out = lab(&["run", "torsion", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap(), "--grid", "12"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["h"], 1.0 / 12.0);
}

#[test]
fn rejected_hypothesis_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "k.toml", "[preset]\ngamma = 1.5\n[grid]\nn = 16\n");
    let out = lab(&["run", "kennington_power", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["verdict"], "hypothesis_rejected");
}

#[test]
fn failed_conclusion_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.toml", "[grid]\nn = 16\n[tolerances]\ndefect = -1.0\n");
    let out = lab(&["run", "torsion", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["verdict"], "fail");
}

#[test]
fn solver_failure_exits_with_three() {
    // lambda - g below the first eigenvalue: only the zero solution exists.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "l.toml",
        "[preset]\nlambda = 8.0\nc = 0.1\ng = { kind = \"constant\", value = 4.0 }\n[grid]\nn = 16\n",
    );
    let out = lab(&["run", "log_concave", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["verdict"], "solver_error");
}

#[test]
fn configuration_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[grid]\nn = \"many\"\n");
    assert_eq!(lab(&["run", "torsion", "--config", &cfg]).status.code(), Some(3));
    let cfg = write_config(dir.path(), "other.toml", "[preset]\nname = \"eigen_log\"\n");
    assert_eq!(lab(&["run", "torsion", "--config", &cfg]).status.code(), Some(3));
    let missing = dir.path().join("absent.toml");
    assert_eq!(lab(&["run", "torsion", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(lab(&["envelope", missing.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn property_suite_reports_all_checks() {
    let out = lab(&["verify-appendix", "--samples", "3000", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let r = json(&out);
    for key in ["subadd_pass", "ratio_pass", "inverse_pass", "dominance_pass"] {
        assert_eq!(r[key], true, "{key}");
    }
    assert_eq!(r["samples"], 3000);
}

#[test]
fn envelope_of_a_convex_field_reports_its_gap() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("nx,ny,xmin,xmax,ymin,ymax,h\n5,5,-2,2,-2,2,1\nx,y,class,value\n");
    for j in 0..5 {
        for i in 0..5 {
            let (x, y) = (i as f64 - 2.0, j as f64 - 2.0);
            csv.push_str(&format!("{x},{y},interior,{}\n", x * x + y * y));
        }
    }
    csv.push_str("0.5,0.5,sample,NEG_INF\n");
    let path = dir.path().join("bowl.csv");
    std::fs::write(&path, csv).unwrap();
    let out = lab(&["envelope", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&out);
    assert!((s["gap"].as_f64().unwrap() - 8.0).abs() < 1e-12);
    assert!((s["witness_distance"].as_f64().unwrap() - 4.0).abs() < 1e-12);
}
