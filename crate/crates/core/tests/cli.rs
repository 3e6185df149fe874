use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

use mfgc::cli::{parse_scenario, run_audits, run_scenario, CliError, RunOptions};

fn bundled(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"));
    fs::read_to_string(path).expect("bundled scenario")
}

/// Writes `text` with its outputs redirected next to the file.
fn stage(dir: &TempDir, text: &str) -> PathBuf {
    let text: String = text
        .lines()
        .map(|l| if l.starts_with("output_dir") { "output_dir = \"out\"" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.path().join("scenario.toml");
    fs::write(&path, text).unwrap();
    path
}

fn mfgc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mfgc")).args(args).output().expect("binary runs")
}

fn config_key(e: CliError) -> String {
    match e {
        CliError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

fn report(dir: &TempDir) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap()
}

/// Every number sits under a `value` key next to a `provenance` string.
fn unwrapped_numbers(v: &Value, path: &str, parent: Option<&serde_json::Map<String, Value>>, out: &mut Vec<String>) {
    match v {
        Value::Number(_) => {
            let ok = path.ends_with(".value")
                && parent.is_some_and(|p| p.get("provenance").is_some_and(Value::is_string));
            if !ok {
                out.push(path.to_string());
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                unwrapped_numbers(x, &format!("{path}[{i}]"), None, out);
            }
        }
        Value::Object(m) => {
            for (k, x) in m {
                unwrapped_numbers(x, &format!("{path}.{k}"), Some(m), out);
            }
        }
        _ => {}
    }
}

#[test]
fn unknown_domain_preset_names_the_key() {
    let dir = TempDir::new().unwrap();
    let path = stage(&dir, &bundled("disk-target-chase").replace("preset = \"disk\"", "preset = \"disc\""));
    let e = run_scenario(&path, &RunOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert_eq!(config_key(e), "domain.preset");

    let out = mfgc(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("domain.preset"));
}

#[test]
fn missing_and_unknown_fields_name_their_keys() {
    let text = bundled("interval-congestion");
    let e = parse_scenario(&text.replace("preset = \"interval\"", "")).unwrap_err();
    assert_eq!(config_key(e), "domain.preset");
    let e = parse_scenario(&text.replace("name = \"interval-congestion\"", "")).unwrap_err();
    assert_eq!(config_key(e), "name");
    let e = parse_scenario(&text.replace("count = 50", "count = 50, spread = 2")).unwrap_err();
    assert_eq!(config_key(e), "m0.sample.spread");
    let e = parse_scenario(&text.replace("c1 = 0.01", "c1 = \"small\"")).unwrap_err();
    assert_eq!(config_key(e), "lagrangian.c1");
}

#[test]
fn sampling_requires_a_seed() {
    let dir = TempDir::new().unwrap();
    let path = stage(&dir, &bundled("interval-congestion").replace("seed = 7", ""));
    let e = run_scenario(&path, &RunOptions::default()).unwrap_err();
    assert_eq!(config_key(e), "seed");
    // a command-line seed is enough
    let s = run_scenario(&path, &RunOptions { seed: Some(7), ..RunOptions::default() }).unwrap();
    assert!(s.converged);
}

#[test]
fn schema_version_is_checked() {
    let dir = TempDir::new().unwrap();
    let path = stage(&dir, &bundled("disk-target-chase").replace("schema_version = 1", "schema_version = 2"));
    assert_eq!(config_key(run_scenario(&path, &RunOptions::default()).unwrap_err()), "schema_version");
}

#[test]
fn interval_congestion_run_writes_artifacts_and_certifies() {
    let dir = TempDir::new().unwrap();
    let path = stage(&dir, &bundled("interval-congestion"));
    let s = run_scenario(&path, &RunOptions::default()).unwrap();
    assert!(s.converged && s.certified);
    assert!(s.exploitability < 1e-3);
    for f in [
        "report.json",
        "measures.json",
        "value.csv",
        "sigma.csv",
        "approx_case1.csv",
        "approx_case2.csv",
        "approx_case3.csv",
        "approx_case4.csv",
        "approx_summary.csv",
    ] {
        assert!(dir.path().join("out").join(f).is_file(), "{f} missing");
    }
    let r = report(&dir);
    assert_eq!(r["certification"]["all_pass"], Value::Bool(true));
    assert_eq!(r["certification"]["items"].as_array().unwrap().len(), 3);
    assert_eq!(r["equilibrium"]["converged"], Value::Bool(true));
    assert_eq!(r["constants"]["k1"]["value"].as_f64(), Some(256.0));
    assert!(r["constants"]["ledger"].as_array().is_some_and(|l| !l.is_empty()));

    let mut bad = Vec::new();
    unwrapped_numbers(&r, "", None, &mut bad);
    assert!(bad.is_empty(), "numbers without provenance: {bad:?}");

    let value = fs::read_to_string(dir.path().join("out/value.csv")).unwrap();
    assert!(value.starts_with("t,x1,V\n"));
    assert_eq!(value.lines().count(), 1 + 5 * 11);
    let sigma = fs::read_to_string(dir.path().join("out/sigma.csv")).unwrap();
    assert_eq!(sigma.lines().count(), 1 + 41 * 50);
    let measures: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/measures.json")).unwrap()).unwrap();
    assert_eq!(measures["m0"]["atoms"].as_array().unwrap().len(), 50);
}

#[test]
fn disk_target_chase_reports_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let pa = stage(&a, &bundled("disk-target-chase"));
    let pb = stage(&b, &bundled("disk-target-chase"));
    assert!(mfgc(&["run", pa.to_str().unwrap(), "--seed", "7"]).status.success());
    assert!(mfgc(&["run", pb.to_str().unwrap(), "--seed", "7", "--threads", "2"]).status.success());
    for f in ["report.json", "measures.json", "value.csv", "sigma.csv", "approx_summary.csv"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn seed_override_changes_the_sampled_initial_measure() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let pa = stage(&a, &bundled("interval-congestion"));
    let pb = stage(&b, &bundled("interval-congestion"));
    run_scenario(&pa, &RunOptions::default()).unwrap();
    run_scenario(&pb, &RunOptions { seed: Some(8), ..RunOptions::default() }).unwrap();
    assert_ne!(report(&a)["fingerprint"], report(&b)["fingerprint"]);
    assert_ne!(
        fs::read(a.path().join("out/measures.json")).unwrap(),
        fs::read(b.path().join("out/measures.json")).unwrap()
    );
}

#[test]
fn resume_on_a_completed_directory_is_a_no_op() {
    let dir = TempDir::new().unwrap();
    let path = stage(&dir, &bundled("interval-congestion"));
    run_scenario(&path, &RunOptions::default()).unwrap();
    let report_path = dir.path().join("out/report.json");
    let before = fs::read(&report_path).unwrap();
    let stamp = fs::metadata(&report_path).unwrap().modified().unwrap();
    let s = run_scenario(&path, &RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert!(s.resumed && s.converged && s.certified);
    assert_eq!(fs::metadata(&report_path).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(&report_path).unwrap(), before);

    // a different seed is a different run
    let s = run_scenario(&path, &RunOptions { resume: true, seed: Some(9), ..RunOptions::default() }).unwrap();
    assert!(!s.resumed);
}

#[test]
fn nonconvergence_exits_nonzero_unless_allowed() {
    let dir = TempDir::new().unwrap();
    let text = bundled("interval-congestion").replace("max_iterations = 200", "max_iterations = 1").replace(
        "exploitability_tol = 1e-3",
        "exploitability_tol = 1e-300",
    );
    let path = stage(&dir, &text);
    let out = mfgc(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("out/report.json").is_file());
    let out = mfgc(&["run", path.to_str().unwrap(), "--allow-nonconverged"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(&dir)["equilibrium"]["converged"], Value::Bool(false));
}

#[test]
fn healthy_disk_audit_passes_every_suite() {
    let dir = TempDir::new().unwrap();
    let path = stage(&dir, &bundled("disk-target-chase"));
    let s = run_audits(&path, &RunOptions::default()).unwrap();
    let names: Vec<&str> = s.suites.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["geometry", "lagrangian", "constants", "measures", "approx"]);
    assert!(s.failed().is_empty());
    for f in ["audit_geometry.csv", "audit_lagrangian.csv", "audit_constants.csv", "audit_measures.csv", "audit_approx.csv"] {
        let text = fs::read_to_string(dir.path().join("out").join(f)).unwrap();
        assert!(text.starts_with("check,worst,tolerance,pass,detail\n"));
        assert!(text.lines().skip(1).all(|l| l.split(',').nth(3) == Some("true")), "{f}: {text}");
    }
    for case in 1..=4 {
        assert!(dir.path().join(format!("out/audit_approx_case{case}.csv")).is_file());
    }
    let out = mfgc(&["audit", path.to_str().unwrap(), "--resume"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("up to date"));
}

#[test]
fn oversized_collar_fails_the_projection_audit() {
    let dir = TempDir::new().unwrap();
    let text = bundled("disk-target-chase").replace("preset = \"disk\"", "preset = \"disk\"\ncollar_width = 1.5");
    let path = stage(&dir, &text);
    let out = mfgc(&["audit", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let csv = fs::read_to_string(dir.path().join("out/audit_geometry.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("projection_normal_segments,")).unwrap();
    assert!(row.contains(",false,"), "{row}");
}

#[test]
fn raised_coupling_reports_smallness_violated() {
    let dir = TempDir::new().unwrap();
    let path = stage(&dir, &bundled("interval-congestion").replace("c1 = 0.01", "c1 = 0.9"));
    match run_audits(&path, &RunOptions::default()).unwrap_err() {
        CliError::Failed { checks } => assert!(checks.contains(&"constants/smallness".to_string()), "{checks:?}"),
        e => panic!("unexpected {e}"),
    }
    let csv = fs::read_to_string(dir.path().join("out/audit_constants.csv")).unwrap();
    assert!(csv.contains("SmallnessViolated"));
    let e = run_scenario(&path, &RunOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().starts_with("constants.solve_k_budget"));
}
