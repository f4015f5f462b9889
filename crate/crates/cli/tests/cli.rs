use std::path::Path;
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use serde_json::Value;

use ehr_cli::ingest::{load_table, Design};
use ehr_cli::json::read_num;
use ehr_cli::{EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK};
use ehr_core::gmm::FitOptions;
use ehr_core::robust::Dataset;
use ehr_core::Estimator;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["ehr"];
    argv.extend_from_slice(args);
    let code = ehr_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn run_json(args: &[&str]) -> Value {
    let (code, out, err) = run(args);
    assert_eq!(code, EXIT_OK, "{args:?}: {err}");
    serde_json::from_str(&out).unwrap()
}

fn numbers(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| read_num(x).unwrap()).collect()
}

fn write_csv(path: &Path, headers: &[&str], x: &DMatrix<f64>, y: &DVector<f64>) {
    let mut text = headers.join(",") + "\n";
    for i in 0..y.len() {
        let mut cells = vec![format!("{:e}", y[i])];
        cells.extend(x.row(i).iter().map(|v| format!("{v:e}")));
        text += &(cells.join(",") + "\n");
    }
    std::fs::write(path, text).unwrap();
}

const STATEX77: [&str; 4] = ["--data", "statex77", "--response", "Murder"];

#[test]
fn huber_factor_normal_row() {
    let (code, out, _) = run(&["huber-factor"]);
    assert_eq!(code, EXIT_OK);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("distribution,k,factor,variance,ratio"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "normal");
    for (cell, want) in row[2..].iter().zip([1.05, 1.0, 0.95]) {
        let got: f64 = cell.parse().unwrap();
        assert!((got / want - 1.0).abs() < 0.02, "{got} vs {want}");
    }
    assert_eq!(out.lines().count(), 7);
}

#[test]
fn missing_file_is_an_input_error() {
    let (code, out, err) = run(&["fit", "--data", "/no/such/file.csv", "--response", "y", "--estimator", "ls"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(out.is_empty());
    assert!(err.contains("/no/such/file.csv"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ehr");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    assert_eq!(status(&["--help"]).status.code(), Some(EXIT_OK));
    assert_eq!(status(&["--version"]).status.code(), Some(EXIT_OK));
    assert_eq!(status(&["fit", "--bogus"]).status.code(), Some(EXIT_INPUT));
    assert_eq!(status(&["frobnicate"]).status.code(), Some(EXIT_INPUT));
    let missing = status(&["cv", "--data", "nope.csv", "--response", "y"]);
    assert_eq!(missing.status.code(), Some(EXIT_INPUT));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.csv"));
    let ok = status(&["huber-factor"]);
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("distribution,"));
}

#[test]
fn blank_cell_is_rejected_with_its_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blank.csv");
    std::fs::write(&path, "y,a,b\n1,2,3\n4,,6\n7,8,9\n").unwrap();
    let (code, _, err) = run(&["fit", "--data", path.to_str().unwrap(), "--response", "y", "--estimator", "ls"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("data row 2") && err.contains("column 2") && err.contains("'a'"), "{err}");
}

#[test]
fn bad_settings_are_input_errors() {
    let (code, _, err) = run(&["fit", "--data", "statex77", "--response", "Nope", "--estimator", "ls"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("no column 'Nope'"), "{err}");
    let (code, _, err) = run(&["fit", "--data", "statex77", "--response", "Murder", "--u", "9"]);
    assert_eq!(code, EXIT_INPUT, "{err}");
    let (code, _, _) = run(&["huber-factor", "--threads", "0"]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn noiseless_full_dimension_recovers_truth() {
    let (n, p) = (40, 3);
    let x = DMatrix::from_fn(n, p, |i, j| ((i * (j + 2) + 3 * j) % 11) as f64 - 5.0 + 0.1 * j as f64);
    let beta = DVector::from_vec(vec![0.5, -1.25, 2.0]);
    let y = (&x * &beta).add_scalar(3.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exact.csv");
    write_csv(&path, &["y", "a", "b", "c"], &x, &y);
    let v = run_json(&["fit", "--data", path.to_str().unwrap(), "--response", "y", "--u", "3"]);
    let got = numbers(&v["beta"]);
    for (g, w) in got.iter().zip(beta.iter()) {
        assert!((g - w).abs() < 1e-6, "{got:?}");
    }
    assert!((read_num(&v["mu"]).unwrap() - 3.0).abs() < 1e-6);
    assert_eq!(v["u"], 3);
    assert_eq!(v["u_source"], "given");
}

#[test]
fn fit_report_round_trips_the_core_estimate() {
    let table = load_table("statex77").unwrap();
    let design = Design::from_table(&table, "Murder", false).unwrap();
    for (estimator, u) in [(Estimator::Hr, None), (Estimator::Ls, None), (Estimator::Ehr, Some(1))] {
        let mut args = vec!["fit", "--data", "statex77", "--response", "Murder", "--estimator", estimator.name()];
        if u.is_some() {
            args.extend(["--u", "1"]);
        }
        let v = run_json(&args);
        let direct = estimator.fit(&design.data, u, &FitOptions::default()).unwrap();
        let got = numbers(&v["beta"]);
        for (g, w) in got.iter().zip(direct.beta.iter()) {
            assert_eq!(g.to_bits(), w.to_bits(), "{estimator}");
        }
        assert_eq!(read_num(&v["mu"]).unwrap().to_bits(), direct.mu.to_bits());
        assert_eq!(v["meta"]["seed"], 1);
        assert!(v["meta"]["version"].is_string());
        let se = numbers(&v["se"]);
        let z = numbers(&v["z"]);
        for j in 0..se.len() {
            assert!(se[j] > 0.0);
            assert_eq!(v["significant"][j].as_bool().unwrap(), z[j].abs() > ehr_cli::Z_CRIT);
        }
    }
}

#[test]
fn fit_reports_envelope_block() {
    let v = run_json(&["fit", "--data", "statex77", "--response", "Murder", "--standardize", "--u", "2"]);
    let env = &v["envelope"];
    assert_eq!(env["gamma"].as_array().unwrap().len(), 7);
    assert_eq!(env["gamma"][0].as_array().unwrap().len(), 2);
    assert!(read_num(&env["objective"]).unwrap() <= read_num(&env["initial_objective"]).unwrap());
    assert!(env["optimizer"].is_object());
    assert_eq!(numbers(&v["avar_diagonal"]).len(), 1 + 2 * 7 + 28);
}

#[test]
fn standardized_fit_maps_back_to_original_units() {
    let table = load_table("statex77").unwrap();
    let raw = Design::from_table(&table, "Murder", false).unwrap();
    let n = raw.data.n() as f64;
    let scales: Vec<f64> = raw
        .data
        .x()
        .column_iter()
        .map(|c| {
            let m = c.mean();
            (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let mut x = raw.data.x().clone();
    for (j, s) in scales.iter().enumerate() {
        x.column_mut(j).unscale_mut(*s);
    }
    let scaled = Dataset::new(raw.data.y().clone(), x).unwrap();
    for estimator in [Estimator::Ls, Estimator::Hr] {
        let v = run_json(&[&["fit"][..], &STATEX77[..], &["--standardize", "--estimator", estimator.name()]].concat());
        let direct = estimator.fit(&scaled, None, &FitOptions::default()).unwrap();
        let back = numbers(&v["standardization"]["beta"]);
        let reported_scales = numbers(&v["standardization"]["scales"]);
        for j in 0..scales.len() {
            assert!((reported_scales[j] - scales[j]).abs() <= 1e-12 * scales[j]);
            let want = direct.beta[j] / scales[j];
            assert!((back[j] - want).abs() <= 1e-8 * want.abs().max(1.0), "{estimator} {j}");
        }
    }
    // least squares is equivariant, so the back-transform matches a raw fit
    let v = run_json(&[&["fit"][..], &STATEX77[..], &["--standardize", "--estimator", "ls"]].concat());
    let ls = Estimator::Ls.fit(&raw.data, None, &FitOptions::default()).unwrap();
    for (g, w) in numbers(&v["standardization"]["beta"]).iter().zip(ls.beta.iter()) {
        assert!((g - w).abs() <= 1e-8 * w.abs().max(1.0));
    }
}

#[test]
fn bootstrap_with_two_resamples() {
    let v = run_json(&[
        "bootstrap", "--data", "statex77", "--response", "Murder", "--estimator", "hr", "--compare", "ls", "--bootstrap", "2",
    ]);
    let sd = numbers(&v["reference"]["report"]["sd"]);
    assert_eq!(sd.len(), 7);
    assert!(sd.iter().all(|s| s.is_finite() && *s >= 0.0));
    assert_eq!(v["reference"]["report"]["resamples"], 2);
    let row = &v["sd_ratios"]["rows"][0];
    assert_eq!(row["estimator"], "ls");
    assert_eq!(numbers(&row["ratios"]).len(), 7);

    let v = run_json(&["bootstrap", "--data", "statex77", "--response", "Murder", "--u", "1", "--compare", "hr", "--bootstrap", "2"]);
    assert_eq!(v["reference"]["u"], 1);
    assert_eq!(numbers(&v["reference"]["report"]["sd"]).len(), 7);
    let (code, _, err) = run(&["bootstrap", "--data", "statex77", "--response", "Murder", "--estimator", "ls", "--bootstrap", "1"]);
    assert_eq!(code, EXIT_INPUT, "{err}");
}

#[test]
fn simulate_bundled_scenario_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("run");
    let (code, out, err) = run(&["simulate", "--scenario", "homoscedastic-normal", "--reps", "2", "--out", prefix.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.is_empty());
    let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["ehr", "env", "hr", "ls"]) {
        assert!(row.starts_with(name), "{row}");
    }
    let json: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(json["report"]["reps"].as_array().unwrap().len(), 2);
    assert_eq!(json["report"]["scenario"]["reps"], 2);
    assert!(json["meta"]["config"]["scenario"].as_str().unwrap().contains("reps = 2"));

    let (code, _, err) = run(&["simulate", "--scenario", dir.path().join("none.scenario").to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("none.scenario"), "{err}");
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let args = [&STATEX77[..], &["--standardize", "--u", "1"][..]].concat();
    let mut fit_args = vec!["fit"];
    fit_args.extend(args);
    let (_, first, _) = run(&fit_args);
    let (_, second, _) = run(&fit_args);
    assert_eq!(first, second);
    let with_file = [&fit_args[..], &["--threads", "2", "--out", out.to_str().unwrap()][..]].concat();
    let (code, stdout, _) = run(&with_file);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
}

#[test]
fn config_hash_tracks_only_the_computation() {
    let hash = |extra: &[&str]| {
        let args = [&["fit", "--data", "statex77", "--response", "Murder", "--estimator", "ls"][..], extra].concat();
        let (code, out, err) = run(&args);
        assert_eq!(code, EXIT_OK, "{err}");
        let text = if out.is_empty() {
            std::fs::read_to_string(extra.last().unwrap()).unwrap()
        } else {
            out
        };
        let v: Value = serde_json::from_str(&text).unwrap();
        v["meta"]["config_hash"].as_str().unwrap().to_owned()
    };
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("h.json");
    let base = hash(&[]);
    assert_eq!(base.len(), 64);
    assert_eq!(base, hash(&[]));
    assert_eq!(base, hash(&["--threads", "1", "--out", file.to_str().unwrap()]));
    assert_ne!(base, hash(&["--seed", "2"]));
    assert_ne!(base, hash(&["--standardize"]));
}

#[test]
fn collinear_predictors_fail_numerically() {
    let n = 20;
    let x = DMatrix::from_fn(n, 2, |i, j| (i as f64) * if j == 0 { 1.0 } else { 2.0 });
    let y = DVector::from_fn(n, |i, _| (i % 5) as f64 + 0.3 * i as f64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("collinear.csv");
    write_csv(&path, &["y", "a", "b"], &x, &y);
    let (code, out, err) = run(&["fit", "--data", path.to_str().unwrap(), "--response", "y", "--estimator", "ls"]);
    assert_eq!(code, EXIT_NUMERICAL, "{err}");
    assert!(out.is_empty());
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn response_by_column_number() {
    let by_name = run_json(&["fit", "--data", "statex77", "--response", "Murder", "--estimator", "ls"]);
    let table = load_table("statex77").unwrap();
    let index = (table.column("Murder").unwrap() + 1).to_string();
    let by_index = run_json(&["fit", "--data", "statex77", "--response", &index, "--estimator", "ls"]);
    assert_eq!(by_name["beta"], by_index["beta"]);
    assert_eq!(by_index["data"]["response"], "Murder");
}
