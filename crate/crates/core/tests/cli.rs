use std::path::Path;
use std::process::{Command, Output};

use inciv::cli::{ingest_csv, write_csv, Roles};
use inciv::data::{ColumnNames, Dataset};
use inciv::first_stage::{fit_first_stage, BandwidthGrid, FirstStageConfig};
use inciv::linear::fit_theta_hat;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

fn inciv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inciv"))
        .args(args)
        .env_remove("INCIV_THREADS")
        .output()
        .expect("binary runs")
}

/// Wage-style data: lw on exper, black and endogenous educ.
fn wage_data(path: &Path, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = DMatrix::from_fn(n, 2, |_, j| {
        if j == 0 {
            rng.random_range(0.0..20.0)
        } else {
            f64::from(u8::from(rng.random_bool(0.3)))
        }
    });
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let u = 0.5 * e + 0.75f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        x[(i, 0)] = 10.0 + 4.0 * (z[(i, 0)] / 5.0).tanh() - z[(i, 1)] + u;
        y[i] = 1.0 + 0.03 * z[(i, 0)] - 0.1 * z[(i, 1)] + 0.08 * x[(i, 0)] + 0.3 * e;
    }
    let data = Dataset::new(y, z, x)
        .unwrap()
        .with_names(ColumnNames {
            y: "lw".into(),
            z: vec!["exper".into(), "black".into()],
            x: vec!["educ".into()],
        })
        .unwrap();
    write_csv(std::fs::File::create(path).unwrap(), &data).unwrap();
    data
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn table<'a>(v: &'a Value, name: &str) -> &'a Value {
    v["tables"].as_array().unwrap().iter().find(|t| t["name"] == name).unwrap()
}

#[test]
fn estimate_reports_included_instrument_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("wage.csv");
    wage_data(&f, 600);
    let out = inciv(&[
        "estimate", "--data", f.to_str().unwrap(), "--y", "lw", "--z", "exper,black", "--x", "educ",
        "--first-stage", "nw", "--estimators", "theta,ols,tsls", "--excluded", "exper", "--format", "json",
    ]);
    let v = json(&out);
    let rows = table(&v, "coefficients")["rows"].as_array().unwrap();
    let theta: Vec<&Value> = rows.iter().filter(|r| r[0] == "theta_hat").collect();
    let names: Vec<&str> = theta.iter().map(|r| r[1].as_str().unwrap()).collect();
    assert_eq!(names, ["(intercept)", "exper", "black", "educ"]);
    assert!(theta.iter().all(|r| r[3].as_f64().unwrap() > 0.0));
    // 2SLS keeps black in the outcome equation and drops the excluded exper
    let tsls: Vec<&str> = rows.iter().filter(|r| r[0] == "2sls").map(|r| r[1].as_str().unwrap()).collect();
    assert_eq!(tsls, ["(intercept)", "black", "educ"]);
    assert_eq!(v["config"]["roles"]["z"], serde_json::json!(["exper", "black"]));
    assert_eq!(v["config"]["first_stage"]["method"], "nw");
    assert!(table(&v, "identification")["rows"].as_array().is_some());
}

#[test]
fn cli_estimates_match_library_after_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("wage.csv");
    let original = wage_data(&f, 400);
    let roles = Roles {
        y: "lw".into(),
        z: vec!["exper".into(), "black".into()],
        x: vec!["educ".into()],
    };
    let back = ingest_csv(&f, &roles).unwrap();
    assert_eq!(back, original);

    let cfg = FirstStageConfig::Nw {
        grid: BandwidthGrid::Fixed(vec![2.0]),
    };
    let lib = fit_theta_hat(&back, &fit_first_stage(&back, &cfg).unwrap()).unwrap();
    let out = inciv(&[
        "estimate", "--data", f.to_str().unwrap(), "--y", "lw", "--z", "exper,black", "--x", "educ",
        "--first-stage", "nw", "--bandwidth", "2", "--estimators", "theta", "--format", "json",
    ]);
    let v = json(&out);
    let rows = table(&v, "coefficients")["rows"].as_array().unwrap();
    for (j, r) in rows.iter().enumerate() {
        assert_eq!(r[2].as_f64().unwrap(), lib.coef()[j]);
        assert_eq!(r[3].as_f64().unwrap(), lib.se[j]);
    }
}

#[test]
fn diagnose_linear_first_stage_fails_without_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("lin.csv");
    let mut text = String::from("y,z,x\n");
    for i in 0..60 {
        let z = (i % 6) as f64;
        text.push_str(&format!("{},{z},{}\n", i % 7, 1.0 + 2.0 * z));
    }
    std::fs::write(&f, text).unwrap();
    let out = inciv(&["diagnose", "--data", f.to_str().unwrap(), "--y", "y", "--z", "z", "--x", "x", "--first-stage", "cells", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(table(&v, "identification")["rows"][0][1], "fail");
}

#[test]
fn identification_failure_exits_two_with_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("lin.csv");
    let mut text = String::from("y,z,x\n");
    for i in 0..60 {
        let z = (i % 6) as f64;
        text.push_str(&format!("{},{z},{}\n", i % 7, 1.0 + 2.0 * z));
    }
    std::fs::write(&f, text).unwrap();
    let out = inciv(&["estimate", "--data", f.to_str().unwrap(), "--y", "y", "--z", "z", "--x", "x", "--first-stage", "cells", "--estimators", "theta"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "identification");
    assert_eq!(err["spectrum"].as_array().unwrap().len(), 3);
}

#[test]
fn missing_column_exits_one_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("d.csv");
    std::fs::write(&f, "y,z\n1,2\n3,4\n5,6\n6,8\n").unwrap();
    let out = inciv(&["estimate", "--data", f.to_str().unwrap(), "--y", "y", "--z", "z", "--x", "educ"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("`educ`"));
}

#[test]
fn simulate_table_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "command = \"simulate\"\ndgp = \"sim1\"\nn = 1000\nrho = 0.5\nbeta = [1.0]\nreps = 5\nseed = 7\n").unwrap();
    let out_path = dir.path().join("out.csv");
    let out = inciv(&["simulate", "--config", cfg.to_str().unwrap(), "--B", "20", "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let first = text.lines().next().unwrap();
    // the flag wins over the file and the echo records it
    assert!(first.contains("\"reps\":20") && first.contains("\"seed\":7"), "{first}");
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let ests: Vec<String> = r.records().map(|r| r.unwrap()[0].to_string()).collect();
    for e in ["theta_hat", "theta_star", "theta_disc", "2sls", "ols"] {
        assert!(ests.iter().any(|x| x == e), "{e} missing");
    }
}

#[test]
fn rerunning_the_echoed_config_reproduces_output() {
    let first = inciv(&["simulate", "--dgp", "sim3", "--n", "200", "--B", "6", "--seed", "3", "--format", "json", "--threads", "2"]);
    let v = json(&first);
    let c = &v["config"];
    let dgp = &c["dgp"];
    let beta: Vec<String> = dgp["beta"].as_array().unwrap().iter().map(|b| b.to_string()).collect();
    let again = inciv(&[
        "simulate",
        "--dgp", dgp["family"].as_str().unwrap(),
        "--n", &dgp["n"].to_string(),
        "--rho", &dgp["rho"].to_string(),
        "--beta", &beta.join(","),
        "--B", &c["reps"].to_string(),
        "--seed", &c["seed"].to_string(),
        "--format", "json",
        "--threads", "1",
    ]);
    assert_eq!(first.stdout, again.stdout);
}

#[test]
fn thread_env_var_is_the_default() {
    let out = Command::new(env!("CARGO_BIN_EXE_inciv"))
        .args(["simulate", "--dgp", "sim1", "--n", "100", "--B", "3"])
        .env("INCIV_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threads"));
}
