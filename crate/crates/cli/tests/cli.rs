mod common;

use std::fs;

use common::{run, run_ok, same_files, snapshot, tiny_config, write_config};
use curedesign::commands::{parse_design_list, read_design, BENCHMARK_COLUMNS};
use curedesign::config::{resolve, PRESETS};
use curedesign::exit_code;
use curedesign_core::design_opt::OptimizerKind;
use serde_json::{json, Value};

#[test]
fn presets_resolve() {
    for (name, _) in PRESETS {
        let r = resolve(name, None).unwrap();
        assert_eq!(r.source, name);
        assert_eq!(r.config.sim.part_thickness, r.config.part_thickness_mm / 1000.0);
    }
    let p20 = resolve("paper-20mm", None).unwrap().config;
    assert_eq!(p20.train.designs, 600);
    assert_eq!(p20.train.initial_subdomains, 11);
    assert_eq!(p20.train.epochs, 200);
    assert_eq!(p20.adam.iterations, 180);
    assert_eq!(p20.pso.particles * p20.pso.iterations, 500);
    assert_eq!(p20.ga.population * p20.ga.generations, 10_000);
    assert_eq!(resolve("paper-30mm", None).unwrap().config.sim.part_thickness, 0.03);
}

#[test]
fn master_seed_reaches_every_component() {
    let r = resolve("desk-scale", Some(42)).unwrap().config;
    assert_eq!((r.seed, r.train.seed, r.pso.seed, r.ga.seed), (42, 42, 42, 42));
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_config();
    v["unknown_key"] = json!(1);
    let p = write_config(dir.path(), &v);
    let out = run(&["--config", p.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(2));

    let mut v = tiny_config();
    v["material"] = json!("cards/missing.json");
    let p = write_config(dir.path(), &v);
    let out = run(&["--config", p.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = run(&["--config", "no-such-preset", "simulate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["--config", "desk-scale", "simulate", "--u", "1,2,3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn error_kinds_map_to_exit_codes() {
    use curedesign_core::Error;
    let code = |e: Error| exit_code(&anyhow::Error::new(e).context("while running"));
    assert_eq!(code(Error::Unstable("x".into())), 1);
    assert_eq!(code(Error::Diverged("x".into())), 1);
    assert_eq!(code(Error::NonFiniteGradient { iteration: 3 }), 1);
    assert_eq!(code(Error::Domain("x".into())), 1);
    assert_eq!(code(Error::Config("x".into())), 2);
    assert_eq!(code(Error::InvalidDesign("x".into())), 2);
    assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
}

#[test]
fn design_inputs_parse_in_every_form() {
    let dir = tempfile::tempdir().unwrap();
    let vals = [2.1, 2.1, 60.0, 120.0, 110.0, 176.0, 75.0, 65.0, 3.0];
    let expect = parse_design_list("2.1,2.1,60,120,110,176,75,65,3").unwrap();
    let named: serde_json::Map<String, Value> = curedesign_core::cure_cycle::DESIGN_VAR_NAMES
        .iter()
        .zip(vals)
        .map(|(n, x)| (n.to_string(), json!(x)))
        .collect();
    for (i, v) in [json!(vals), Value::Object(named), json!({"best_design": vals})].iter().enumerate() {
        let p = dir.path().join(format!("d{i}.json"));
        fs::write(&p, v.to_string()).unwrap();
        assert_eq!(read_design(&p).unwrap(), expect);
    }
    assert!(parse_design_list("1,2,x").is_err());
}

#[test]
fn simulate_writes_fields_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("sim");
    run_ok(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "simulate", "--probe", "midpoint"]);
    let mid = fs::read_to_string(out.join("midpoint.csv")).unwrap();
    assert!(mid.starts_with("t_s,t_min,air_c,part_mid_c,alpha_mid"));
    let first: Vec<f64> = mid.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert!((first[2] - 20.0).abs() < 1e-9, "air starts at 20 °C: {first:?}");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert!(out.join("timing.json").exists());
}

/// Train, optimize, verify and benchmark on the tiny config, twice.
#[test]
fn pipeline_runs_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let cfg = cfg.to_str().unwrap();
    let path = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    run_ok(&["--config", cfg, "--out", &path("train"), "train"]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(path("train") + "/train_summary.json").unwrap()).unwrap();
    assert_eq!(summary["splits_used"], 1);
    let continuity = fs::read_to_string(path("train") + "/continuity.csv").unwrap();
    assert!(continuity.starts_with("boundary_tau,ic_mismatch,threshold,pass"));
    assert_eq!(continuity.lines().count(), 3);

    // resuming a finished run retrains nothing
    let first_run = snapshot(&dir.path().join("train"));
    let before = snapshot(&dir.path().join("train/model"));
    run_ok(&["--config", cfg, "--out", &path("train"), "train", "--resume"]);
    same_files(&snapshot(&dir.path().join("train/model")), &before);

    let model = path("train") + "/model";
    for (tag, jobs) in [("a", "1"), ("b", "2")] {
        run_ok(&["--config", cfg, "--out", &path(&format!("opt_{tag}")), "--jobs", jobs, "optimize", "--model", &model, "--optimizer", "pso", "--starts", "2"]);
        run_ok(&["--config", cfg, "--out", &path(&format!("bench_{tag}")), "--jobs", jobs, "benchmark", "--model", &model]);
    }
    same_files(&snapshot(&dir.path().join("opt_a")), &snapshot(&dir.path().join("opt_b")));
    same_files(&snapshot(&dir.path().join("bench_a")), &snapshot(&dir.path().join("bench_b")));

    let bench = fs::read_to_string(path("bench_a") + "/benchmark.csv").unwrap();
    assert_eq!(bench.lines().next().unwrap(), BENCHMARK_COLUMNS.join(","));
    for kind in ["adam", "nadam", "pso", "ga"] {
        assert!(bench.lines().any(|l| l.starts_with(kind)), "{kind} missing");
    }
    let opt: Value = serde_json::from_str(&fs::read_to_string(path("opt_a") + "/summary.json").unwrap()).unwrap();
    assert_eq!(opt["optimizer"], OptimizerKind::Pso.name());
    assert_eq!(opt["starts"].as_array().unwrap().len(), 2);

    let best = path("opt_a") + "/summary.json";
    run_ok(&["--config", cfg, "--out", &path("verify"), "verify", "--design", &best, "--model", &model]);
    let report: Value = serde_json::from_str(&fs::read_to_string(path("verify") + "/report.json").unwrap()).unwrap();
    for key in ["design", "oracle", "surrogate", "checks", "pass"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let checks = report["checks"].as_array().unwrap();
    let names: Vec<&str> = checks.iter().map(|c| c["metric"].as_str().unwrap()).collect();
    assert_eq!(names, ["min_end_alpha", "max_temperature_c", "mean_thermal_lag_c"]);
    let all = checks.iter().all(|c| c["pass"].as_bool().unwrap());
    assert_eq!(report["pass"].as_bool().unwrap(), all);

    // a second training run from scratch reproduces every artifact
    run_ok(&["--config", cfg, "--out", &path("train2"), "train"]);
    same_files(&snapshot(&dir.path().join("train2")), &first_run);
}

#[test]
fn optimize_refuses_a_model_for_other_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let train_out = dir.path().join("t");
    run_ok(&["--config", cfg.to_str().unwrap(), "--out", train_out.to_str().unwrap(), "train"]);
    let mut other = tiny_config();
    other["bounds"]["ht2"] = json!([176.0, 184.0]);
    let sub = dir.path().join("other");
    fs::create_dir_all(&sub).unwrap();
    let other = write_config(&sub, &other);
    let out = run(&[
        "--config",
        other.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "optimize",
        "--model",
        train_out.join("model").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bounds"));
}
