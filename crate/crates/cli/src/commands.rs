//! The five verbs. Each writes its artifacts plus `manifest.json` into the
//! output directory; wall-clock timings go to `timing.json` only.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use curedesign_core::cure_cycle::{build_cycle, clip_design, sample_designs, DesignVector, DESIGN_VAR_NAMES};
use curedesign_core::design_opt::{
    optimize_adam, optimize_ga, optimize_nadam, optimize_pso, verify_on_oracle, GaConfig, ObjectiveBreakdown,
    OptTrace, OptimizerKind, PidonObjective, PsoConfig, Surrogate,
};
use curedesign_core::fd_sim::{sig9, simulate_design};
use curedesign_core::material::kelvin_to_celsius;
use curedesign_core::pidon::{
    boundary_mismatch, load_checkpoint, load_model, resume, save_model, save_progress, training_designs,
    AttemptReport, PidonModel, TrainObserver, TrainState,
};

use crate::config::Resolved;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run manifest: everything needed to repeat the command, and nothing
/// time-dependent.
fn write_manifest(out: &Path, command: &str, cfg: &Resolved, extra: serde_json::Value) -> Result<()> {
    let config = serde_json::to_value(&cfg.config)?;
    let manifest = json!({
        "tool": "curedesign",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_source": cfg.source,
        "config_sha256": sha256_hex(serde_json::to_string(&config)?.as_bytes()),
        "material": {"name": cfg.card.name, "sha256": cfg.card.content_hash()},
        "seed": cfg.config.seed,
        "config": config,
        "inputs": extra,
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn write_timing(out: &Path, seconds: f64) -> Result<()> {
    write_json(&out.join("timing.json"), &json!({ "wall_clock_s": seconds }))
}

/// Design from a JSON file: a 9-array, an object with the named variables,
/// or a trace summary with `best_design`.
pub fn read_design(path: &Path) -> Result<DesignVector> {
    let text = fs::read_to_string(path).with_context(|| format!("reading design {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    design_from_value(&v).with_context(|| format!("no design vector in {}", path.display()))
}

fn design_from_value(v: &serde_json::Value) -> Result<DesignVector> {
    if let Some(b) = v.get("best_design") {
        return design_from_value(b);
    }
    if v.is_array() {
        return Ok(serde_json::from_value(v.clone())?);
    }
    if let Some(o) = v.as_object() {
        let mut a = Vec::with_capacity(DESIGN_VAR_NAMES.len());
        for name in DESIGN_VAR_NAMES {
            let x = o.get(name).and_then(|x| x.as_f64()).with_context(|| format!("missing {name}"))?;
            a.push(x);
        }
        return Ok(DesignVector::from_slice(&a)?);
    }
    bail!("expected an array of 9 numbers or an object keyed by variable name")
}

pub fn parse_design_list(s: &str) -> Result<DesignVector> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad number {p:?}")))
        .collect::<Result<_>>()?;
    Ok(DesignVector::from_slice(&vals)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Midpoint,
}

pub fn simulate(cfg: &Resolved, design: Option<DesignVector>, probe: Option<Probe>, out: &Path) -> Result<()> {
    let start = Instant::now();
    let u = design.unwrap_or(cfg.config.initial_design);
    let res = simulate_design(&cfg.card, &u, &cfg.config.sim)?;
    res.export(out)?;
    if probe == Some(Probe::Midpoint) {
        let cycle = build_cycle(&u, &cfg.config.sim.cycle_options())?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t_s", "t_min", "air_c", "part_mid_c", "alpha_mid"])?;
        for (t, temp, alpha) in res.part_midpoint_trajectory()? {
            let air = kelvin_to_celsius(cycle.air_temperature(t)?);
            w.write_record([sig9(t), sig9(t / 60.0), sig9(air), sig9(temp), sig9(alpha)])?;
        }
        write(&out.join("midpoint.csv"), std::str::from_utf8(&w.into_inner()?)?)?;
    }
    write_manifest(out, "simulate", cfg, json!({ "design": u, "probe": probe.map(|_| "midpoint") }))?;
    write_timing(out, start.elapsed().as_secs_f64())?;
    Ok(())
}

fn history_csv(r: &AttemptReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "step", "lr", "total", "ic_T_c", "ic_T_t", "ic_alpha", "bc_bottom", "bc_top", "bc_interface",
        "bc_flux", "phys_T_c", "phys_T_t", "phys_alpha",
    ])?;
    for h in &r.history {
        let l = &h.loss;
        let mut row = vec![h.step.to_string(), sig9(h.lr), sig9(l.total)];
        row.extend(l.ic.iter().chain(&l.bc).chain(&l.phys).map(|&v| sig9(v)));
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn span_tag(span: (f64, f64)) -> String {
    format!("{:.8}_{:.8}", span.0, span.1)
}

struct Recorder<'a> {
    out: &'a Path,
    cfg: &'a Resolved,
    config_value: serde_json::Value,
}

impl TrainObserver for Recorder<'_> {
    fn on_attempt(&mut self, r: &AttemptReport) -> curedesign_core::Result<()> {
        let io = |e: anyhow::Error| curedesign_core::Error::Config(e.to_string());
        let dir = self.out.join("history");
        write(&dir.join(format!("span_{}.csv", span_tag(r.span))), &history_csv(r).map_err(io)?).map_err(io)?;
        let summary = json!({
            "span": r.span,
            "steps": r.steps,
            "eval_total": r.eval.total,
            "eval": r.eval,
            "ic_mismatch": r.ic_mismatch,
            "accepted": r.accepted,
        });
        write_json(&dir.join(format!("span_{}.json", span_tag(r.span))), &summary).map_err(io)?;
        log::info!(
            "span [{:.5}, {:.5}] eval loss {:.3e} {}",
            r.span.0,
            r.span.1,
            r.eval.total,
            if r.accepted { "accepted" } else { "split" }
        );
        Ok(())
    }

    fn on_accept(&mut self, state: &TrainState) -> curedesign_core::Result<()> {
        save_progress(
            &self.out.join("model"),
            &self.cfg.problem(),
            &self.cfg.config.train.architecture,
            &self.config_value,
            state,
        )
    }
}

pub fn train(cfg: &Resolved, out: &Path, resume_run: bool) -> Result<PidonModel> {
    let start = Instant::now();
    let problem = cfg.problem();
    let tc = &cfg.config.train;
    let config_value = serde_json::to_value(tc)?;
    let model_dir = out.join("model");
    let state = if resume_run && model_dir.join("manifest.json").exists() {
        let ck = load_checkpoint(&model_dir)?;
        if ck.problem != problem || ck.config != config_value || ck.architecture != tc.architecture {
            bail!("checkpoint in {} was written by a different configuration", model_dir.display());
        }
        log::info!(
            "resuming: {} spans accepted, {} pending",
            ck.state.accepted.len(),
            ck.state.pending.len()
        );
        ck.state
    } else {
        TrainState::initial(tc)
    };
    let mut rec = Recorder {
        out,
        cfg,
        config_value,
    };
    let (model, report) = resume(&problem, tc, state, &mut rec)?;
    save_model(&model, &model_dir)?;

    let designs = training_designs(&problem, tc);
    let mismatch = boundary_mismatch(&model, &designs, &tc.ic_grid())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["boundary_tau", "ic_mismatch", "threshold", "pass"])?;
    for (pair, m) in model.subdomains.windows(2).zip(&mismatch) {
        let pass = *m <= tc.split_threshold;
        w.write_record([sig9(pair[1].span.0), sig9(*m), sig9(tc.split_threshold), pass.to_string()])?;
    }
    write(&out.join("continuity.csv"), std::str::from_utf8(&w.into_inner()?)?)?;
    let spans: Vec<(f64, f64)> = model.spans();
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "spans": spans,
            "splits_used": report.splits_used,
            "attempts_this_run": report.attempts.len(),
            "warnings": report.warnings,
            "parameters": model.param_count(),
            "boundary_mismatch": mismatch,
        }),
    )?;
    write_manifest(out, "train", cfg, json!({ "resume": resume_run }))?;
    write_timing(out, start.elapsed().as_secs_f64())?;
    Ok(model)
}

fn load_trained(cfg: &Resolved, model_dir: &Path) -> Result<PidonModel> {
    let model = load_model(model_dir)?;
    let problem = cfg.problem();
    if model.problem.bounds != problem.bounds {
        bail!("model in {} was trained on different design bounds than the config", model_dir.display());
    }
    if model.problem.card != problem.card || model.problem.part_thickness != problem.part_thickness {
        bail!("model in {} was trained for a different material or part thickness", model_dir.display());
    }
    Ok(model)
}

fn run_optimizer(
    kind: OptimizerKind,
    s: &dyn Surrogate,
    u0: &DesignVector,
    cfg: &Resolved,
    seed: u64,
    jobs: usize,
) -> Result<OptTrace> {
    let c = &cfg.config;
    let mut tr = match kind {
        OptimizerKind::Adam => optimize_adam(s, u0, &c.adam)?,
        OptimizerKind::Nadam => optimize_nadam(s, u0, &c.nadam)?,
        OptimizerKind::Pso => optimize_pso(s, &PsoConfig { seed, jobs, ..c.pso.clone() }, None)?,
        OptimizerKind::Ga => optimize_ga(s, &GaConfig { seed, jobs, ..c.ga.clone() }, None)?,
    };
    tr.seed = seed;
    Ok(tr)
}

fn summary_row(b: &ObjectiveBreakdown) -> serde_json::Value {
    json!({
        "terms": b.terms,
        "total": b.total,
        "metrics": b.metrics,
    })
}

/// Per-iteration mean and standard deviation across starts.
fn aggregate_csv(traces: &[OptTrace]) -> Result<String> {
    let n = traces.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let cols = ["total", "min_end_alpha", "mean_end_alpha", "mean_axial_gradient", "max_temperature_c", "mean_thermal_lag_c"];
    let mut header = vec!["iteration".to_string(), "runs".to_string()];
    for c in cols {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header)?;
    for i in 0..n {
        // finished runs hold their last row
        let rows: Vec<_> = traces.iter().filter_map(|t| t.rows.get(i).or(t.rows.last())).collect();
        let mut rec = vec![i.to_string(), rows.len().to_string()];
        for c in cols {
            let vals: Vec<f64> = rows
                .iter()
                .map(|r| {
                    let m = &r.breakdown.metrics;
                    match c {
                        "total" => r.breakdown.total,
                        "min_end_alpha" => m.min_end_alpha,
                        "mean_end_alpha" => m.mean_end_alpha,
                        "mean_axial_gradient" => m.mean_axial_gradient,
                        "max_temperature_c" => m.max_temperature_c,
                        _ => m.mean_thermal_lag_c,
                    }
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            rec.push(sig9(mean));
            rec.push(sig9(var.sqrt()));
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub struct OptimizeArgs {
    pub model: PathBuf,
    pub optimizer: Option<OptimizerKind>,
    pub starts: Option<usize>,
    pub u0: Option<DesignVector>,
    pub jobs: usize,
}

/// Runs the configured optimizer from one or more starts and returns the traces.
pub fn optimize(cfg: &Resolved, args: &OptimizeArgs, out: &Path) -> Result<Vec<OptTrace>> {
    let start = Instant::now();
    let model = load_trained(cfg, &args.model)?;
    let obj = PidonObjective::new(&model, cfg.config.objective.clone())?;
    let kind = args.optimizer.unwrap_or(cfg.config.optimize.optimizer);
    let k = args.starts.unwrap_or(cfg.config.optimize.starts);
    let seed = cfg.config.seed;
    let starts: Vec<DesignVector> = if k == 0 {
        vec![args.u0.unwrap_or(cfg.config.initial_design)]
    } else {
        sample_designs(&cfg.config.bounds, k, seed)
    };
    let mut traces = Vec::with_capacity(starts.len());
    let mut summaries = Vec::new();
    let mut timing = Vec::new();
    for (i, u0) in starts.iter().enumerate() {
        let run_seed = seed.wrapping_add(i as u64);
        let tr = run_optimizer(kind, &obj, u0, cfg, run_seed, args.jobs)?;
        let stem = format!("{}_{i:02}", kind.name());
        write(&out.join("traces").join(format!("{stem}.csv")), &tr.to_csv()?)?;
        write_json(&out.join("traces").join(format!("{stem}.json")), &tr)?;
        if let Some(msg) = &tr.aborted {
            log::warn!("run {i} stopped early: {msg}");
        }
        summaries.push(json!({
            "start": i,
            "seed": run_seed,
            "initial_design": clip_design(u0, &cfg.config.bounds),
            "clipped_start": tr.clipped_start,
            "iterations": tr.rows.len(),
            "calls": tr.calls,
            "best_design": tr.best_design,
            "best": summary_row(&tr.best),
            "aborted": tr.aborted,
        }));
        timing.push(tr.wall_clock_s);
        traces.push(tr);
    }
    write(&out.join("aggregate.csv"), &aggregate_csv(&traces)?)?;
    let best = traces
        .iter()
        .min_by(|a, b| a.best.total.total_cmp(&b.best.total))
        .expect("at least one start");
    write_json(
        &out.join("summary.json"),
        &json!({
            "optimizer": kind.name(),
            "starts": summaries,
            "best_design": best.best_design,
            "total_calls": traces.iter().map(|t| t.calls.total()).sum::<u64>(),
        }),
    )?;
    write_manifest(
        out,
        "optimize",
        cfg,
        json!({
            "model": args.model.display().to_string(),
            "model_manifest_sha256": sha256_hex(&fs::read(args.model.join("manifest.json"))?),
            "optimizer": kind.name(),
            "starts": k,
            "u0": args.u0,
        }),
    )?;
    write_json(&out.join("timing.json"), &json!({ "wall_clock_s": start.elapsed().as_secs_f64(), "per_start_s": timing }))?;
    Ok(traces)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricCheck {
    pub metric: &'static str,
    pub value: f64,
    pub limit: f64,
    pub relation: &'static str,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub design: DesignVector,
    pub oracle: ObjectiveBreakdown,
    pub surrogate: Option<ObjectiveBreakdown>,
    pub checks: Vec<MetricCheck>,
    pub pass: bool,
}

pub fn verify_design(cfg: &Resolved, u: &DesignVector, model: Option<&PidonModel>) -> Result<VerifyReport> {
    let c = &cfg.config;
    let oracle = verify_on_oracle(&cfg.card, u, &c.sim, &c.objective, None)?;
    let surrogate = match model {
        Some(m) => Some(PidonObjective::new(m, c.objective.clone())?.breakdown(u, None)?),
        None => None,
    };
    let m = &oracle.metrics;
    let t = &c.verify;
    let checks = vec![
        MetricCheck {
            metric: "min_end_alpha",
            value: m.min_end_alpha,
            limit: t.min_end_alpha,
            relation: ">=",
            pass: m.min_end_alpha >= t.min_end_alpha,
        },
        MetricCheck {
            metric: "max_temperature_c",
            value: m.max_temperature_c,
            limit: t.max_temperature_c,
            relation: "<=",
            pass: m.max_temperature_c <= t.max_temperature_c,
        },
        MetricCheck {
            metric: "mean_thermal_lag_c",
            value: m.mean_thermal_lag_c,
            limit: t.max_mean_lag_c,
            relation: "<=",
            pass: m.mean_thermal_lag_c <= t.max_mean_lag_c,
        },
    ];
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport {
        design: *u,
        oracle,
        surrogate,
        checks,
        pass,
    })
}

pub fn verify(cfg: &Resolved, u: &DesignVector, model_dir: Option<&Path>, out: &Path) -> Result<VerifyReport> {
    let start = Instant::now();
    let model = match model_dir {
        Some(d) => Some(load_trained(cfg, d)?),
        None => None,
    };
    let report = verify_design(cfg, u, model.as_ref())?;
    write_json(&out.join("report.json"), &report)?;
    write_manifest(
        out,
        "verify",
        cfg,
        json!({ "design": u, "model": model_dir.map(|d| d.display().to_string()) }),
    )?;
    write_timing(out, start.elapsed().as_secs_f64())?;
    Ok(report)
}

pub const BENCHMARK_COLUMNS: [&str; 10] = [
    "optimizer",
    "iterations",
    "forward_calls",
    "backward_calls",
    "surrogate_calls",
    "mean_doc_gradient",
    "max_part_temperature_c",
    "mean_thermal_lag_c",
    "mean_doc",
    "min_doc",
];

pub fn benchmark(cfg: &Resolved, model_dir: &Path, jobs: usize, out: &Path) -> Result<Vec<OptTrace>> {
    let start = Instant::now();
    let model = load_trained(cfg, model_dir)?;
    let obj = PidonObjective::new(&model, cfg.config.objective.clone())?;
    let u0 = cfg.config.initial_design;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BENCHMARK_COLUMNS)?;
    let mut traces = Vec::new();
    let mut timing = serde_json::Map::new();
    for kind in [OptimizerKind::Adam, OptimizerKind::Nadam, OptimizerKind::Pso, OptimizerKind::Ga] {
        let tr = run_optimizer(kind, &obj, &u0, cfg, cfg.config.seed, jobs)?;
        let m = &tr.best.metrics;
        w.write_record([
            kind.name().to_string(),
            tr.rows.len().to_string(),
            tr.calls.forward.to_string(),
            tr.calls.backward.to_string(),
            tr.calls.total().to_string(),
            sig9(m.mean_axial_gradient),
            sig9(m.max_temperature_c),
            sig9(m.mean_thermal_lag_c),
            sig9(m.mean_end_alpha),
            sig9(m.min_end_alpha),
        ])?;
        write(&out.join("traces").join(format!("{}.csv", kind.name())), &tr.to_csv()?)?;
        write_json(&out.join("traces").join(format!("{}.json", kind.name())), &tr)?;
        timing.insert(kind.name().into(), json!(tr.wall_clock_s));
        traces.push(tr);
    }
    write(&out.join("benchmark.csv"), std::str::from_utf8(&w.into_inner()?)?)?;
    write_manifest(
        out,
        "benchmark",
        cfg,
        json!({
            "model": model_dir.display().to_string(),
            "model_manifest_sha256": sha256_hex(&fs::read(model_dir.join("manifest.json"))?),
        }),
    )?;
    timing.insert("total".into(), json!(start.elapsed().as_secs_f64()));
    write_json(&out.join("timing.json"), &timing)?;
    Ok(traces)
}
