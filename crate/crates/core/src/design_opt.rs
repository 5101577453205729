//! Inverse design through the surrogate: the four penalty objectives,
//! gradient-based (Adam, NAdam) and population-based (PSO, GA) optimizers,
//! call accounting and verification on the finite-difference simulator.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cure_cycle::{
    air_temperature_at_fraction, build_cycle, clip_design, denormalize_design, normalize_design,
    DesignBounds, DesignVector, NUM_DESIGN_VARS,
};
use crate::error::{Error, Result};
use crate::fd_sim::{simulate_design, SimOptions};
use crate::material::{kelvin_to_celsius, MaterialCard};
use crate::nn::{Tape, Tensor, Var};
use crate::pidon::{OutputScaler, PidonModel, Variable};

pub const NUM_TERMS: usize = 4;

/// Temperature field the exotherm and lag terms are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureField {
    Part,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Points across the part thickness.
    pub n_z: usize,
    /// Points over `[0, t_obj]`.
    pub n_t: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Exotherm cap (°C).
    pub max_temperature_c: f64,
    /// Thermal-lag allowance (°C).
    pub max_lag_c: f64,
    pub temperature_field: TemperatureField,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            n_z: 20,
            n_t: 100,
            alpha_min: 0.85,
            alpha_max: 0.95,
            max_temperature_c: 185.0,
            max_lag_c: 20.0,
            temperature_field: TemperatureField::Part,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_z < 2 || self.n_t < 2 {
            return Err(Error::Config("objective grid needs at least 2×2 points".into()));
        }
        if !(self.alpha_min <= self.alpha_max) {
            return Err(Error::Config("alpha window is empty".into()));
        }
        Ok(())
    }

    fn taus(&self) -> Vec<f64> {
        (0..self.n_t).map(|i| i as f64 / (self.n_t - 1) as f64).collect()
    }

    fn xs(&self) -> Vec<f64> {
        (0..self.n_z).map(|j| j as f64 / (self.n_z - 1) as f64).collect()
    }
}

/// Physical quantities behind the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawMetrics {
    pub min_end_alpha: f64,
    pub max_end_alpha: f64,
    pub mean_end_alpha: f64,
    /// Mean `|∂α/∂z|` at `t_obj` (1/m).
    pub mean_axial_gradient: f64,
    pub max_temperature_c: f64,
    /// Mean `|T_a − T|` over the grid (°C).
    pub mean_thermal_lag_c: f64,
    pub max_thermal_lag_c: f64,
}

/// Objective terms `L1..L4` before normalisation, the factors they are
/// divided by, and the resulting total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub terms: [f64; NUM_TERMS],
    pub normalization: [f64; NUM_TERMS],
    pub total: f64,
    pub metrics: RawMetrics,
}

impl ObjectiveBreakdown {
    pub fn new(terms: [f64; NUM_TERMS], normalization: [f64; NUM_TERMS], metrics: RawMetrics) -> Self {
        let total = terms.iter().zip(&normalization).map(|(t, n)| t / n).sum();
        ObjectiveBreakdown {
            terms,
            normalization,
            total,
            metrics,
        }
    }

    pub fn normalized(&self) -> [f64; NUM_TERMS] {
        let mut out = [0.0; NUM_TERMS];
        for i in 0..NUM_TERMS {
            out[i] = self.terms[i] / self.normalization[i];
        }
        out
    }
}

/// Divide each term by its value at the initial design, or by 1 when that is 0.
pub fn normalization_from(terms: &[f64; NUM_TERMS]) -> [f64; NUM_TERMS] {
    terms.map(|t| if t > 0.0 { t } else { 1.0 })
}

/// Degree-of-cure window penalty.
pub fn doc_window_loss(end_alpha: &[f64], lo: f64, hi: f64) -> f64 {
    let min = end_alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let max = end_alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min < lo {
        lo - min
    } else if max > hi {
        max - hi
    } else {
        0.0
    }
}

pub fn axial_gradient_loss(gradients: &[f64]) -> f64 {
    gradients.iter().map(|g| g.abs()).sum::<f64>() / gradients.len() as f64
}

pub fn exotherm_loss(temperatures_c: &[f64], cap: f64) -> f64 {
    let max = temperatures_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max - cap).max(0.0)
}

/// Mean over all points of the lag in excess of `limit`.
pub fn lag_loss(air_c: &[f64], temperatures_c: &[f64], limit: f64) -> f64 {
    let n = air_c.len();
    air_c
        .iter()
        .zip(temperatures_c)
        .map(|(a, t)| (a - t - limit).max(0.0))
        .sum::<f64>()
        / n as f64
}

/// Fields needed by the objective, as sampled on some grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveFields {
    pub end_alpha: Vec<f64>,
    /// `∂α/∂z` at `t_obj` (1/m).
    pub end_alpha_gradient: Vec<f64>,
    pub temperature_c: Vec<f64>,
    pub air_c: Vec<f64>,
}

impl ObjectiveFields {
    pub fn terms(&self, cfg: &ObjectiveConfig) -> [f64; NUM_TERMS] {
        [
            doc_window_loss(&self.end_alpha, cfg.alpha_min, cfg.alpha_max),
            axial_gradient_loss(&self.end_alpha_gradient),
            exotherm_loss(&self.temperature_c, cfg.max_temperature_c),
            lag_loss(&self.air_c, &self.temperature_c, cfg.max_lag_c),
        ]
    }

    pub fn metrics(&self) -> RawMetrics {
        let a = &self.end_alpha;
        let lags: Vec<f64> = self.air_c.iter().zip(&self.temperature_c).map(|(a, t)| a - t).collect();
        RawMetrics {
            min_end_alpha: a.iter().copied().fold(f64::INFINITY, f64::min),
            max_end_alpha: a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_end_alpha: a.iter().sum::<f64>() / a.len() as f64,
            mean_axial_gradient: axial_gradient_loss(&self.end_alpha_gradient),
            max_temperature_c: self.temperature_c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_thermal_lag_c: lags.iter().map(|l| l.abs()).sum::<f64>() / lags.len() as f64,
            max_thermal_lag_c: lags.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Objective terms and metrics at one design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub terms: [f64; NUM_TERMS],
    pub metrics: RawMetrics,
}

/// Differentiable objective model. `evaluate` costs one forward and one
/// derivative call (the axial gradient); `evaluate_with_gradient` adds the
/// backward pass for the design gradient.
pub trait Surrogate: Sync {
    fn bounds(&self) -> &DesignBounds;

    fn evaluate(&self, u: &DesignVector) -> Result<Evaluation>;

    /// Also returns the gradient with respect to `u` of
    /// `Σ terms[i] / norm[i]`; `norm` defaults to the normalisation derived
    /// from this evaluation.
    fn evaluate_with_gradient(
        &self,
        u: &DesignVector,
        norm: Option<&[f64; NUM_TERMS]>,
    ) -> Result<(Evaluation, [f64; NUM_DESIGN_VARS])>;
}

/// The trained surrogate as an objective.
pub struct PidonObjective<'a> {
    pub model: &'a PidonModel,
    pub cfg: ObjectiveConfig,
}

struct Recorded {
    terms: [Var; NUM_TERMS],
    fields: ObjectiveFields,
}

impl<'a> PidonObjective<'a> {
    pub fn new(model: &'a PidonModel, cfg: ObjectiveConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PidonObjective { model, cfg })
    }

    fn temperature_variable(&self) -> Variable {
        match self.cfg.temperature_field {
            TemperatureField::Part => Variable::PartTemperature,
            TemperatureField::Tool => Variable::ToolTemperature,
        }
    }

    /// Records the four terms with the normalised design `x` as a leaf.
    fn record(&self, tape: &mut Tape, u: &DesignVector) -> Result<(Var, Recorded)> {
        let model = self.model;
        model.check_design(u)?;
        let bounds = &model.problem.bounds;
        let x = tape.leaf(Tensor::new(1, NUM_DESIGN_VARS, normalize_design(u, bounds).to_vec()));
        let taus = self.cfg.taus();
        let xs = self.cfg.xs();
        let nz = xs.len();
        let temp_var = self.temperature_variable();
        let ts = OutputScaler::TEMPERATURE;
        let ds = OutputScaler::DOC;

        // temperature on the grid, time-major, routed per subdomain
        let mut pieces = Vec::new();
        let mut order = Vec::with_capacity(taus.len());
        for (k, sub) in model.subdomains.iter().enumerate() {
            let owned: Vec<usize> = (0..taus.len()).filter(|&i| model.subdomain_index(taus[i]) == Some(k)).collect();
            if owned.is_empty() {
                continue;
            }
            let op = sub.operator(temp_var);
            let coords: Vec<f64> = owned
                .iter()
                .flat_map(|&i| {
                    let th = op.tau_hat(taus[i]);
                    xs.iter().flat_map(move |&z| [th, 2.0 * z - 1.0])
                })
                .collect();
            let net = op.net.bind(tape, false);
            let table = net.table(tape, x);
            let index: Rc<[usize]> = vec![0; owned.len() * nz].into();
            let (out, _) = net.record(tape, table, index, &coords, &[], None);
            pieces.push(out);
            order.extend(owned);
        }
        debug_assert!(order.windows(2).all(|w| w[0] < w[1]));
        let temp_net = tape.concat(&pieces);
        let temp = {
            let s = tape.scale(temp_net, ts.scale);
            tape.offset(s, ts.offset)
        };

        // air temperature and its design sensitivity
        let slopes = crate::cure_cycle::normalization_slopes(bounds);
        let t0 = model.problem.initial_temp_c;
        let mut air = Vec::with_capacity(taus.len() * nz);
        let mut jac = Vec::with_capacity(taus.len() * nz * NUM_DESIGN_VARS);
        for &tau in &taus {
            let (ta, g) = air_temperature_at_fraction(u, tau, t0);
            let gx: Vec<f64> = (0..NUM_DESIGN_VARS)
                .map(|i| if slopes[i] > 0.0 { g[i] / slopes[i] } else { 0.0 })
                .collect();
            for _ in 0..nz {
                air.push(ta);
                jac.extend(&gx);
            }
        }
        let air_var = tape.linearized(x, Tensor::column(air.clone()), jac.into());

        // degree of cure and its axial derivative at t_obj
        let last = model.subdomains.last().expect("validated model");
        let op = last.operator(Variable::DegreeOfCure);
        let coords: Vec<f64> = xs.iter().flat_map(|&z| [op.tau_hat(1.0), 2.0 * z - 1.0]).collect();
        let net = op.net.bind(tape, false);
        let table = net.table(tape, x);
        let (out, _) = net.record(tape, table, vec![0; nz].into(), &coords, &[1], None);
        let alpha = {
            let v = tape.channel(out, 0, nz);
            let s = tape.scale(v, ds.scale);
            tape.offset(s, ds.offset)
        };
        let l_c = model.problem.part_thickness;
        // ∂α/∂z = scale · ∂N/∂ẑ · 2 / L_c
        let grad = {
            let d = tape.channel(out, 1, nz);
            tape.scale(d, ds.scale * 2.0 / l_c)
        };

        let fields = ObjectiveFields {
            end_alpha: tape.value(alpha).data.clone(),
            end_alpha_gradient: tape.value(grad).data.clone(),
            temperature_c: tape.value(temp).data.clone(),
            air_c: air,
        };

        let c = &self.cfg;
        let amin = tape.min(alpha);
        let amax = tape.max(alpha);
        let l1 = if tape.value(amin).item() < c.alpha_min {
            let n = tape.scale(amin, -1.0);
            tape.offset(n, c.alpha_min)
        } else if tape.value(amax).item() > c.alpha_max {
            tape.offset(amax, -c.alpha_max)
        } else {
            tape.scale(amin, 0.0)
        };
        let abs = tape.abs(grad);
        let l2 = tape.mean(abs);
        let tmax = tape.max(temp);
        let over = tape.offset(tmax, -c.max_temperature_c);
        let l3 = tape.relu(over);
        let lag = tape.sub(air_var, temp);
        let excess = tape.offset(lag, -c.max_lag_c);
        let excess = tape.relu(excess);
        let l4 = tape.mean(excess);
        Ok((
            x,
            Recorded {
                terms: [l1, l2, l3, l4],
                fields,
            },
        ))
    }

    /// Objective breakdown at `u` with the given normalisation (defaults to
    /// the terms themselves).
    pub fn breakdown(&self, u: &DesignVector, norm: Option<&[f64; NUM_TERMS]>) -> Result<ObjectiveBreakdown> {
        let e = self.evaluate(u)?;
        let norm = norm.copied().unwrap_or_else(|| normalization_from(&e.terms));
        Ok(ObjectiveBreakdown::new(e.terms, norm, e.metrics))
    }

    /// Fields the objective is computed from.
    pub fn fields(&self, u: &DesignVector) -> Result<ObjectiveFields> {
        let mut tape = Tape::new();
        Ok(self.record(&mut tape, u)?.1.fields)
    }
}

impl Surrogate for PidonObjective<'_> {
    fn bounds(&self) -> &DesignBounds {
        &self.model.problem.bounds
    }

    fn evaluate(&self, u: &DesignVector) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let (_, rec) = self.record(&mut tape, u)?;
        Ok(Evaluation {
            terms: rec.terms.map(|v| tape.value(v).item()),
            metrics: rec.fields.metrics(),
        })
    }

    fn evaluate_with_gradient(
        &self,
        u: &DesignVector,
        norm: Option<&[f64; NUM_TERMS]>,
    ) -> Result<(Evaluation, [f64; NUM_DESIGN_VARS])> {
        let mut tape = Tape::new();
        let (x, rec) = self.record(&mut tape, u)?;
        let terms = rec.terms.map(|v| tape.value(v).item());
        let norm = norm.copied().unwrap_or_else(|| normalization_from(&terms));
        let mut total = tape.scale(rec.terms[0], 1.0 / norm[0]);
        for i in 1..NUM_TERMS {
            let t = tape.scale(rec.terms[i], 1.0 / norm[i]);
            total = tape.add(total, t);
        }
        let g = tape.backward(total)?;
        let gx = g.of(&tape, x);
        let slopes = crate::cure_cycle::normalization_slopes(self.bounds());
        let mut gu = [0.0; NUM_DESIGN_VARS];
        for i in 0..NUM_DESIGN_VARS {
            gu[i] = gx[i] * slopes[i];
        }
        Ok((
            Evaluation {
                terms,
                metrics: rec.fields.metrics(),
            },
            gu,
        ))
    }
}

/// Objective of `u` on the surrogate.
pub fn objective(
    model: &PidonModel,
    u: &DesignVector,
    cfg: &ObjectiveConfig,
    norm: Option<&[f64; NUM_TERMS]>,
) -> Result<ObjectiveBreakdown> {
    PidonObjective::new(model, cfg.clone())?.breakdown(u, norm)
}

/// Mean `|∂α/∂z|` (1/m) at `t_obj` over `n_z` evenly spaced points.
pub fn axial_doc_gradient(model: &PidonModel, u: &DesignVector, n_z: usize) -> Result<f64> {
    let cfg = ObjectiveConfig {
        n_z,
        ..ObjectiveConfig::default()
    };
    Ok(PidonObjective::new(model, cfg)?.fields(u)?.metrics().mean_axial_gradient)
}

/// Oracle counterpart of the objective, from a finite-difference run.
pub fn verify_on_oracle(
    card: &MaterialCard,
    u: &DesignVector,
    sim: &SimOptions,
    cfg: &ObjectiveConfig,
    norm: Option<&[f64; NUM_TERMS]>,
) -> Result<ObjectiveBreakdown> {
    cfg.validate()?;
    let res = simulate_design(card, u, sim)?;
    let t_obj = res.meta.t_obj.ok_or_else(|| Error::Config("simulation did not reach t_obj".into()))?;
    let geom = res.meta.geometry;
    let (alpha, _) = res.end_state(t_obj)?;
    let part_z: Vec<f64> = res.part_z_nodes().to_vec();
    let nodal = nodal_gradient(&part_z, &alpha);
    let z0 = part_z[0];
    let xs = cfg.xs();
    let grad: Vec<f64> = xs
        .iter()
        .map(|&x| interp(&part_z, &nodal, z0 + x * geom.part_thickness))
        .collect();
    let cycle = build_cycle(u, &sim.cycle_options())?;
    let (first, count) = match cfg.temperature_field {
        TemperatureField::Part => (geom.interface_index(), geom.n_z_part),
        TemperatureField::Tool => (0, geom.interface_index() + 1),
    };
    let mut temps = Vec::new();
    let mut air = Vec::new();
    for (k, &t) in res.times.iter().enumerate() {
        if t > t_obj {
            break;
        }
        let ta = kelvin_to_celsius(cycle.air_temperature(t)?);
        for i in first..first + count {
            temps.push(kelvin_to_celsius(res.temperature_at(k, i)));
            air.push(ta);
        }
    }
    let fields = ObjectiveFields {
        end_alpha: alpha,
        end_alpha_gradient: grad,
        temperature_c: temps,
        air_c: air,
    };
    let terms = fields.terms(cfg);
    let norm = norm.copied().unwrap_or_else(|| normalization_from(&terms));
    Ok(ObjectiveBreakdown::new(terms, norm, fields.metrics()))
}

/// Second-order finite-difference derivative on a possibly uneven grid.
fn nodal_gradient(z: &[f64], f: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut g = vec![0.0; n];
    if n < 3 {
        let d = (f[n - 1] - f[0]) / (z[n - 1] - z[0]);
        return vec![d; n];
    }
    let three = |i0: usize, x: f64| {
        // derivative at x of the quadratic through nodes i0..i0+3
        let (a, b, c) = (z[i0], z[i0 + 1], z[i0 + 2]);
        let (fa, fb, fc) = (f[i0], f[i0 + 1], f[i0 + 2]);
        fa * (2.0 * x - b - c) / ((a - b) * (a - c))
            + fb * (2.0 * x - a - c) / ((b - a) * (b - c))
            + fc * (2.0 * x - a - b) / ((c - a) * (c - b))
    };
    g[0] = three(0, z[0]);
    for i in 1..n - 1 {
        g[i] = three(i - 1, z[i]);
    }
    g[n - 1] = three(n - 3, z[n - 1]);
    g
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    (1.0 - w) * ys[i] + w * ys[i + 1]
}

/// Surrogate calls made so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub forward: u64,
    pub backward: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Nadam,
    Pso,
    Ga,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Nadam => "nadam",
            OptimizerKind::Pso => "pso",
            OptimizerKind::Ga => "ga",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "nadam" => Ok(OptimizerKind::Nadam),
            "pso" => Ok(OptimizerKind::Pso),
            "ga" => Ok(OptimizerKind::Ga),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub design: DesignVector,
    pub breakdown: ObjectiveBreakdown,
    pub lr: Option<f64>,
    /// Cumulative calls after this iteration.
    pub calls: CallCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    pub best_design: DesignVector,
    pub best: ObjectiveBreakdown,
    pub normalization: [f64; NUM_TERMS],
    pub calls: CallCounts,
    /// The start design had to be clipped into the bounds.
    pub clipped_start: bool,
    /// Reason the run stopped early on a numerical failure.
    pub aborted: Option<String>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl OptTrace {
    /// CSV with one row per iteration.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = vec!["iteration".into()];
        header.extend(crate::cure_cycle::DESIGN_VAR_NAMES.iter().map(|s| s.to_string()));
        header.extend(
            [
                "L1", "L2", "L3", "L4", "total", "lr", "calls_forward", "calls_backward", "calls_total",
                "min_end_alpha", "max_end_alpha", "mean_end_alpha", "mean_axial_gradient",
                "max_temperature_c", "mean_thermal_lag_c",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.iteration.to_string()];
            rec.extend(r.design.to_array().iter().map(|v| v.to_string()));
            let m = &r.breakdown.metrics;
            rec.extend(r.breakdown.terms.iter().map(|v| v.to_string()));
            rec.push(r.breakdown.total.to_string());
            rec.push(r.lr.map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.calls.forward.to_string());
            rec.push(r.calls.backward.to_string());
            rec.push(r.calls.total().to_string());
            for v in [
                m.min_end_alpha,
                m.max_end_alpha,
                m.mean_end_alpha,
                m.mean_axial_gradient,
                m.max_temperature_c,
                m.mean_thermal_lag_c,
            ] {
                rec.push(v.to_string());
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Adam/NAdam settings with the plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientConfig {
    pub iterations: usize,
    pub lr: f64,
    pub patience: usize,
    pub reduction: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once the normalised total drops below this.
    pub tolerance: f64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        GradientConfig {
            iterations: 180,
            lr: 0.01,
            patience: 10,
            reduction: 0.5,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tolerance: 1e-6,
        }
    }
}

fn half_ranges(b: &DesignBounds) -> [f64; NUM_DESIGN_VARS] {
    let mut h = [0.0; NUM_DESIGN_VARS];
    for i in 0..NUM_DESIGN_VARS {
        h[i] = 0.5 * (b.upper[i] - b.lower[i]);
    }
    h
}

fn clip_start(u0: &DesignVector, b: &DesignBounds) -> (DesignVector, bool) {
    let clipped = clip_design(u0, b);
    let changed = clipped != *u0;
    (clipped, changed)
}

/// Adam (or NAdam with `nesterov`) on the normalised design coordinates,
/// projecting back into the bounds after every update.
pub fn optimize_gradient(
    s: &dyn Surrogate,
    u0: &DesignVector,
    cfg: &GradientConfig,
    nesterov: bool,
) -> Result<OptTrace> {
    let start = Instant::now();
    let bounds = s.bounds();
    let half = half_ranges(bounds);
    let (mut u, clipped_start) = clip_start(u0, bounds);
    let mut x = normalize_design(&u, bounds);
    let mut m = [0.0; NUM_DESIGN_VARS];
    let mut v = [0.0; NUM_DESIGN_VARS];
    let mut lr = cfg.lr;
    let mut calls = CallCounts::default();
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut norm: Option<[f64; NUM_TERMS]> = None;
    let mut best: Option<(DesignVector, ObjectiveBreakdown)> = None;
    let mut plateau_best = f64::INFINITY;
    let mut stale = 0;
    let mut aborted = None;

    for it in 0..cfg.iterations {
        let (e, gu) = s.evaluate_with_gradient(&u, norm.as_ref())?;
        calls.forward += 1;
        calls.backward += 2;
        let n = *norm.get_or_insert_with(|| normalization_from(&e.terms));
        let bd = ObjectiveBreakdown::new(e.terms, n, e.metrics);
        rows.push(TraceRow {
            iteration: it,
            design: u,
            breakdown: bd,
            lr: Some(lr),
            calls,
        });
        if best.as_ref().map_or(true, |(_, b)| bd.total < b.total) {
            best = Some((u, bd));
        }
        if bd.total < cfg.tolerance {
            break;
        }
        let g: Vec<f64> = (0..NUM_DESIGN_VARS).map(|i| gu[i] * half[i]).collect();
        if g.iter().any(|v| !v.is_finite()) {
            aborted = Some(Error::NonFiniteGradient { iteration: it }.to_string());
            break;
        }
        let t = (it + 1) as i32;
        for i in 0..NUM_DESIGN_VARS {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let v_hat = v[i] / (1.0 - cfg.beta2.powi(t));
            let m_hat = if nesterov {
                cfg.beta1 * m[i] / (1.0 - cfg.beta1.powi(t + 1)) + (1.0 - cfg.beta1) * g[i] / (1.0 - cfg.beta1.powi(t))
            } else {
                m[i] / (1.0 - cfg.beta1.powi(t))
            };
            x[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        u = clip_design(&denormalize_design(&x, bounds), bounds);
        x = normalize_design(&u, bounds);

        // plateau schedule
        if bd.total < plateau_best {
            plateau_best = bd.total;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr = (lr * cfg.reduction).max(cfg.min_lr);
                stale = 0;
            }
        }
    }
    let (best_design, best) = best.ok_or_else(|| Error::Config("optimizer ran zero iterations".into()))?;
    Ok(OptTrace {
        optimizer: if nesterov { OptimizerKind::Nadam } else { OptimizerKind::Adam },
        seed: 0,
        rows,
        best_design,
        best,
        normalization: norm.unwrap_or([1.0; NUM_TERMS]),
        calls,
        clipped_start,
        aborted,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

pub fn optimize_adam(s: &dyn Surrogate, u0: &DesignVector, cfg: &GradientConfig) -> Result<OptTrace> {
    optimize_gradient(s, u0, cfg, false)
}

pub fn optimize_nadam(s: &dyn Surrogate, u0: &DesignVector, cfg: &GradientConfig) -> Result<OptTrace> {
    optimize_gradient(s, u0, cfg, true)
}

/// Evaluates designs, in parallel when `jobs > 1`; results keep input order.
fn evaluate_all(s: &dyn Surrogate, designs: &[DesignVector], jobs: usize) -> Result<Vec<Evaluation>> {
    if jobs <= 1 || designs.len() < 2 {
        return designs.iter().map(|u| s.evaluate(u)).collect();
    }
    let chunk = designs.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<Evaluation>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = designs
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|u| s.evaluate(u)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(designs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn random_point(rng: &mut ChaCha8Rng, b: &DesignBounds) -> [f64; NUM_DESIGN_VARS] {
    let mut x = [0.0; NUM_DESIGN_VARS];
    for (i, v) in x.iter_mut().enumerate() {
        if !b.is_frozen(i) {
            *v = rng.gen_range(-1.0..=1.0);
        }
    }
    x
}

fn clip_unit(x: &mut [f64; NUM_DESIGN_VARS], b: &DesignBounds) {
    for (i, v) in x.iter_mut().enumerate() {
        *v = if b.is_frozen(i) { 0.0 } else { v.clamp(-1.0, 1.0) };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            particles: 20,
            iterations: 25,
            inertia: 0.9,
            cognitive: 0.5,
            social: 0.3,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Global-best particle swarm on the normalised coordinates; velocities
/// start at zero. `initial` overrides the random initial positions.
pub fn optimize_pso(s: &dyn Surrogate, cfg: &PsoConfig, initial: Option<&[DesignVector]>) -> Result<OptTrace> {
    let start = Instant::now();
    let b = s.bounds().clone();
    if cfg.particles == 0 || cfg.iterations == 0 {
        return Err(Error::Config("PSO needs at least one particle and one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pos: Vec<[f64; NUM_DESIGN_VARS]> = match initial {
        Some(us) if us.len() == cfg.particles => us.iter().map(|u| normalize_design(&clip_design(u, &b), &b)).collect(),
        Some(us) => {
            return Err(Error::Config(format!("{} initial positions for {} particles", us.len(), cfg.particles)))
        }
        None => (0..cfg.particles).map(|_| random_point(&mut rng, &b)).collect(),
    };
    let mut vel = vec![[0.0; NUM_DESIGN_VARS]; cfg.particles];
    let mut pbest: Vec<([f64; NUM_DESIGN_VARS], f64)> = vec![([0.0; NUM_DESIGN_VARS], f64::INFINITY); cfg.particles];
    let mut gbest: Option<(DesignVector, ObjectiveBreakdown, [f64; NUM_DESIGN_VARS])> = None;
    let mut norm: Option<[f64; NUM_TERMS]> = None;
    let mut calls = CallCounts::default();
    let mut rows = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let designs: Vec<DesignVector> = pos.iter().map(|x| denormalize_design(x, &b)).collect();
        let evals = evaluate_all(s, &designs, cfg.jobs)?;
        calls.forward += cfg.particles as u64;
        calls.backward += cfg.particles as u64;
        let n = *norm.get_or_insert_with(|| normalization_from(&evals[0].terms));
        for (p, e) in evals.iter().enumerate() {
            let bd = ObjectiveBreakdown::new(e.terms, n, e.metrics);
            if bd.total < pbest[p].1 {
                pbest[p] = (pos[p], bd.total);
            }
            if gbest.as_ref().map_or(true, |g| bd.total < g.1.total) {
                gbest = Some((designs[p], bd, pos[p]));
            }
        }
        let (gd, gb, gx) = gbest.expect("at least one particle");
        rows.push(TraceRow {
            iteration: it,
            design: gd,
            breakdown: gb,
            lr: None,
            calls,
        });
        for p in 0..cfg.particles {
            for i in 0..NUM_DESIGN_VARS {
                let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                vel[p][i] = cfg.inertia * vel[p][i]
                    + cfg.cognitive * r1 * (pbest[p].0[i] - pos[p][i])
                    + cfg.social * r2 * (gx[i] - pos[p][i]);
                pos[p][i] += vel[p][i];
            }
            clip_unit(&mut pos[p], &b);
        }
    }
    let (best_design, best, _) = gbest.expect("at least one iteration");
    Ok(OptTrace {
        optimizer: OptimizerKind::Pso,
        seed: cfg.seed,
        rows,
        best_design,
        best,
        normalization: norm.unwrap_or([1.0; NUM_TERMS]),
        calls,
        clipped_start: false,
        aborted: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub elitism: f64,
    pub mutation: f64,
    pub crossover: f64,
    /// Fraction of the ranked population eligible as parents.
    pub parents: f64,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 100,
            generations: 100,
            elitism: 0.01,
            mutation: 0.1,
            crossover: 0.5,
            parents: 0.3,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Real-coded genetic algorithm: elitism, truncation selection, uniform
/// crossover and uniform-reset mutation on the normalised coordinates.
pub fn optimize_ga(s: &dyn Surrogate, cfg: &GaConfig, initial: Option<&[DesignVector]>) -> Result<OptTrace> {
    let start = Instant::now();
    let b = s.bounds().clone();
    let p = cfg.population;
    if p == 0 || cfg.generations == 0 {
        return Err(Error::Config("GA needs a population and at least one generation".into()));
    }
    for (name, v) in [("elitism", cfg.elitism), ("mutation", cfg.mutation), ("crossover", cfg.crossover), ("parents", cfg.parents)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("GA {name} {v} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop: Vec<[f64; NUM_DESIGN_VARS]> = match initial {
        Some(us) if us.len() == p => us.iter().map(|u| normalize_design(&clip_design(u, &b), &b)).collect(),
        Some(us) => return Err(Error::Config(format!("{} initial individuals for population {p}", us.len()))),
        None => (0..p).map(|_| random_point(&mut rng, &b)).collect(),
    };
    let n_elite = ((cfg.elitism * p as f64).ceil() as usize).min(p);
    let n_parents = ((cfg.parents * p as f64).ceil() as usize).clamp(1, p);
    let mut norm: Option<[f64; NUM_TERMS]> = None;
    let mut calls = CallCounts::default();
    let mut rows = Vec::with_capacity(cfg.generations);
    let mut best: Option<(DesignVector, ObjectiveBreakdown)> = None;

    for gen in 0..cfg.generations {
        let designs: Vec<DesignVector> = pop.iter().map(|x| denormalize_design(x, &b)).collect();
        let evals = evaluate_all(s, &designs, cfg.jobs)?;
        calls.forward += p as u64;
        calls.backward += p as u64;
        let n = *norm.get_or_insert_with(|| normalization_from(&evals[0].terms));
        let scored: Vec<ObjectiveBreakdown> = evals.iter().map(|e| ObjectiveBreakdown::new(e.terms, n, e.metrics)).collect();
        let mut rank: Vec<usize> = (0..p).collect();
        rank.sort_by(|&a, &c| scored[a].total.total_cmp(&scored[c].total).then(a.cmp(&c)));
        let top = rank[0];
        if best.as_ref().map_or(true, |(_, bd)| scored[top].total < bd.total) {
            best = Some((designs[top], scored[top]));
        }
        let (bd_u, bd) = best.expect("population is not empty");
        rows.push(TraceRow {
            iteration: gen,
            design: bd_u,
            breakdown: bd,
            lr: None,
            calls,
        });

        let mut next: Vec<[f64; NUM_DESIGN_VARS]> = rank[..n_elite].iter().map(|&i| pop[i]).collect();
        while next.len() < p {
            let a = pop[rank[rng.gen_range(0..n_parents)]];
            let c = pop[rank[rng.gen_range(0..n_parents)]];
            let mut child = a;
            if rng.gen::<f64>() < cfg.crossover {
                for i in 0..NUM_DESIGN_VARS {
                    if rng.gen::<bool>() {
                        child[i] = c[i];
                    }
                }
            }
            for (i, v) in child.iter_mut().enumerate() {
                if rng.gen::<f64>() < cfg.mutation {
                    *v = rng.gen_range(-1.0..=1.0);
                }
                if b.is_frozen(i) {
                    *v = 0.0;
                }
            }
            clip_unit(&mut child, &b);
            next.push(child);
        }
        pop = next;
    }
    let (best_design, best) = best.expect("at least one generation");
    Ok(OptTrace {
        optimizer: OptimizerKind::Ga,
        seed: cfg.seed,
        rows,
        best_design,
        best,
        normalization: norm.unwrap_or([1.0; NUM_TERMS]),
        calls,
        clipped_start: false,
        aborted: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
