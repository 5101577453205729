//! Residuals and losses.
//!
//! Training residuals are nondimensional: the temperature equations are
//! multiplied by `t_obj / ΔT` and the cure equation by `t_obj`, where `ΔT`
//! is the temperature scaler. The point-evaluation functions return the
//! same residuals in physical units (°C/s and 1/s).

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{BoundOnet, OutputScaler, PidonModel, SurrogateProblem, Variable};
use crate::cure_cycle::{air_temperature_at_fraction, DesignVector, NUM_DESIGN_VARS};
use crate::error::{Error, Result};
use crate::material::{cure_rate_unchecked, KELVIN_OFFSET};
use crate::nn::{Tape, Tensor, Var};

/// Maps between physical time/space of one design and the `[-1, 1]²`
/// coordinates of one subdomain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    /// End of the second hold (s).
    pub t_obj: f64,
    pub span: (f64, f64),
    /// Layer thickness (m).
    pub thickness: f64,
}

impl LocalFrame {
    pub fn new(t_obj: f64, span: (f64, f64), thickness: f64) -> Result<Self> {
        if !(t_obj > 0.0) || !(thickness > 0.0) || !(span.0 < span.1) {
            return Err(Error::Domain(format!(
                "degenerate frame: t_obj {t_obj}, span {span:?}, thickness {thickness}"
            )));
        }
        Ok(LocalFrame {
            t_obj,
            span,
            thickness,
        })
    }

    pub fn width(&self) -> f64 {
        self.span.1 - self.span.0
    }

    pub fn tau_hat(&self, t: f64) -> f64 {
        2.0 * (t / self.t_obj - self.span.0) / self.width() - 1.0
    }

    pub fn time(&self, tau_hat: f64) -> f64 {
        self.t_obj * (self.span.0 + 0.5 * (tau_hat + 1.0) * self.width())
    }

    /// `ẑ` of a position `z` (m) measured from the layer's lower face.
    pub fn z_hat(&self, z: f64) -> f64 {
        2.0 * z / self.thickness - 1.0
    }

    pub fn z(&self, z_hat: f64) -> f64 {
        0.5 * (z_hat + 1.0) * self.thickness
    }

    /// `dt/dτ̂` (s).
    pub fn time_scale(&self) -> f64 {
        0.5 * self.t_obj * self.width()
    }

    /// `dz/dẑ` (m).
    pub fn space_scale(&self) -> f64 {
        0.5 * self.thickness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ic: f64,
    pub bc: f64,
    pub phys: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ic: 10.0,
            bc: 1.0,
            phys: 1.0,
        }
    }
}

/// Loss terms of one evaluation. `ic` and `phys` are indexed by
/// [`Variable::index`]; `bc` holds bottom Robin, top Robin, interface
/// temperature and interface flux.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ic: [f64; 3],
    pub bc: [f64; 4],
    pub phys: [f64; 3],
}

impl LossComponents {
    pub fn ic_sum(&self) -> f64 {
        self.ic.iter().sum()
    }

    pub fn bc_sum(&self) -> f64 {
        self.bc.iter().sum()
    }

    pub fn phys_sum(&self) -> f64 {
        self.phys.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ic.iter().chain(&self.bc).chain(&self.phys).all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &LossComponents, w: f64) {
        self.total += w * other.total;
        for (a, b) in self.ic.iter_mut().zip(&other.ic) {
            *a += w * b;
        }
        for (a, b) in self.bc.iter_mut().zip(&other.bc) {
            *a += w * b;
        }
        for (a, b) in self.phys.iter_mut().zip(&other.phys) {
            *a += w * b;
        }
    }
}

/// Point residual of the tool heat equation (°C/s) at `(τ, x)`, `x ∈ [0, 1]`
/// across the tool.
pub fn residual_tool(model: &PidonModel, u: &DesignVector, tau: f64, x: f64) -> Result<f64> {
    let frame = point_frame(model, u, tau, model_thickness(model, u, Variable::ToolTemperature))?;
    let j = model.evaluate_jets(u, Variable::ToolTemperature, &[(tau, x)], &[0, 1], Some(2))?;
    let s = OutputScaler::TEMPERATURE.scale;
    Ok(s * (j[1][0] / frame.time_scale() - model.problem.card.a_t * j[3][0] / frame.space_scale().powi(2)))
}

/// Point residual of the part heat equation with the exothermic source (°C/s).
pub fn residual_part(model: &PidonModel, u: &DesignVector, tau: f64, x: f64) -> Result<f64> {
    let card = &model.problem.card;
    let frame = point_frame(model, u, tau, model.problem.part_thickness)?;
    let t = model.evaluate_jets(u, Variable::PartTemperature, &[(tau, x)], &[0, 1], Some(2))?;
    let a = model.evaluate(u, Variable::DegreeOfCure, &[(tau, x)])?;
    let rate = cure_rate_unchecked(a[0], t[0][0] + KELVIN_OFFSET, &card.kinetics);
    let s = OutputScaler::TEMPERATURE.scale;
    Ok(s * (t[1][0] / frame.time_scale() - card.a_c * t[3][0] / frame.space_scale().powi(2)) - card.b_c * rate)
}

/// Point residual of the cure-rate equation (1/s).
pub fn residual_doc(model: &PidonModel, u: &DesignVector, tau: f64, x: f64) -> Result<f64> {
    let frame = point_frame(model, u, tau, model.problem.part_thickness)?;
    let a = model.evaluate_jets(u, Variable::DegreeOfCure, &[(tau, x)], &[0], None)?;
    let t = model.evaluate(u, Variable::PartTemperature, &[(tau, x)])?;
    let rate = cure_rate_unchecked(a[0][0], t[0] + KELVIN_OFFSET, &model.problem.card.kinetics);
    Ok(OutputScaler::DOC.scale * a[1][0] / frame.time_scale() - rate)
}

fn model_thickness(model: &PidonModel, u: &DesignVector, v: Variable) -> f64 {
    if v.on_tool() {
        u.tool_thickness_m()
    } else {
        model.problem.part_thickness
    }
}

fn point_frame(model: &PidonModel, u: &DesignVector, tau: f64, thickness: f64) -> Result<LocalFrame> {
    let k = model
        .subdomain_index(tau)
        .ok_or_else(|| Error::Domain(format!("normalised time {tau} outside [0, 1]")))?;
    LocalFrame::new(model.objective_time(u), model.subdomains[k].span, thickness)
}

/// Per-design constants of a training set.
pub(crate) struct Context {
    pub problem: SurrogateProblem,
    pub designs: Vec<DesignVector>,
    pub t_obj: Vec<f64>,
    /// `N × 9` normalised designs.
    pub table: Tensor,
}

impl Context {
    pub fn new(problem: &SurrogateProblem, designs: &[DesignVector]) -> Result<Self> {
        let mut table = Vec::with_capacity(designs.len() * NUM_DESIGN_VARS);
        let mut t_obj = Vec::with_capacity(designs.len());
        for u in designs {
            if !problem.bounds.contains(u) {
                return Err(Error::InvalidDesign(format!("training design {u} outside the bounds")));
            }
            table.extend(crate::cure_cycle::normalize_design(u, &problem.bounds));
            t_obj.push(crate::cure_cycle::objective_time_with_grad(u, problem.initial_temp_c).0);
        }
        Ok(Context {
            problem: problem.clone(),
            designs: designs.to_vec(),
            t_obj,
            table: Tensor::new(designs.len(), NUM_DESIGN_VARS, table),
        })
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }
}

/// Collocation and boundary points of one step, with the per-point
/// coefficients of the nondimensional residuals.
pub(crate) struct Batch {
    phys_index: Rc<[usize]>,
    phys_tool: Vec<f64>,
    phys_part: Vec<f64>,
    diff_tool: Rc<[f64]>,
    diff_part: Rc<[f64]>,
    source: Rc<[f64]>,
    t_obj: Rc<[f64]>,
    bc_index: Rc<[usize]>,
    /// `(τ̂, -1)` for every boundary point, then `(τ̂, +1)`.
    bc_coords: Vec<f64>,
    air: Vec<f64>,
    neg_air: Vec<f64>,
    robin_bottom: Rc<[f64]>,
    robin_top: Rc<[f64]>,
    flux_ratio: Rc<[f64]>,
}

impl Batch {
    pub fn sample(ctx: &Context, span: (f64, f64), collocation: usize, boundary: usize, rng: &mut impl Rng) -> Self {
        let card = &ctx.problem.card;
        let l_c = ctx.problem.part_thickness;
        let temp = OutputScaler::TEMPERATURE;
        let mut phys_index = Vec::with_capacity(collocation);
        let mut phys_tool = Vec::with_capacity(2 * collocation);
        let mut phys_part = Vec::with_capacity(2 * collocation);
        let mut diff_tool = Vec::with_capacity(collocation);
        let mut diff_part = Vec::with_capacity(collocation);
        let mut source = Vec::with_capacity(collocation);
        let mut t_obj = Vec::with_capacity(collocation);
        for _ in 0..collocation {
            let d = rng.gen_range(0..ctx.len());
            let tau_hat = 2.0 * rng.gen::<f64>() - 1.0;
            let z_tool = 2.0 * rng.gen::<f64>() - 1.0;
            let z_part = 2.0 * rng.gen::<f64>() - 1.0;
            let to = ctx.t_obj[d];
            let l_t = ctx.designs[d].tool_thickness_m();
            phys_index.push(d);
            phys_tool.extend([tau_hat, z_tool]);
            phys_part.extend([tau_hat, z_part]);
            diff_tool.push(card.a_t * to * (2.0 / l_t).powi(2));
            diff_part.push(card.a_c * to * (2.0 / l_c).powi(2));
            source.push(card.b_c * to / temp.scale);
            t_obj.push(to);
        }

        let mut bc_index = Vec::with_capacity(2 * boundary);
        let mut taus = Vec::with_capacity(boundary);
        let mut air = Vec::with_capacity(boundary);
        let mut robin_bottom = Vec::with_capacity(boundary);
        let mut robin_top = Vec::with_capacity(boundary);
        let mut flux_ratio = Vec::with_capacity(boundary);
        for _ in 0..boundary {
            let d = rng.gen_range(0..ctx.len());
            let tau_hat = 2.0 * rng.gen::<f64>() - 1.0;
            let u = &ctx.designs[d];
            let l_t = u.tool_thickness_m();
            let tau = (span.0 + 0.5 * (tau_hat + 1.0) * (span.1 - span.0)).clamp(0.0, 1.0);
            let ta = air_temperature_at_fraction(u, tau, ctx.problem.initial_temp_c).0;
            bc_index.push(d);
            taus.push(tau_hat);
            air.push(temp.to_network(ta));
            robin_bottom.push(card.k_t / u.h_bot * 2.0 / l_t);
            robin_top.push(card.k_c / u.h_top * 2.0 / l_c);
            flux_ratio.push(card.k_t * l_c / (card.k_c * l_t));
        }
        let bc_index: Vec<usize> = bc_index.iter().chain(bc_index.iter()).copied().collect();
        let mut bc_coords = Vec::with_capacity(4 * boundary);
        for z in [-1.0, 1.0] {
            for &t in &taus {
                bc_coords.extend([t, z]);
            }
        }
        Batch {
            phys_index: phys_index.into(),
            phys_tool,
            phys_part,
            diff_tool: diff_tool.into(),
            diff_part: diff_part.into(),
            source: source.into(),
            t_obj: t_obj.into(),
            bc_index: bc_index.into(),
            bc_coords,
            neg_air: air.iter().map(|v| -v).collect(),
            air,
            robin_bottom: robin_bottom.into(),
            robin_top: robin_top.into(),
            flux_ratio: flux_ratio.into(),
        }
    }
}

/// Initial-condition targets of a subdomain in network units, on a shared
/// grid of local coordinates; `values[v][d·n + j]` is design `d`, point `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct IcTargets {
    pub z_hat: Vec<f64>,
    pub values: [Vec<f64>; 3],
}

pub(crate) struct IcBatch {
    index: Rc<[usize]>,
    coords: Vec<f64>,
    neg_targets: [Vec<f64>; 3],
}

impl IcBatch {
    pub fn new(ic: &IcTargets, designs: usize) -> Result<Self> {
        let n = ic.z_hat.len();
        if ic.values.iter().any(|v| v.len() != designs * n) {
            return Err(Error::Shape(format!(
                "initial-condition targets do not cover {designs} designs × {n} points"
            )));
        }
        let index: Vec<usize> = (0..designs).flat_map(|d| std::iter::repeat(d).take(n)).collect();
        let coords: Vec<f64> = (0..designs).flat_map(|_| ic.z_hat.iter().flat_map(|&z| [-1.0, z])).collect();
        Ok(IcBatch {
            index: index.into(),
            coords,
            neg_targets: ic.values.clone().map(|v| v.iter().map(|x| -x).collect()),
        })
    }
}

pub(crate) struct LossVars {
    pub total: Var,
    pub ic: [Var; 3],
    pub bc: [Var; 4],
    pub phys: [Var; 3],
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        let v = |x: Var| tape.value(x).item();
        LossComponents {
            total: v(self.total),
            ic: self.ic.map(v),
            bc: self.bc.map(v),
            phys: self.phys.map(v),
        }
    }
}

/// Records every loss term of one subdomain step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_losses(
    tape: &mut Tape,
    nets: &[BoundOnet; 3],
    designs: Var,
    span: (f64, f64),
    ctx: &Context,
    batch: &Batch,
    ic: &IcBatch,
    weights: &LossWeights,
) -> LossVars {
    let kinetics = &ctx.problem.card.kinetics;
    let temp = OutputScaler::TEMPERATURE;
    let doc = OutputScaler::DOC;
    let time_coef = 2.0 / (span.1 - span.0);
    let tables: Vec<Var> = nets.iter().map(|n| n.table(tape, designs)).collect();
    let [tc, tt, al] = [0usize, 1, 2];

    // physics
    let n = batch.phys_index.len();
    let (tool, _) = nets[tt].record(tape, tables[tt], batch.phys_index.clone(), &batch.phys_tool, &[0, 1], Some(2));
    let (part, _) = nets[tc].record(tape, tables[tc], batch.phys_index.clone(), &batch.phys_part, &[0, 1], Some(2));
    let (cure, _) = nets[al].record(tape, tables[al], batch.phys_index.clone(), &batch.phys_part, &[0], None);

    let tool_t = tape.channel(tool, 1, n);
    let tool_zz = tape.channel(tool, 3, n);
    let a = tape.scale(tool_t, time_coef);
    let b = tape.mul_const(tool_zz, batch.diff_tool.clone());
    let r_tool = tape.sub(a, b);

    let part_v = tape.channel(part, 0, n);
    let part_t = tape.channel(part, 1, n);
    let part_zz = tape.channel(part, 3, n);
    let cure_v = tape.channel(cure, 0, n);
    let cure_t = tape.channel(cure, 1, n);
    let alpha = {
        let s = tape.scale(cure_v, doc.scale);
        tape.offset(s, doc.offset)
    };
    let kelvin = {
        let s = tape.scale(part_v, temp.scale);
        tape.offset(s, temp.offset + KELVIN_OFFSET)
    };
    let rate = tape.cure_rate(alpha, kelvin, kinetics);

    let a = tape.scale(part_t, time_coef);
    let b = tape.mul_const(part_zz, batch.diff_part.clone());
    let c = tape.mul_const(rate, batch.source.clone());
    let ab = tape.sub(a, b);
    let r_part = tape.sub(ab, c);

    let a = tape.scale(cure_t, doc.scale * time_coef);
    let b = tape.mul_const(rate, batch.t_obj.clone());
    let r_cure = tape.sub(a, b);

    let mut phys = [r_part, r_tool, r_cure];
    for p in &mut phys {
        *p = tape.mean_square(*p);
    }

    // boundary and interface
    let m = batch.air.len();
    let (tool_b, _) = nets[tt].record(tape, tables[tt], batch.bc_index.clone(), &batch.bc_coords, &[1], None);
    let (part_b, _) = nets[tc].record(tape, tables[tc], batch.bc_index.clone(), &batch.bc_coords, &[1], None);
    let tool_bot_v = tape.rows(tool_b, 0, m);
    let tool_top_v = tape.rows(tool_b, m, m);
    let tool_bot_z = tape.rows(tool_b, 2 * m, m);
    let tool_top_z = tape.rows(tool_b, 3 * m, m);
    let part_bot_v = tape.rows(part_b, 0, m);
    let part_top_v = tape.rows(part_b, m, m);
    let part_bot_z = tape.rows(part_b, 2 * m, m);
    let part_top_z = tape.rows(part_b, 3 * m, m);

    // (T - T_a) - (k/h) ∂T/∂z at the tool's lower face
    let a = tape.add_const(tool_bot_v, &batch.neg_air);
    let b = tape.mul_const(tool_bot_z, batch.robin_bottom.clone());
    let bottom = tape.sub(a, b);
    // (T_a - T) - (k/h) ∂T/∂z at the part's upper face
    let neg = tape.scale(part_top_v, -1.0);
    let a = tape.add_const(neg, &batch.air);
    let b = tape.mul_const(part_top_z, batch.robin_top.clone());
    let top = tape.sub(a, b);
    let iface = tape.sub(tool_top_v, part_bot_v);
    let a = tape.mul_const(tool_top_z, batch.flux_ratio.clone());
    let flux = tape.sub(a, part_bot_z);
    let bc = [bottom, top, iface, flux].map(|r| tape.mean_square(r));

    // initial condition
    let mut ic_terms = [phys[0]; 3];
    for v in 0..3 {
        let (out, _) = nets[v].record(tape, tables[v], ic.index.clone(), &ic.coords, &[], None);
        let diff = tape.add_const(out, &ic.neg_targets[v]);
        ic_terms[v] = tape.mean_square(diff);
    }

    let sum = |tape: &mut Tape, xs: &[Var]| {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = tape.add(acc, x);
        }
        acc
    };
    let ic_sum = sum(tape, &ic_terms);
    let bc_sum = sum(tape, &bc);
    let phys_sum = sum(tape, &phys);
    let a = tape.scale(ic_sum, weights.ic);
    let b = tape.scale(bc_sum, weights.bc);
    let c = tape.scale(phys_sum, weights.phys);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    LossVars {
        total,
        ic: ic_terms,
        bc,
        phys,
    }
}
