//! Finite-difference reference solver for the coupled tool/part slab.
//!
//! The tool occupies `z ∈ [0, L_t]` with convection to the autoclave air at
//! `z = 0` (coefficient `h_bot`); the part occupies `z ∈ [L_t, L_t + L_c]`
//! with convection at the top (coefficient `h_top`). Both layers share the
//! interface node. Conduction is integrated with Crank–Nicolson on a
//! vertex-centred finite-volume grid (half cells at the boundaries and on each
//! side of the interface); cure kinetics are advanced explicitly before each
//! conduction step and enter as a heat source.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cure_cycle::{build_cycle, CureCycle, CycleOptions, DesignVector};
use crate::error::{Error, Result};
use crate::material::{celsius_to_kelvin, cure_rate_unchecked, KineticsConstants, MaterialCard};

/// Node layout of the two-layer slab (lengths in metres).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub tool_thickness: f64,
    pub part_thickness: f64,
    pub n_z_tool: usize,
    pub n_z_part: usize,
}

impl Geometry {
    pub fn new(
        tool_thickness: f64,
        part_thickness: f64,
        n_z_tool: usize,
        n_z_part: usize,
    ) -> Result<Self> {
        if !(tool_thickness > 0.0 && part_thickness > 0.0) {
            return Err(Error::Config(format!(
                "layer thicknesses must be positive (tool {tool_thickness}, part {part_thickness})"
            )));
        }
        if n_z_tool < 3 || n_z_part < 3 {
            return Err(Error::Config(format!(
                "each layer needs at least 3 nodes (tool {n_z_tool}, part {n_z_part})"
            )));
        }
        Ok(Geometry {
            tool_thickness,
            part_thickness,
            n_z_tool,
            n_z_part,
        })
    }

    /// Nodes placed as close as possible to the nominal spacing `dz` (m).
    pub fn with_spacing(tool_thickness: f64, part_thickness: f64, dz: f64) -> Result<Self> {
        if !(dz > 0.0) {
            return Err(Error::Config(format!("node spacing must be positive, got {dz}")));
        }
        let count = |l: f64| ((l / dz).round() as usize + 1).max(3);
        Geometry::new(tool_thickness, part_thickness, count(tool_thickness), count(part_thickness))
    }

    pub fn tool_spacing(&self) -> f64 {
        self.tool_thickness / (self.n_z_tool - 1) as f64
    }

    pub fn part_spacing(&self) -> f64 {
        self.part_thickness / (self.n_z_part - 1) as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.n_z_tool + self.n_z_part - 1
    }

    /// Index of the node shared by both layers.
    pub fn interface_index(&self) -> usize {
        self.n_z_tool - 1
    }

    pub fn total_thickness(&self) -> f64 {
        self.tool_thickness + self.part_thickness
    }

    pub fn z_nodes(&self) -> Vec<f64> {
        let (ht, hc) = (self.tool_spacing(), self.part_spacing());
        let mut z: Vec<f64> = (0..self.n_z_tool).map(|i| i as f64 * ht).collect();
        z[self.n_z_tool - 1] = self.tool_thickness;
        for j in 1..self.n_z_part {
            z.push(self.tool_thickness + j as f64 * hc);
        }
        *z.last_mut().unwrap() = self.total_thickness();
        z
    }

    /// Local coordinate in `[0, 1]` of the tool (`x1`) for a global position.
    pub fn tool_local(&self, z: f64) -> f64 {
        z / self.tool_thickness
    }

    /// Local coordinate in `[0, 1]` of the part (`x2`) for a global position.
    pub fn part_local(&self, z: f64) -> f64 {
        (z - self.tool_thickness) / self.part_thickness
    }
}

/// Where the integration stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// End of the second hold.
    Objective,
    /// End of the cooldown.
    CycleEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    /// Nominal time step (s); steps are shrunk so every cycle breakpoint is a grid time.
    pub dt: f64,
    /// Nominal node spacing (m).
    pub dz: f64,
    /// Part thickness (m).
    pub part_thickness: f64,
    pub alpha_initial: f64,
    pub initial_temp_c: f64,
    pub cooldown_rate: f64,
    /// Largest degree-of-cure increment per kinetics sub-step.
    pub max_dalpha: f64,
    pub horizon: Horizon,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1.0,
            dz: 0.002,
            part_thickness: 0.020,
            alpha_initial: 0.05,
            initial_temp_c: 20.0,
            cooldown_rate: 2.0,
            max_dalpha: 0.005,
            horizon: Horizon::Objective,
        }
    }
}

impl SimOptions {
    pub fn cycle_options(&self) -> CycleOptions {
        CycleOptions {
            initial_temp_c: self.initial_temp_c,
            cooldown_rate: self.cooldown_rate,
        }
    }

    pub fn geometry_for(&self, u: &DesignVector) -> Result<Geometry> {
        Geometry::with_spacing(u.tool_thickness_m(), self.part_thickness, self.dz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMeta {
    pub design: Option<DesignVector>,
    pub material_name: String,
    pub material_hash: String,
    pub geometry: Geometry,
    pub dt: f64,
    pub steps: usize,
    pub kinetics_substeps: usize,
    pub alpha_initial: f64,
    pub initial_temp_c: f64,
    pub max_dalpha: f64,
    /// End of the second hold (s), when a cure cycle drove the run.
    pub t_obj: Option<f64>,
    /// Largest interface energy-balance residual relative to the boundary flux scale.
    pub interface_residual: f64,
}

/// Recorded fields. `temperature` is row-major `[time][node]` in Kelvin over
/// all nodes; `alpha` is `[time][part node]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub times: Vec<f64>,
    pub z_nodes: Vec<f64>,
    pub temperature: Vec<f64>,
    pub alpha: Vec<f64>,
    pub meta: SimMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Tool,
    Part,
}

/// Boundary air temperatures and an optional volumetric source for
/// conduction-only runs. The source is in K/s (heating rate of the local
/// material) and is evaluated per layer so it may jump at the interface.
pub struct Forcing<'a> {
    pub air_bottom: &'a dyn Fn(f64) -> f64,
    pub air_top: &'a dyn Fn(f64) -> f64,
    pub source: Option<&'a dyn Fn(Layer, f64, f64) -> f64>,
    pub initial_temperature: &'a dyn Fn(f64) -> f64,
    pub t_final: f64,
    /// Times that must fall on the step grid.
    pub breakpoints: Vec<f64>,
}

/// Convection coefficients and layer properties for one run.
#[derive(Debug, Clone, Copy)]
pub struct SlabProperties {
    pub k_t: f64,
    pub a_t: f64,
    pub k_c: f64,
    pub a_c: f64,
    pub b_c: f64,
    pub h_top: f64,
    pub h_bot: f64,
}

impl SlabProperties {
    pub fn new(card: &MaterialCard, h_top: f64, h_bot: f64) -> Self {
        SlabProperties {
            k_t: card.k_t,
            a_t: card.a_t,
            k_c: card.k_c,
            a_c: card.a_c,
            b_c: card.b_c,
            h_top,
            h_bot,
        }
    }
}

/// Step grid covering `[0, t_final]` with every breakpoint as a grid time.
pub fn step_times(t_final: f64, breakpoints: &[f64], dt: f64) -> Vec<f64> {
    let mut marks: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&b| b > 0.0 && b < t_final)
        .collect();
    marks.push(t_final);
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut times = vec![0.0];
    let mut start = 0.0;
    for &end in &marks {
        let span = end - start;
        if span <= 1e-9 * t_final.max(1.0) {
            continue;
        }
        let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
        for k in 1..n {
            times.push(start + span * k as f64 / n as f64);
        }
        times.push(end);
        start = end;
    }
    times
}

/// Solves a tridiagonal system in place (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], work: &mut [f64]) {
    let n = diag.len();
    work[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i] * work[i - 1];
        if i + 1 < n {
            work[i] = upper[i] / denom;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= work[i] * rhs[i + 1];
    }
}

struct Kinetics<'a> {
    constants: &'a KineticsConstants,
    alpha_initial: f64,
    max_dalpha: f64,
}

/// Advances the degree of cure at fixed temperature over `dt`, sub-cycling so
/// no explicit sub-step moves α by more than `max_dalpha`. Returns the number
/// of sub-steps taken.
fn advance_alpha(alpha: &mut f64, temp: f64, dt: f64, k: &KineticsConstants, max_dalpha: f64) -> usize {
    let first = cure_rate_unchecked(*alpha, temp, k) * dt;
    let n = if first > max_dalpha {
        (first / max_dalpha).ceil() as usize
    } else {
        1
    };
    let h = dt / n as f64;
    let mut a = *alpha;
    for _ in 0..n {
        a = (a + cure_rate_unchecked(a, temp, k) * h).min(1.0);
    }
    *alpha = a;
    n
}

fn integrate(
    geom: &Geometry,
    props: &SlabProperties,
    forcing: &Forcing,
    kinetics: Option<Kinetics>,
    dt: f64,
) -> Result<(SimResult, usize)> {
    let n = geom.num_nodes();
    let nt = geom.n_z_tool;
    let nc = geom.n_z_part;
    let iface = geom.interface_index();
    let (ht, hc) = (geom.tool_spacing(), geom.part_spacing());
    let rho_c_t = props.k_t / props.a_t;
    let rho_c_c = props.k_c / props.a_c;
    let z = geom.z_nodes();

    // heat capacity per unit area of each control volume, split by layer
    let mut cap_tool = vec![0.0; n];
    let mut cap_part = vec![0.0; n];
    for (i, c) in cap_tool.iter_mut().enumerate().take(nt) {
        *c = if i == 0 || i == iface { 0.5 } else { 1.0 } * rho_c_t * ht;
    }
    for j in 0..nc {
        cap_part[iface + j] = if j == 0 || j == nc - 1 { 0.5 } else { 1.0 } * rho_c_c * hc;
    }
    let cap: Vec<f64> = (0..n).map(|i| cap_tool[i] + cap_part[i]).collect();
    // conductance between node i and i + 1
    let g: Vec<f64> = (0..n - 1)
        .map(|i| if i < iface { props.k_t / ht } else { props.k_c / hc })
        .collect();
    let mut stiff = vec![0.0; n];
    for i in 0..n - 1 {
        stiff[i] += g[i];
        stiff[i + 1] += g[i];
    }
    stiff[0] += props.h_bot;
    stiff[n - 1] += props.h_top;

    let times = step_times(forcing.t_final, &forcing.breakpoints, dt);
    let steps = times.len() - 1;

    let mut temp: Vec<f64> = z.iter().map(|&zi| (forcing.initial_temperature)(zi)).collect();
    let mut alpha = vec![kinetics.as_ref().map_or(0.0, |k| k.alpha_initial); nc];

    let mut rec_t = Vec::with_capacity(steps + 1);
    let mut rec_temp = Vec::with_capacity((steps + 1) * n);
    let mut rec_alpha = Vec::with_capacity((steps + 1) * nc);
    rec_t.push(0.0);
    rec_temp.extend_from_slice(&temp);
    rec_alpha.extend_from_slice(&alpha);

    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut source = vec![0.0; n];
    let mut substeps = 0usize;
    let mut iface_residual: f64 = 0.0;
    let mut last_h = f64::NAN;

    for s in 0..steps {
        let (t0, t1) = (times[s], times[s + 1]);
        let h = t1 - t0;
        if h != last_h {
            for i in 0..n {
                diag[i] = cap[i] / h + 0.5 * stiff[i];
                if i > 0 {
                    lower[i] = -0.5 * g[i - 1];
                }
                if i + 1 < n {
                    upper[i] = -0.5 * g[i];
                }
            }
            last_h = h;
        }

        source.iter_mut().for_each(|v| *v = 0.0);
        if let Some(k) = &kinetics {
            for j in 0..nc {
                let before = alpha[j];
                substeps += advance_alpha(&mut alpha[j], temp[iface + j], h, k.constants, k.max_dalpha);
                source[iface + j] = cap_part[iface + j] * props.b_c * (alpha[j] - before) / h;
            }
        }
        if let Some(src) = forcing.source {
            for i in 0..n {
                let avg = |layer| 0.5 * (src(layer, z[i], t0) + src(layer, z[i], t1));
                if cap_tool[i] > 0.0 {
                    source[i] += cap_tool[i] * avg(Layer::Tool);
                }
                if cap_part[i] > 0.0 {
                    source[i] += cap_part[i] * avg(Layer::Part);
                }
            }
        }

        let air_bot = 0.5 * ((forcing.air_bottom)(t0) + (forcing.air_bottom)(t1));
        let air_top = 0.5 * ((forcing.air_top)(t0) + (forcing.air_top)(t1));
        for i in 0..n {
            let mut kt = stiff[i] * temp[i];
            if i > 0 {
                kt -= g[i - 1] * temp[i - 1];
            }
            if i + 1 < n {
                kt -= g[i] * temp[i + 1];
            }
            rhs[i] = cap[i] / h * temp[i] - 0.5 * kt + source[i];
        }
        rhs[0] += props.h_bot * air_bot;
        rhs[n - 1] += props.h_top * air_top;

        let previous_iface = (temp[iface - 1], temp[iface], temp[iface + 1]);
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut work);
        temp.copy_from_slice(&rhs);

        if let Some(bad) = temp.iter().position(|v| !v.is_finite() || v.abs() > 1e5) {
            return Err(Error::Unstable(format!(
                "temperature at node {bad} became {} at t = {t1} s (step {s}, dt = {h} s, tool spacing {ht} m, part spacing {hc} m)",
                temp[bad]
            )));
        }

        // energy balance of the two half cells around the interface node
        let (tm0, ti0, tp0) = previous_iface;
        // conductive flux in +z across the last tool cell and the first part cell
        let flux_tool = 0.5 * g[iface - 1] * ((tm0 - ti0) + (temp[iface - 1] - temp[iface]));
        let flux_part = 0.5 * g[iface] * ((ti0 - tp0) + (temp[iface] - temp[iface + 1]));
        let tool_side = flux_tool - cap_tool[iface] * (temp[iface] - ti0) / h;
        let part_side =
            flux_part + cap_part[iface] * (temp[iface] - ti0) / h - source[iface];
        let scale = (props.h_bot * (air_bot - temp[0])).abs()
            + (props.h_top * (air_top - temp[n - 1])).abs()
            + 1e-12;
        iface_residual = iface_residual.max((tool_side - part_side).abs() / scale);

        rec_t.push(t1);
        rec_temp.extend_from_slice(&temp);
        rec_alpha.extend_from_slice(&alpha);
    }

    let result = SimResult {
        times: rec_t,
        z_nodes: z,
        temperature: rec_temp,
        alpha: rec_alpha,
        meta: SimMeta {
            design: None,
            material_name: String::new(),
            material_hash: String::new(),
            geometry: *geom,
            dt,
            steps,
            kinetics_substeps: substeps,
            alpha_initial: kinetics.as_ref().map_or(0.0, |k| k.alpha_initial),
            initial_temp_c: f64::NAN,
            max_dalpha: kinetics.as_ref().map_or(0.0, |k| k.max_dalpha),
            t_obj: None,
            interface_residual: iface_residual,
        },
    };
    Ok((result, substeps))
}

/// Simulates the cure of design `u` on `geom`. The tool thickness of `geom`
/// must match `u.l_t`.
pub fn simulate(
    card: &MaterialCard,
    geom: &Geometry,
    u: &DesignVector,
    opts: &SimOptions,
) -> Result<SimResult> {
    if (geom.tool_thickness - u.tool_thickness_m()).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "geometry tool thickness {} m does not match the design's {} m",
            geom.tool_thickness,
            u.tool_thickness_m()
        )));
    }
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {}", opts.dt)));
    }
    if !(opts.max_dalpha > 0.0) {
        return Err(Error::Config("max_dalpha must be positive".into()));
    }
    if !(u.h_top > 0.0 && u.h_bot > 0.0) {
        return Err(Error::InvalidDesign("heat-transfer coefficients must be positive".into()));
    }
    let problems = crate::material::validate_card(card);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let cycle = build_cycle(u, &opts.cycle_options())?;
    let t_final = match opts.horizon {
        Horizon::Objective => cycle.t_obj,
        Horizon::CycleEnd => cycle.t_end,
    };
    let air = |t: f64| cycle.air_temperature_clamped(t);
    let t0 = celsius_to_kelvin(opts.initial_temp_c);
    let init = move |_z: f64| t0;
    let forcing = Forcing {
        air_bottom: &air,
        air_top: &air,
        source: None,
        initial_temperature: &init,
        t_final,
        breakpoints: cycle.breakpoints(),
    };
    let props = SlabProperties::new(card, u.h_top, u.h_bot);
    let kinetics = Kinetics {
        constants: &card.kinetics,
        alpha_initial: opts.alpha_initial,
        max_dalpha: opts.max_dalpha,
    };
    let (mut res, _) = integrate(geom, &props, &forcing, Some(kinetics), opts.dt)?;
    res.meta.design = Some(*u);
    res.meta.material_name = card.name.clone();
    res.meta.material_hash = card.content_hash();
    res.meta.initial_temp_c = opts.initial_temp_c;
    res.meta.t_obj = Some(cycle.t_obj);
    Ok(res)
}

/// Convenience wrapper that derives the geometry from `u` and `opts`.
pub fn simulate_design(card: &MaterialCard, u: &DesignVector, opts: &SimOptions) -> Result<SimResult> {
    let geom = opts.geometry_for(u)?;
    simulate(card, &geom, u, opts)
}

/// Conduction-only run with arbitrary boundary air temperatures and source;
/// used for verification against manufactured solutions.
pub fn simulate_conduction(
    geom: &Geometry,
    props: &SlabProperties,
    forcing: &Forcing,
    dt: f64,
) -> Result<SimResult> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    Ok(integrate(geom, props, forcing, None, dt)?.0)
}

/// Cure cycle used by a result, rebuilt from its recorded design.
pub fn cycle_of(res: &SimResult) -> Result<CureCycle> {
    let u = res
        .meta
        .design
        .ok_or_else(|| Error::Unsupported("result was not driven by a cure cycle".into()))?;
    build_cycle(
        &u,
        &CycleOptions {
            initial_temp_c: res.meta.initial_temp_c,
            cooldown_rate: crate::cure_cycle::DEFAULT_COOLDOWN_RATE,
        },
    )
}

/// Index `i` and weight `w` such that `x ≈ (1 - w) grid[i] + w grid[i + 1]`.
fn bracket(grid: &[f64], x: f64, what: &str) -> Result<(usize, f64)> {
    let n = grid.len();
    let (lo, hi) = (grid[0], grid[n - 1]);
    let tol = 1e-9 * (hi - lo).abs().max(1e-12);
    if !(x >= lo - tol && x <= hi + tol) {
        return Err(Error::Domain(format!("{what} {x} outside [{lo}, {hi}]")));
    }
    let x = x.clamp(lo, hi);
    let i = match grid.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => return Ok((i.min(n - 2), if i == n - 1 { 1.0 } else { 0.0 })),
        Err(i) => i - 1,
    };
    let w = (x - grid[i]) / (grid[i + 1] - grid[i]);
    Ok((i, w))
}

impl SimResult {
    pub fn num_nodes(&self) -> usize {
        self.z_nodes.len()
    }

    pub fn num_part_nodes(&self) -> usize {
        self.meta.geometry.n_z_part
    }

    pub fn temperature_at(&self, step: usize, node: usize) -> f64 {
        self.temperature[step * self.num_nodes() + node]
    }

    pub fn alpha_at(&self, step: usize, part_node: usize) -> f64 {
        self.alpha[step * self.num_part_nodes() + part_node]
    }

    pub fn part_z_nodes(&self) -> &[f64] {
        &self.z_nodes[self.meta.geometry.interface_index()..]
    }

    /// Bilinear interpolation of temperature (K) and, inside the part, the
    /// degree of cure at global position `z` (m) and time `t` (s).
    pub fn probe(&self, z: f64, t: f64) -> Result<(f64, Option<f64>)> {
        let (k, wt) = bracket(&self.times, t, "probe time")?;
        let (i, wz) = bracket(&self.z_nodes, z, "probe position")?;
        let lerp2 = |f: &dyn Fn(usize, usize) -> f64, i: usize, wz: f64| {
            let a = (1.0 - wz) * f(k, i) + wz * f(k, i + 1);
            let b = (1.0 - wz) * f(k + 1, i) + wz * f(k + 1, i + 1);
            (1.0 - wt) * a + wt * b
        };
        let temp = lerp2(&|s, n| self.temperature_at(s, n), i, wz);
        let iface = self.meta.geometry.interface_index();
        let z_iface = self.z_nodes[iface];
        let alpha = if z >= z_iface - 1e-12 {
            let (j, wj) = bracket(self.part_z_nodes(), z.max(z_iface), "probe position")?;
            Some(lerp2(&|s, n| self.alpha_at(s, n), j, wj))
        } else {
            None
        };
        Ok((temp, alpha))
    }

    /// Degree of cure and temperature (K) over the part nodes at time `t`.
    pub fn end_state(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (k, w) = bracket(&self.times, t, "end-state time")?;
        let iface = self.meta.geometry.interface_index();
        let nc = self.num_part_nodes();
        let lerp = |a: f64, b: f64| (1.0 - w) * a + w * b;
        let alpha = (0..nc)
            .map(|j| lerp(self.alpha_at(k, j), self.alpha_at(k + 1, j)))
            .collect();
        let temp = (0..nc)
            .map(|j| lerp(self.temperature_at(k, iface + j), self.temperature_at(k + 1, iface + j)))
            .collect();
        Ok((alpha, temp))
    }

    /// `(t, T °C, α)` at the middle of the part for every recorded time.
    pub fn part_midpoint_trajectory(&self) -> Result<Vec<(f64, f64, f64)>> {
        let g = &self.meta.geometry;
        let z_mid = g.tool_thickness + 0.5 * g.part_thickness;
        self.times
            .iter()
            .map(|&t| {
                let (temp, alpha) = self.probe(z_mid, t)?;
                Ok((t, temp - crate::material::KELVIN_OFFSET, alpha.unwrap_or(f64::NAN)))
            })
            .collect()
    }

    /// Maximum part temperature (K) over all recorded times up to `t_max`.
    pub fn max_part_temperature(&self, t_max: f64) -> f64 {
        let iface = self.meta.geometry.interface_index();
        let n = self.num_nodes();
        let mut best = f64::NEG_INFINITY;
        for (k, &t) in self.times.iter().enumerate() {
            if t > t_max + 1e-9 {
                break;
            }
            for i in iface..n {
                best = best.max(self.temperature_at(k, i));
            }
        }
        best
    }

    /// Writes `temperature.csv` (°C), `alpha.csv` and `meta.json` into `dir`.
    /// Rows are nodes, columns are times.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.num_nodes();
        let nc = self.num_part_nodes();
        let iface = self.meta.geometry.interface_index();
        let steps = self.times.len();
        let write_field = |name: &str, rows: usize, z0: usize, value: &dyn Fn(usize, usize) -> f64| {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
            let mut header = vec!["z_m".to_string()];
            header.extend(self.times.iter().map(|&t| sig9(t)));
            w.write_record(&header)?;
            for r in 0..rows {
                let mut row = Vec::with_capacity(steps + 1);
                row.push(sig9(self.z_nodes[z0 + r]));
                row.extend((0..steps).map(|k| sig9(value(k, r))));
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok::<_, Error>(())
        };
        write_field("temperature.csv", n, 0, &|k, r| {
            self.temperature_at(k, r) - crate::material::KELVIN_OFFSET
        })?;
        write_field("alpha.csv", nc, iface, &|k, r| self.alpha_at(k, r))?;
        let meta_path = dir.join("meta.json");
        let mut f = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let text = serde_json::to_string_pretty(&self.meta)?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }
}

/// Decimal rendering with nine significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = 8 - x.abs().log10().floor() as i32;
    if (0..=17).contains(&digits) {
        format!("{:.*}", digits as usize, x)
    } else {
        format!("{x:.8e}")
    }
}


/// Manufactured solution for the inert two-layer slab, used to measure the
/// spatial convergence order of the conduction scheme.
///
/// `T(z, t) = T0 + A g(t) P(s)` with `s = z - L_t`, `g(t) = 1 - exp(-t/τ)` and
/// `P(s) = cos(ωs) + sin(ωs)/k` using the local conductivity `k`. `P` and
/// `k P'` are continuous at the interface, so the exact field satisfies both
/// interface conditions; the source and the two boundary air temperatures are
/// chosen so it also satisfies the PDE and the Robin conditions.
pub mod manufactured {
    use super::*;

    #[derive(Debug, Clone, Copy)]
    pub struct Problem {
        pub props: SlabProperties,
        pub tool_thickness: f64,
        pub part_thickness: f64,
        pub base: f64,
        pub amplitude: f64,
        pub omega: f64,
        pub tau: f64,
        pub t_final: f64,
    }

    impl Problem {
        /// Slab with the conduction properties of `card` and both layers 20 mm thick.
        pub fn for_card(card: &MaterialCard) -> Self {
            Problem {
                props: SlabProperties {
                    b_c: 0.0,
                    ..SlabProperties::new(card, 80.0, 60.0)
                },
                tool_thickness: 0.02,
                part_thickness: 0.02,
                base: 293.15,
                amplitude: 40.0,
                omega: 60.0,
                tau: 1800.0,
                t_final: 3600.0,
            }
        }

        fn layer_of(&self, z: f64) -> Layer {
            if z <= self.tool_thickness {
                Layer::Tool
            } else {
                Layer::Part
            }
        }

        fn conductivity(&self, layer: Layer) -> f64 {
            match layer {
                Layer::Tool => self.props.k_t,
                Layer::Part => self.props.k_c,
            }
        }

        fn diffusivity(&self, layer: Layer) -> f64 {
            match layer {
                Layer::Tool => self.props.a_t,
                Layer::Part => self.props.a_c,
            }
        }

        fn g(&self, t: f64) -> (f64, f64) {
            let e = (-t / self.tau).exp();
            (1.0 - e, e / self.tau)
        }

        /// Profile `P` and its slope in `layer`.
        fn profile(&self, layer: Layer, z: f64) -> (f64, f64) {
            let s = z - self.tool_thickness;
            let k = self.conductivity(layer);
            let w = self.omega;
            let p = (w * s).cos() + (w * s).sin() / k;
            let dp = -w * (w * s).sin() + w * (w * s).cos() / k;
            (p, dp)
        }

        pub fn exact(&self, z: f64, t: f64) -> f64 {
            let (p, _) = self.profile(self.layer_of(z), z);
            self.base + self.amplitude * self.g(t).0 * p
        }

        pub fn source(&self, layer: Layer, z: f64, t: f64) -> f64 {
            let (g, dg) = self.g(t);
            let (p, _) = self.profile(layer, z);
            let a = self.diffusivity(layer);
            self.amplitude * p * (dg + a * self.omega * self.omega * g)
        }

        pub fn air_bottom(&self, t: f64) -> f64 {
            let (p, dp) = self.profile(Layer::Tool, 0.0);
            let amp = self.amplitude * self.g(t).0;
            self.base + amp * p - self.props.k_t / self.props.h_bot * amp * dp
        }

        pub fn air_top(&self, t: f64) -> f64 {
            let ztop = self.tool_thickness + self.part_thickness;
            let (p, dp) = self.profile(Layer::Part, ztop);
            let amp = self.amplitude * self.g(t).0;
            self.base + amp * p + self.props.k_c / self.props.h_top * amp * dp
        }

        /// Maximum nodal error at the final time for `cells` intervals per
        /// layer, with the time step refined alongside the spacing.
        pub fn max_error(&self, cells: usize, dt: f64) -> Result<f64> {
            let geom = Geometry::new(self.tool_thickness, self.part_thickness, cells + 1, cells + 1)?;
            let bottom = |t: f64| self.air_bottom(t);
            let top = |t: f64| self.air_top(t);
            let src = |layer: Layer, z: f64, t: f64| self.source(layer, z, t);
            let init = |z: f64| self.exact(z, 0.0);
            let forcing = Forcing {
                air_bottom: &bottom,
                air_top: &top,
                source: Some(&src),
                initial_temperature: &init,
                t_final: self.t_final,
                breakpoints: vec![],
            };
            let res = simulate_conduction(&geom, &self.props, &forcing, dt)?;
            let last = res.times.len() - 1;
            Ok(res
                .z_nodes
                .iter()
                .enumerate()
                .map(|(i, &z)| (res.temperature_at(last, i) - self.exact(z, self.t_final)).abs())
                .fold(0.0, f64::max))
        }
    }

    /// Observed orders `log2(e_h / e_{h/2})` over successive halvings,
    /// starting from `cells` intervals per layer and time step `dt`.
    pub fn observed_orders(problem: &Problem, cells: usize, dt: f64, levels: usize) -> Result<Vec<(usize, f64, f64)>> {
        let mut out = Vec::with_capacity(levels);
        let mut prev: Option<f64> = None;
        for l in 0..levels {
            let c = cells << l;
            let e = problem.max_error(c, dt / (1 << l) as f64)?;
            let order = prev.map_or(f64::NAN, |p| (p / e).log2());
            out.push((c, e, order));
            prev = Some(e);
        }
        Ok(out)
    }
}
