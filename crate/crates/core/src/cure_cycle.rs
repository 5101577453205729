//! Two-hold autoclave cure cycles and the nine-variable design space.
//!
//! Design vectors use the process engineer's units (°C/min, min, °C, W/m²/K,
//! cm). A [`CureCycle`] built from one stores times in seconds and
//! temperatures in Kelvin.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::celsius_to_kelvin;

pub const NUM_DESIGN_VARS: usize = 9;

/// Names of the design variables in vector order.
pub const DESIGN_VAR_NAMES: [&str; NUM_DESIGN_VARS] =
    ["r1", "r2", "hd1", "hd2", "ht1", "ht2", "h_top", "h_bot", "L_t"];

/// Initial part, tool and air temperature (°C).
pub const DEFAULT_INITIAL_TEMP_C: f64 = 20.0;

/// Cooldown rate appended after the second hold (°C/min).
pub const DEFAULT_COOLDOWN_RATE: f64 = 2.0;

/// The nine design variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; NUM_DESIGN_VARS]", into = "[f64; NUM_DESIGN_VARS]")]
pub struct DesignVector {
    /// First heating rate (°C/min).
    pub r1: f64,
    /// Second heating rate (°C/min).
    pub r2: f64,
    /// First hold duration (min).
    pub hd1: f64,
    /// Second hold duration (min).
    pub hd2: f64,
    /// First hold temperature (°C).
    pub ht1: f64,
    /// Second hold temperature (°C).
    pub ht2: f64,
    /// Heat-transfer coefficient on the part (top) surface (W/m²/K).
    pub h_top: f64,
    /// Heat-transfer coefficient on the tool (bottom) surface (W/m²/K).
    pub h_bot: f64,
    /// Tool thickness (cm).
    pub l_t: f64,
}

impl DesignVector {
    pub fn to_array(&self) -> [f64; NUM_DESIGN_VARS] {
        [
            self.r1, self.r2, self.hd1, self.hd2, self.ht1, self.ht2, self.h_top, self.h_bot,
            self.l_t,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_DESIGN_VARS] = v.try_into().map_err(|_| {
            Error::InvalidDesign(format!(
                "expected {NUM_DESIGN_VARS} design variables, got {}",
                v.len()
            ))
        })?;
        Ok(arr.into())
    }

    /// Tool thickness in metres.
    pub fn tool_thickness_m(&self) -> f64 {
        self.l_t / 100.0
    }
}

impl From<[f64; NUM_DESIGN_VARS]> for DesignVector {
    fn from(a: [f64; NUM_DESIGN_VARS]) -> Self {
        DesignVector {
            r1: a[0],
            r2: a[1],
            hd1: a[2],
            hd2: a[3],
            ht1: a[4],
            ht2: a[5],
            h_top: a[6],
            h_bot: a[7],
            l_t: a[8],
        }
    }
}

impl From<DesignVector> for [f64; NUM_DESIGN_VARS] {
    fn from(u: DesignVector) -> Self {
        u.to_array()
    }
}

impl fmt::Display for DesignVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.to_array().iter().map(|v| format!("{v:.4}")).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Per-variable `[min, max]` ranges. A variable with `min == max` is frozen:
/// it normalises to 0 and clipping pins it to that value.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBounds {
    pub lower: [f64; NUM_DESIGN_VARS],
    pub upper: [f64; NUM_DESIGN_VARS],
}

#[derive(Serialize, Deserialize)]
struct BoundsFile {
    r1: [f64; 2],
    r2: [f64; 2],
    hd1: [f64; 2],
    hd2: [f64; 2],
    ht1: [f64; 2],
    ht2: [f64; 2],
    h_top: [f64; 2],
    h_bot: [f64; 2],
    #[serde(rename = "L_t")]
    l_t: [f64; 2],
}

impl Serialize for DesignBounds {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let p = |i: usize| [self.lower[i], self.upper[i]];
        BoundsFile {
            r1: p(0),
            r2: p(1),
            hd1: p(2),
            hd2: p(3),
            ht1: p(4),
            ht2: p(5),
            h_top: p(6),
            h_bot: p(7),
            l_t: p(8),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DesignBounds {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = BoundsFile::deserialize(d)?;
        let pairs = [f.r1, f.r2, f.hd1, f.hd2, f.ht1, f.ht2, f.h_top, f.h_bot, f.l_t];
        let b = DesignBounds {
            lower: pairs.map(|p| p[0]),
            upper: pairs.map(|p| p[1]),
        };
        b.validate().map_err(serde::de::Error::custom)?;
        Ok(b)
    }
}

impl Default for DesignBounds {
    /// The training and optimisation ranges of the full design space.
    fn default() -> Self {
        DesignBounds {
            lower: [1.2, 1.2, 50.0, 115.0, 100.0, 175.0, 70.0, 40.0, 2.0],
            upper: [3.0, 3.0, 70.0, 125.0, 120.0, 185.0, 120.0, 90.0, 4.0],
        }
    }
}

impl DesignBounds {
    pub fn new(lower: [f64; NUM_DESIGN_VARS], upper: [f64; NUM_DESIGN_VARS]) -> Result<Self> {
        let b = DesignBounds { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..NUM_DESIGN_VARS {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!(
                    "bounds for {} are invalid: [{lo}, {hi}]",
                    DESIGN_VAR_NAMES[i]
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn midpoint(&self) -> DesignVector {
        let mut m = [0.0; NUM_DESIGN_VARS];
        for (i, v) in m.iter_mut().enumerate() {
            *v = 0.5 * (self.lower[i] + self.upper[i]);
        }
        m.into()
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.lower[i] == self.upper[i]
    }

    /// Subspace that keeps variables `free` at these bounds and freezes every
    /// other variable at its midpoint.
    pub fn reduced(&self, free: &[usize]) -> DesignBounds {
        let mid = self.midpoint().to_array();
        let mut out = self.clone();
        for i in 0..NUM_DESIGN_VARS {
            if !free.contains(&i) {
                out.lower[i] = mid[i];
                out.upper[i] = mid[i];
            }
        }
        out
    }

    pub fn contains(&self, u: &DesignVector) -> bool {
        let a = u.to_array();
        (0..NUM_DESIGN_VARS).all(|i| a[i] >= self.lower[i] && a[i] <= self.upper[i])
    }

    /// Names of the variables that lie outside the bounds.
    pub fn violations(&self, u: &DesignVector) -> Vec<&'static str> {
        let a = u.to_array();
        (0..NUM_DESIGN_VARS)
            .filter(|&i| !(a[i] >= self.lower[i] && a[i] <= self.upper[i]))
            .map(|i| DESIGN_VAR_NAMES[i])
            .collect()
    }
}

/// Projects `u` onto the box.
pub fn clip_design(u: &DesignVector, b: &DesignBounds) -> DesignVector {
    let mut a = u.to_array();
    for (i, v) in a.iter_mut().enumerate() {
        *v = v.max(b.lower[i]).min(b.upper[i]);
    }
    a.into()
}

/// Affine map of each variable onto `[-1, 1]`; frozen variables map to 0.
pub fn normalize_design(u: &DesignVector, b: &DesignBounds) -> [f64; NUM_DESIGN_VARS] {
    let a = u.to_array();
    let mut out = [0.0; NUM_DESIGN_VARS];
    for i in 0..NUM_DESIGN_VARS {
        if !b.is_frozen(i) {
            let half = 0.5 * (b.upper[i] - b.lower[i]);
            let mid = 0.5 * (b.upper[i] + b.lower[i]);
            out[i] = (a[i] - mid) / half;
        }
    }
    out
}

/// Derivative of each normalised coordinate with respect to its variable.
pub fn normalization_slopes(b: &DesignBounds) -> [f64; NUM_DESIGN_VARS] {
    let mut out = [0.0; NUM_DESIGN_VARS];
    for (i, s) in out.iter_mut().enumerate() {
        if !b.is_frozen(i) {
            *s = 2.0 / (b.upper[i] - b.lower[i]);
        }
    }
    out
}

pub fn denormalize_design(x: &[f64; NUM_DESIGN_VARS], b: &DesignBounds) -> DesignVector {
    let mut out = [0.0; NUM_DESIGN_VARS];
    for i in 0..NUM_DESIGN_VARS {
        let half = 0.5 * (b.upper[i] - b.lower[i]);
        let mid = 0.5 * (b.upper[i] + b.lower[i]);
        out[i] = mid + half * x[i];
    }
    out.into()
}

/// `count` independent uniform samples from the box, reproducible per seed.
pub fn sample_designs(b: &DesignBounds, count: usize, seed: u64) -> Vec<DesignVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut a = [0.0; NUM_DESIGN_VARS];
            for (i, v) in a.iter_mut().enumerate() {
                let u: f64 = rng.gen();
                *v = b.lower[i] + u * (b.upper[i] - b.lower[i]);
            }
            a.into()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Ramp1,
    Hold1,
    Ramp2,
    Hold2,
    Cooldown,
}

/// One linear piece of the air-temperature program (seconds, Kelvin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub t_start: f64,
    pub t_end: f64,
    pub temp_start: f64,
    pub temp_end: f64,
}

impl Segment {
    fn at(&self, t: f64) -> f64 {
        let span = self.t_end - self.t_start;
        if span <= 0.0 {
            return self.temp_end;
        }
        let w = (t - self.t_start) / span;
        self.temp_start + w * (self.temp_end - self.temp_start)
    }
}

/// Piecewise-linear autoclave air-temperature program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CureCycle {
    pub segments: Vec<Segment>,
    /// Total duration including cooldown (s).
    pub t_end: f64,
    /// Time at which end-of-cure objectives are read: end of the second hold (s).
    pub t_obj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleOptions {
    /// Initial air temperature (°C).
    pub initial_temp_c: f64,
    /// Cooldown rate after the second hold (°C/min).
    pub cooldown_rate: f64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions {
            initial_temp_c: DEFAULT_INITIAL_TEMP_C,
            cooldown_rate: DEFAULT_COOLDOWN_RATE,
        }
    }
}

fn check_cycle_design(u: &DesignVector, t0: f64) -> Result<()> {
    if !(u.ht1 > t0) {
        return Err(Error::InvalidDesign(format!(
            "first hold temperature {} °C must exceed the initial temperature {t0} °C",
            u.ht1
        )));
    }
    if !(u.ht2 > u.ht1) {
        return Err(Error::InvalidDesign(format!(
            "second hold temperature {} °C must exceed the first {} °C",
            u.ht2, u.ht1
        )));
    }
    if !(u.r1 > 0.0 && u.r2 > 0.0) {
        return Err(Error::InvalidDesign("heating rates must be positive".into()));
    }
    if !(u.hd1 >= 0.0 && u.hd2 >= 0.0) {
        return Err(Error::InvalidDesign("hold durations must be non-negative".into()));
    }
    Ok(())
}

/// Builds the ramp–hold–ramp–hold–cooldown program for design `u`.
pub fn build_cycle(u: &DesignVector, opts: &CycleOptions) -> Result<CureCycle> {
    let t0 = opts.initial_temp_c;
    check_cycle_design(u, t0)?;
    if !(opts.cooldown_rate > 0.0) {
        return Err(Error::Config("cooldown rate must be positive".into()));
    }
    let minutes = [
        (SegmentKind::Ramp1, (u.ht1 - t0) / u.r1, t0, u.ht1),
        (SegmentKind::Hold1, u.hd1, u.ht1, u.ht1),
        (SegmentKind::Ramp2, (u.ht2 - u.ht1) / u.r2, u.ht1, u.ht2),
        (SegmentKind::Hold2, u.hd2, u.ht2, u.ht2),
        (SegmentKind::Cooldown, (u.ht2 - t0) / opts.cooldown_rate, u.ht2, t0),
    ];
    let mut segments = Vec::with_capacity(minutes.len());
    let mut t = 0.0;
    let mut t_obj = 0.0;
    for (kind, dur_min, from, to) in minutes {
        let t_next = t + 60.0 * dur_min;
        segments.push(Segment {
            kind,
            t_start: t,
            t_end: t_next,
            temp_start: celsius_to_kelvin(from),
            temp_end: celsius_to_kelvin(to),
        });
        if kind == SegmentKind::Hold2 {
            t_obj = t_next;
        }
        t = t_next;
    }
    Ok(CureCycle {
        segments,
        t_end: t,
        t_obj,
    })
}

impl CureCycle {
    /// Air temperature (K) at time `t` (s).
    pub fn air_temperature(&self, t: f64) -> Result<f64> {
        let tol = 1e-9 * self.t_end.max(1.0);
        if !(t >= -tol && t <= self.t_end + tol) {
            return Err(Error::Domain(format!(
                "time {t} s outside the cycle [0, {}] s",
                self.t_end
            )));
        }
        Ok(self.air_temperature_clamped(t))
    }

    pub(crate) fn air_temperature_clamped(&self, t: f64) -> f64 {
        // the first segment whose end reaches t; zero-length holds are skipped
        for seg in &self.segments {
            if t <= seg.t_end && seg.t_end > seg.t_start {
                return seg.at(t.max(seg.t_start));
            }
        }
        self.segments.last().map(|s| s.temp_end).unwrap_or(0.0)
    }

    pub fn segment(&self, kind: SegmentKind) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.kind == kind)
            .expect("every cycle has all five segments")
    }

    /// Breakpoints between segments (s), excluding 0.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.t_end).collect()
    }
}

/// End of the second hold (s) and its gradient with respect to the design
/// vector. Pure ramp/hold arithmetic, independent of [`build_cycle`].
pub fn objective_time_with_grad(u: &DesignVector, t0: f64) -> (f64, [f64; NUM_DESIGN_VARS]) {
    let minutes = (u.ht1 - t0) / u.r1 + u.hd1 + (u.ht2 - u.ht1) / u.r2 + u.hd2;
    let mut g = [0.0; NUM_DESIGN_VARS];
    g[0] = -(u.ht1 - t0) / (u.r1 * u.r1);
    g[1] = -(u.ht2 - u.ht1) / (u.r2 * u.r2);
    g[2] = 1.0;
    g[3] = 1.0;
    g[4] = 1.0 / u.r1 - 1.0 / u.r2;
    g[5] = 1.0 / u.r2;
    (60.0 * minutes, g.map(|v| 60.0 * v))
}

/// Air temperature (°C) at the fraction `tau` of the objective time, with its
/// gradient with respect to the design vector. Valid for `tau` in `[0, 1]`,
/// i.e. before cooldown starts.
pub fn air_temperature_at_fraction(
    u: &DesignVector,
    tau: f64,
    t0: f64,
) -> (f64, [f64; NUM_DESIGN_VARS]) {
    let (t_obj, dt_obj) = objective_time_with_grad(u, t0);
    let t = tau * t_obj / 60.0; // minutes
    let dt: [f64; NUM_DESIGN_VARS] = dt_obj.map(|v| tau * v / 60.0);
    let t1 = (u.ht1 - t0) / u.r1;
    let t2 = t1 + u.hd1;
    let t3 = t2 + (u.ht2 - u.ht1) / u.r2;
    let mut g = [0.0; NUM_DESIGN_VARS];
    if t < t1 {
        let temp = t0 + u.r1 * t;
        for (gi, d) in g.iter_mut().zip(dt.iter()) {
            *gi = u.r1 * d;
        }
        g[0] += t;
        (temp, g)
    } else if t < t2 {
        g[4] = 1.0;
        (u.ht1, g)
    } else if t < t3 {
        let temp = u.ht1 + u.r2 * (t - t2);
        // t2 = (ht1 - t0)/r1 + hd1
        let mut dt2 = [0.0; NUM_DESIGN_VARS];
        dt2[0] = -(u.ht1 - t0) / (u.r1 * u.r1);
        dt2[2] = 1.0;
        dt2[4] = 1.0 / u.r1;
        for i in 0..NUM_DESIGN_VARS {
            g[i] = u.r2 * (dt[i] - dt2[i]);
        }
        g[1] += t - t2;
        g[4] += 1.0;
        (temp, g)
    } else {
        g[5] = 1.0;
        (u.ht2, g)
    }
}

/// Longest objective time (s) over the box corners; the global temporal
/// horizon of a surrogate trained on these bounds.
pub fn max_objective_time(b: &DesignBounds, t0: f64) -> f64 {
    let mut best: f64 = 0.0;
    for mask in 0..16u32 {
        let pick = |bit: u32, i: usize| {
            if mask & (1 << bit) != 0 {
                b.upper[i]
            } else {
                b.lower[i]
            }
        };
        let mut a = b.upper;
        a[0] = pick(0, 0);
        a[1] = pick(1, 1);
        a[4] = pick(2, 4);
        a[5] = pick(3, 5);
        let u = DesignVector::from(a);
        if u.ht1 > t0 && u.ht2 > u.ht1 {
            best = best.max(objective_time_with_grad(&u, t0).0);
        }
    }
    best
}
