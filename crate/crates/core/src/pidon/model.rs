use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::cure_cycle::{
    max_objective_time, normalize_design, objective_time_with_grad, DesignBounds, DesignVector,
    NUM_DESIGN_VARS,
};
use crate::error::{Error, Result};
use crate::material::{validate_card, MaterialCard};
use crate::nn::{Activation, BoundMlp, JetLayout, Mlp, Tape, Tensor, Var};

/// Output field of one operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variable {
    #[serde(rename = "T_c")]
    PartTemperature,
    #[serde(rename = "T_t")]
    ToolTemperature,
    #[serde(rename = "alpha")]
    DegreeOfCure,
}

impl Variable {
    pub const ALL: [Variable; 3] = [
        Variable::PartTemperature,
        Variable::ToolTemperature,
        Variable::DegreeOfCure,
    ];

    pub fn index(self) -> usize {
        match self {
            Variable::PartTemperature => 0,
            Variable::ToolTemperature => 1,
            Variable::DegreeOfCure => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variable::PartTemperature => "T_c",
            Variable::ToolTemperature => "T_t",
            Variable::DegreeOfCure => "alpha",
        }
    }

    pub fn scaler(self) -> OutputScaler {
        match self {
            Variable::DegreeOfCure => OutputScaler::DOC,
            _ => OutputScaler::TEMPERATURE,
        }
    }

    /// Whether the operator lives on the tool layer.
    pub fn on_tool(self) -> bool {
        self == Variable::ToolTemperature
    }
}

/// `physical = offset + scale · network`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScaler {
    pub offset: f64,
    pub scale: f64,
}

impl OutputScaler {
    /// Temperatures in °C over [20, 260].
    pub const TEMPERATURE: OutputScaler = OutputScaler {
        offset: 140.0,
        scale: 120.0,
    };
    pub const DOC: OutputScaler = OutputScaler {
        offset: 0.5,
        scale: 0.5,
    };

    pub fn to_physical(&self, n: f64) -> f64 {
        self.offset + self.scale * n
    }

    pub fn to_network(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }
}

/// Hidden and output widths of the three sub-networks. The branch takes the
/// 9 normalised design variables, the trunk `(τ̂, ẑ)`, and the decoder maps
/// the merged embedding to one output (appended automatically).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub branch: Vec<usize>,
    pub trunk: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl Architecture {
    pub fn paper() -> Self {
        Architecture {
            branch: vec![50; 3],
            trunk: vec![50; 5],
            decoder: vec![50; 4],
        }
    }

    pub fn desk() -> Self {
        Architecture {
            branch: vec![32; 3],
            trunk: vec![32; 3],
            decoder: vec![32; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (Some(&qb), Some(&qt), Some(&qd)) =
            (self.branch.last(), self.trunk.last(), self.decoder.first())
        else {
            return Err(Error::Config("branch, trunk and decoder need at least one layer".into()));
        };
        if qb != qt || qd != qb {
            return Err(Error::Config(format!(
                "branch width {qb}, trunk width {qt} and decoder input {qd} must agree"
            )));
        }
        let all = self.branch.iter().chain(&self.trunk).chain(&self.decoder);
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn sizes(&self) -> [Vec<usize>; 3] {
        let mut b = vec![NUM_DESIGN_VARS];
        b.extend(&self.branch);
        let mut t = vec![2];
        t.extend(&self.trunk);
        let mut d = self.decoder.clone();
        d.push(1);
        [b, t, d]
    }
}

/// `decoder(branch(u) ⊙ trunk(τ̂, ẑ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepOnet {
    pub branch: Mlp,
    pub trunk: Mlp,
    pub decoder: Mlp,
}

/// Tape binding of a [`DeepOnet`].
pub(crate) struct BoundOnet {
    pub branch: BoundMlp,
    pub trunk: BoundMlp,
    pub decoder: BoundMlp,
}

impl DeepOnet {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let [b, t, d] = arch.sizes();
        Ok(DeepOnet {
            branch: Mlp::init(&b, Activation::Tanh, seed)?,
            trunk: Mlp::init(&t, Activation::Tanh, seed.wrapping_add(1))?,
            decoder: Mlp::init(&d, Activation::Tanh, seed.wrapping_add(2))?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        self.trunk.validate()?;
        self.decoder.validate()?;
        if self.branch.input_dim() != NUM_DESIGN_VARS || self.trunk.input_dim() != 2 {
            return Err(Error::Shape(format!(
                "branch input {} and trunk input {} must be {NUM_DESIGN_VARS} and 2",
                self.branch.input_dim(),
                self.trunk.input_dim()
            )));
        }
        let q = self.branch.output_dim();
        if self.trunk.output_dim() != q || self.decoder.input_dim() != q || self.decoder.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "embedding widths disagree: branch {q}, trunk {}, decoder {}→{}",
                self.trunk.output_dim(),
                self.decoder.input_dim(),
                self.decoder.output_dim()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count() + self.decoder.param_count()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p = self.branch.params_mut();
        p.extend(self.trunk.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut p = self.branch.params();
        p.extend(self.trunk.params());
        p.extend(self.decoder.params());
        p
    }

    /// Same function with the time input replaced by `a·τ̂ + b`, folded into
    /// the first trunk layer.
    pub fn retime(&self, a: f64, b: f64) -> DeepOnet {
        let mut out = self.clone();
        let first = &mut out.trunk.layers[0];
        let cols = first.weight.cols;
        for j in 0..cols {
            let w = first.weight.data[j];
            first.bias[j] += b * w;
            first.weight.data[j] = a * w;
        }
        out
    }

    /// Raw network output jets. `designs` is `d × 9` (normalised), point `p`
    /// uses design row `index[p]` and coordinates `coords[2p..2p+2]`.
    pub fn evaluate(
        &self,
        designs: &Tensor,
        index: &[usize],
        coords: &[f64],
        dirs: &[usize],
        second_of: Option<usize>,
    ) -> Result<Tensor> {
        let table = self.branch.forward_batch(designs)?;
        let (input, layout) = JetLayout::seed(coords, 2, dirs, second_of);
        let mut h = self.trunk.forward_jet(&input, &layout)?;
        let n = layout.points;
        if index.len() != n {
            return Err(Error::Shape(format!("{} design indices for {n} points", index.len())));
        }
        for r in 0..h.rows {
            let Some(tr) = index.get(r % n).and_then(|&i| (i < table.rows).then(|| table.row(i))) else {
                return Err(Error::Shape(format!("design index out of range for {} designs", table.rows)));
            };
            let cols = h.cols;
            for (v, b) in h.data[r * cols..(r + 1) * cols].iter_mut().zip(tr) {
                *v *= b;
            }
        }
        self.decoder.forward_jet(&h, &layout)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundOnet {
        let b = |tape: &mut Tape, m: &Mlp| {
            if trainable {
                tape.bind(m)
            } else {
                tape.bind_frozen(m)
            }
        };
        BoundOnet {
            branch: b(tape, &self.branch),
            trunk: b(tape, &self.trunk),
            decoder: b(tape, &self.decoder),
        }
    }
}

impl BoundOnet {
    /// Branch embeddings of every design row.
    pub fn table(&self, tape: &mut Tape, designs: Var) -> Var {
        let rows = tape.value(designs).rows;
        tape.mlp(&self.branch, designs, &JetLayout::plain(rows))
    }

    /// Raw output jets on the tape, given the branch table.
    pub fn record(
        &self,
        tape: &mut Tape,
        table: Var,
        index: Rc<[usize]>,
        coords: &[f64],
        dirs: &[usize],
        second_of: Option<usize>,
    ) -> (Var, JetLayout) {
        let (input, layout) = JetLayout::seed(coords, 2, dirs, second_of);
        let y = tape.constant(input);
        let t = tape.mlp(&self.trunk, y, &layout);
        let merged = tape.gather_mul(table, t, index);
        (tape.mlp(&self.decoder, merged, &layout), layout)
    }

    /// Parameter gradients in [`DeepOnet::params`] order.
    pub fn grads(&self, tape: &Tape, g: &crate::nn::Gradients) -> Vec<Vec<f64>> {
        let mut out = self.branch.grads(tape, g);
        out.extend(self.trunk.grads(tape, g));
        out.extend(self.decoder.grads(tape, g));
        out
    }
}

/// One operator on one temporal subdomain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPidon {
    pub variable: Variable,
    /// `(τ_start, τ_end)` in normalised global time.
    pub span: (f64, f64),
    pub net: DeepOnet,
    pub scaler: OutputScaler,
}

impl SubPidon {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let (a, b) = self.span;
        if !(a < b) || a < 0.0 || b > 1.0 {
            return Err(Error::Shape(format!("invalid subdomain span ({a}, {b})")));
        }
        if !(self.scaler.scale > 0.0) || !self.scaler.offset.is_finite() {
            return Err(Error::Shape("output scaler must have a positive scale".into()));
        }
        Ok(())
    }

    /// Local time coordinate `τ̂ ∈ [-1, 1]` of `τ`.
    pub fn tau_hat(&self, tau: f64) -> f64 {
        let (a, b) = self.span;
        2.0 * (tau - a) / (b - a) - 1.0
    }
}

/// Physical value of `s` at normalised design `u_norm` and local
/// coordinates `y_norm = (τ̂, ẑ)`.
pub fn operator_forward(s: &SubPidon, u_norm: &[f64], y_norm: &[f64; 2]) -> Result<f64> {
    if u_norm.len() != NUM_DESIGN_VARS {
        return Err(Error::Shape(format!(
            "design input has {} entries, expected {NUM_DESIGN_VARS}",
            u_norm.len()
        )));
    }
    let designs = Tensor::new(1, NUM_DESIGN_VARS, u_norm.to_vec());
    let out = s.net.evaluate(&designs, &[0], y_norm, &[], None)?;
    Ok(s.scaler.to_physical(out.data[0]))
}

/// Subdomain with one operator per [`Variable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subdomain {
    pub span: (f64, f64),
    pub operators: [SubPidon; 3],
}

impl Subdomain {
    pub fn operator(&self, v: Variable) -> &SubPidon {
        &self.operators[v.index()]
    }

    /// Networks reproducing this subdomain on `span ⊆ self.span`, in the
    /// local time coordinate of `span`.
    pub fn restricted_nets(&self, span: (f64, f64)) -> [DeepOnet; 3] {
        let (p0, p1) = self.span;
        let wp = p1 - p0;
        let wc = span.1 - span.0;
        let a = wc / wp;
        let b = (2.0 * (span.0 - p0) + wc) / wp - 1.0;
        self.operators.each_ref().map(|o| o.net.retime(a, b))
    }
}

/// What the surrogate is trained to represent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateProblem {
    pub card: MaterialCard,
    pub bounds: DesignBounds,
    /// Part thickness (m).
    pub part_thickness: f64,
    pub alpha_initial: f64,
    pub initial_temp_c: f64,
}

impl SurrogateProblem {
    pub fn new(card: MaterialCard, bounds: DesignBounds, part_thickness: f64) -> Self {
        SurrogateProblem {
            card,
            bounds,
            part_thickness,
            alpha_initial: 0.05,
            initial_temp_c: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let issues = validate_card(&self.card);
        if !issues.is_empty() {
            return Err(Error::Config(format!("invalid material card: {}", issues.join("; "))));
        }
        self.bounds.validate()?;
        if !(self.part_thickness > 0.0) {
            return Err(Error::Config(format!("part thickness {} must be positive", self.part_thickness)));
        }
        if !(0.0..1.0).contains(&self.alpha_initial) {
            return Err(Error::Config(format!("initial degree of cure {} outside [0, 1)", self.alpha_initial)));
        }
        Ok(())
    }

    /// Longest objective time (s) in the bounds.
    pub fn t_max(&self) -> f64 {
        max_objective_time(&self.bounds, self.initial_temp_c)
    }
}

/// Stitched surrogate covering `τ ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PidonModel {
    pub problem: SurrogateProblem,
    pub architecture: Architecture,
    pub subdomains: Vec<Subdomain>,
    /// Free-form echo of the training configuration.
    pub config: serde_json::Value,
    pub warnings: Vec<String>,
}

/// Fields on a time × space grid; `[i][j]` is time `i`, position `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub taus: Vec<f64>,
    /// Times (s).
    pub times: Vec<f64>,
    /// Local coordinates in `[0, 1]` across each layer.
    pub xs: Vec<f64>,
    pub part_temperature: Vec<Vec<f64>>,
    pub tool_temperature: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

impl PidonModel {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.architecture.validate()?;
        if self.subdomains.is_empty() {
            return Err(Error::Shape("model has no subdomains".into()));
        }
        let mut prev = 0.0;
        for (k, s) in self.subdomains.iter().enumerate() {
            if s.span.0 != prev {
                return Err(Error::Shape(format!(
                    "subdomain {k} starts at {} but the previous one ends at {prev}",
                    s.span.0
                )));
            }
            for (i, op) in s.operators.iter().enumerate() {
                op.validate()?;
                if op.span != s.span || op.variable.index() != i {
                    return Err(Error::Shape(format!("operator {i} of subdomain {k} is mislabelled")));
                }
            }
            prev = s.span.1;
        }
        if prev != 1.0 {
            return Err(Error::Shape(format!("subdomains end at {prev}, not 1")));
        }
        Ok(())
    }

    pub fn spans(&self) -> Vec<(f64, f64)> {
        self.subdomains.iter().map(|s| s.span).collect()
    }

    /// Subdomain owning `τ`; a boundary belongs to the later subdomain.
    pub fn subdomain_index(&self, tau: f64) -> Option<usize> {
        if !(0.0..=1.0).contains(&tau) {
            return None;
        }
        let last = self.subdomains.len() - 1;
        if tau == 1.0 {
            return Some(last);
        }
        self.subdomains.iter().position(|s| tau >= s.span.0 && tau < s.span.1)
    }

    /// Refuses designs outside the training bounds.
    pub fn check_design(&self, u: &DesignVector) -> Result<()> {
        let bad = self.problem.bounds.violations(u);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidDesign(format!(
                "{} outside the surrogate's training bounds",
                bad.join(", ")
            )))
        }
    }

    pub fn normalize(&self, u: &DesignVector) -> [f64; NUM_DESIGN_VARS] {
        normalize_design(u, &self.problem.bounds)
    }

    pub fn objective_time(&self, u: &DesignVector) -> f64 {
        objective_time_with_grad(u, self.problem.initial_temp_c).0
    }

    /// Physical values of `var` at `(τ, x)` queries, `x ∈ [0, 1]` across the
    /// variable's layer.
    pub fn evaluate(&self, u: &DesignVector, var: Variable, queries: &[(f64, f64)]) -> Result<Vec<f64>> {
        self.evaluate_jets(u, var, queries, &[], None).map(|t| t[0].clone())
    }

    /// Value and first-derivative channels (with respect to the local
    /// `(τ̂, ẑ)` coordinates in `dirs`) per query, in network units except
    /// for channel 0, which is physical.
    pub(crate) fn evaluate_jets(
        &self,
        u: &DesignVector,
        var: Variable,
        queries: &[(f64, f64)],
        dirs: &[usize],
        second_of: Option<usize>,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_design(u)?;
        let designs = Tensor::new(1, NUM_DESIGN_VARS, self.normalize(u).to_vec());
        let channels = 1 + dirs.len() + usize::from(second_of.is_some());
        let mut out = vec![vec![0.0; queries.len()]; channels];
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.subdomains.len()];
        for (q, &(tau, x)) in queries.iter().enumerate() {
            let k = self.subdomain_index(tau).ok_or_else(|| {
                Error::Domain(format!("normalised time {tau} outside [0, 1]"))
            })?;
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Domain(format!("local coordinate {x} outside [0, 1]")));
            }
            groups[k].push(q);
        }
        for (k, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let op = self.subdomains[k].operator(var);
            let coords: Vec<f64> = group
                .iter()
                .flat_map(|&q| [op.tau_hat(queries[q].0), 2.0 * queries[q].1 - 1.0])
                .collect();
            let jets = op.net.evaluate(&designs, &vec![0; group.len()], &coords, dirs, second_of)?;
            let n = group.len();
            for (c, ch) in out.iter_mut().enumerate() {
                for (p, &q) in group.iter().enumerate() {
                    let v = jets.data[c * n + p];
                    ch[q] = if c == 0 { op.scaler.to_physical(v) } else { v };
                }
            }
        }
        Ok(out)
    }

    /// Fields on `n_time` evenly spaced times over `[0, t_obj(u)]` and
    /// `n_space` evenly spaced positions across each layer.
    pub fn predict(&self, u: &DesignVector, n_time: usize, n_space: usize) -> Result<Prediction> {
        if n_time < 2 || n_space < 2 {
            return Err(Error::Config("prediction grid needs at least 2×2 points".into()));
        }
        let taus: Vec<f64> = (0..n_time).map(|i| i as f64 / (n_time - 1) as f64).collect();
        let xs: Vec<f64> = (0..n_space).map(|j| j as f64 / (n_space - 1) as f64).collect();
        let queries: Vec<(f64, f64)> = taus.iter().flat_map(|&t| xs.iter().map(move |&x| (t, x))).collect();
        let field = |var| -> Result<Vec<Vec<f64>>> {
            let flat = self.evaluate(u, var, &queries)?;
            Ok(flat.chunks(n_space).map(|c| c.to_vec()).collect())
        };
        let t_obj = self.objective_time(u);
        Ok(Prediction {
            times: taus.iter().map(|t| t * t_obj).collect(),
            part_temperature: field(Variable::PartTemperature)?,
            tool_temperature: field(Variable::ToolTemperature)?,
            alpha: field(Variable::DegreeOfCure)?,
            taus,
            xs,
        })
    }

    /// Part-midpoint `(T_c °C, α)` at physical times `times` (s).
    pub fn midpoint_trajectory(&self, u: &DesignVector, times: &[f64]) -> Result<Vec<(f64, f64)>> {
        let t_obj = self.objective_time(u);
        let mut queries = Vec::with_capacity(times.len());
        for &t in times {
            if !(0.0..=t_obj * (1.0 + 1e-12)).contains(&t) {
                return Err(Error::Domain(format!("time {t} s outside [0, {t_obj}]")));
            }
            queries.push(((t / t_obj).min(1.0), 0.5));
        }
        let temp = self.evaluate(u, Variable::PartTemperature, &queries)?;
        let alpha = self.evaluate(u, Variable::DegreeOfCure, &queries)?;
        Ok(temp.into_iter().zip(alpha).collect())
    }

    pub fn param_count(&self) -> usize {
        self.subdomains
            .iter()
            .flat_map(|s| s.operators.iter())
            .map(|o| o.net.param_count())
            .sum()
    }
}
