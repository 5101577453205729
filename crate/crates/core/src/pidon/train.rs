//! Sequential training over temporal subdomains with adaptive bisection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, DeepOnet, OutputScaler, PidonModel, SubPidon, Subdomain, SurrogateProblem, Variable};
use super::physics::{record_losses, Batch, Context, IcBatch, LossComponents, LossWeights};
pub use super::physics::IcTargets;
use crate::cure_cycle::{sample_designs, DesignVector};
use crate::error::{Error, Result};
use crate::nn::{AdamState, StepDecay, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of sampled training designs.
    pub designs: usize,
    pub design_seed: u64,
    /// Interior collocation points per step, shared by the three operators.
    pub collocation: usize,
    /// Boundary points per step (each is used on both faces).
    pub boundary_points: usize,
    /// Spatial points per design for the initial condition.
    pub ic_points: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch, each on a freshly drawn batch.
    pub steps_per_epoch: usize,
    pub learning_rate: StepDecay,
    pub weights: LossWeights,
    pub initial_subdomains: usize,
    pub split_threshold: f64,
    pub max_splits: usize,
    /// Fresh batches averaged for the end-of-subdomain loss.
    pub eval_batches: usize,
    /// Start each subdomain from the previous subdomain's parameters.
    pub warm_start: bool,
    pub seed: u64,
    pub architecture: Architecture,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            designs: 600,
            design_seed: 0,
            collocation: 256,
            boundary_points: 128,
            ic_points: 11,
            epochs: 200,
            steps_per_epoch: 10,
            learning_rate: StepDecay::default(),
            weights: LossWeights::default(),
            initial_subdomains: 11,
            split_threshold: 1e-3,
            max_splits: 0,
            eval_batches: 8,
            warm_start: true,
            seed: 0,
            architecture: Architecture::paper(),
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            designs: 16,
            initial_subdomains: 3,
            max_splits: 12,
            architecture: Architecture::desk(),
            epochs: 600,
            ..TrainConfig::paper()
        }
    }

    pub fn steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("designs", self.designs),
            ("collocation", self.collocation),
            ("boundary_points", self.boundary_points),
            ("ic_points", self.ic_points),
            ("initial_subdomains", self.initial_subdomains),
            ("eval_batches", self.eval_batches),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.ic_points < 2 {
            return Err(Error::Config("ic_points must be at least 2".into()));
        }
        let w = &self.weights;
        if !(w.ic > 0.0 && w.bc > 0.0 && w.phys > 0.0) {
            return Err(Error::Config(format!("loss weights must be positive, got {w:?}")));
        }
        let lr = &self.learning_rate;
        if !(lr.base > 0.0 && lr.decay > 0.0 && lr.interval > 0) {
            return Err(Error::Config(format!("invalid learning-rate schedule {lr:?}")));
        }
        if self.split_threshold.is_nan() || self.split_threshold < 0.0 {
            return Err(Error::Config("split threshold must be non-negative".into()));
        }
        self.architecture.validate()
    }

    /// Local `ẑ` grid of the initial condition.
    pub fn ic_grid(&self) -> Vec<f64> {
        let n = self.ic_points;
        (0..n).map(|j| -1.0 + 2.0 * j as f64 / (n - 1) as f64).collect()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossComponents,
}

/// One training run on one span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptReport {
    pub span: (f64, f64),
    pub steps: usize,
    pub history: Vec<LossRecord>,
    /// Loss averaged over the evaluation batches after training.
    pub eval: LossComponents,
    /// Mean squared mismatch to the initial-condition targets (network units),
    /// summed over the three operators.
    pub ic_mismatch: f64,
    /// False when the span was bisected afterwards.
    pub accepted: bool,
}

/// Progress of a sequential run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub accepted: Vec<Subdomain>,
    /// Spans still to train, in order.
    pub pending: Vec<(f64, f64)>,
    pub splits_used: usize,
    pub warnings: Vec<String>,
    /// Bisected attempts whose halves are still pending; a half starts from
    /// its parent's networks restricted to it.
    pub parents: Vec<Subdomain>,
}

impl TrainState {
    pub fn initial(cfg: &TrainConfig) -> Self {
        let n = cfg.initial_subdomains;
        let edges: Vec<f64> = (0..=n).map(|k| if k == n { 1.0 } else { k as f64 / n as f64 }).collect();
        TrainState {
            accepted: Vec::new(),
            pending: edges.windows(2).map(|w| (w[0], w[1])).collect(),
            splits_used: 0,
            warnings: Vec::new(),
            parents: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.pending.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub attempts: Vec<AttemptReport>,
    pub splits_used: usize,
    pub warnings: Vec<String>,
}

/// Hooks for persisting progress.
pub trait TrainObserver {
    fn on_attempt(&mut self, _report: &AttemptReport) -> Result<()> {
        Ok(())
    }

    fn on_accept(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finaliser
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed tied to the run seed and the span, so resumed runs draw the same
/// batches as uninterrupted ones.
fn span_seed(seed: u64, span: (f64, f64), salt: u64) -> u64 {
    mix(mix(mix(seed ^ salt).wrapping_add(span.0.to_bits())).wrapping_add(span.1.to_bits()))
}

const SALT_TRAIN: u64 = 0x7472_6169_6e00_0000;
const SALT_EVAL: u64 = 0x6576_616c_0000_0000;
const SALT_INIT: u64 = 0x696e_6974_0000_0000;

/// Global initial condition on the `ẑ` grid.
pub fn initial_targets(problem: &SurrogateProblem, designs: usize, z_hat: &[f64]) -> IcTargets {
    let n = designs * z_hat.len();
    let t = OutputScaler::TEMPERATURE.to_network(problem.initial_temp_c);
    let a = OutputScaler::DOC.to_network(problem.alpha_initial);
    IcTargets {
        z_hat: z_hat.to_vec(),
        values: [vec![t; n], vec![t; n], vec![a; n]],
    }
}

/// Predictions of `sub` at its end time, the initial condition of its successor.
pub fn end_targets(sub: &Subdomain, problem: &SurrogateProblem, designs: &[DesignVector], z_hat: &[f64]) -> Result<IcTargets> {
    let ctx = Context::new(problem, designs)?;
    end_targets_ctx(sub, &ctx, z_hat)
}

fn end_targets_ctx(sub: &Subdomain, ctx: &Context, z_hat: &[f64]) -> Result<IcTargets> {
    let n = z_hat.len();
    let index: Vec<usize> = (0..ctx.len()).flat_map(|d| std::iter::repeat(d).take(n)).collect();
    let coords: Vec<f64> = (0..ctx.len()).flat_map(|_| z_hat.iter().flat_map(|&z| [1.0, z])).collect();
    let mut values: [Vec<f64>; 3] = Default::default();
    for v in Variable::ALL {
        let out = sub.operator(v).net.evaluate(&ctx.table, &index, &coords, &[], None)?;
        values[v.index()] = out.data;
    }
    Ok(IcTargets {
        z_hat: z_hat.to_vec(),
        values,
    })
}

/// Forward-only loss of `nets` on one batch.
fn evaluate_loss(nets: &[DeepOnet; 3], span: (f64, f64), ctx: &Context, batch: &Batch, ic: &IcBatch, w: &LossWeights) -> LossComponents {
    let mut tape = Tape::new();
    let bound = nets.each_ref().map(|n| n.bind(&mut tape, false));
    let designs = tape.constant(ctx.table.clone());
    let vars = record_losses(&mut tape, &bound, designs, span, ctx, batch, ic, w);
    vars.values(&tape)
}

/// Trains the three operators of one span from `init`.
pub fn train_subdomain(
    problem: &SurrogateProblem,
    designs: &[DesignVector],
    span: (f64, f64),
    init: [DeepOnet; 3],
    ic: &IcTargets,
    cfg: &TrainConfig,
) -> Result<(Subdomain, AttemptReport)> {
    let ctx = Context::new(problem, designs)?;
    fit_span(&ctx, span, init, ic, cfg)
}

fn fit_span(ctx: &Context, span: (f64, f64), mut nets: [DeepOnet; 3], ic: &IcTargets, cfg: &TrainConfig) -> Result<(Subdomain, AttemptReport)> {
    if !(0.0 <= span.0 && span.0 < span.1 && span.1 <= 1.0) {
        return Err(Error::Config(format!("invalid span {span:?}")));
    }
    let ic_batch = IcBatch::new(ic, ctx.len())?;
    let shapes: Vec<usize> = nets.iter().flat_map(|n| n.params()).map(|p| p.len()).collect();
    let mut adam = AdamState::new(&shapes, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(span_seed(cfg.seed, span, SALT_TRAIN));
    let steps = cfg.steps();
    let mut history = Vec::with_capacity(steps);

    for step in 0..steps {
        let batch = Batch::sample(ctx, span, cfg.collocation, cfg.boundary_points, &mut rng);
        let mut tape = Tape::new();
        let bound = nets.each_ref().map(|n| n.bind(&mut tape, true));
        let designs = tape.constant(ctx.table.clone());
        let vars = record_losses(&mut tape, &bound, designs, span, ctx, &batch, &ic_batch, &cfg.weights);
        let loss = vars.values(&tape);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "span [{:.6}, {:.6}] step {step}: loss {loss:?}",
                span.0, span.1
            )));
        }
        let g = tape.backward(vars.total)?;
        let grads: Vec<Vec<f64>> = bound.iter().flat_map(|b| b.grads(&tape, &g)).collect();
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "span [{:.6}, {:.6}] step {step}: non-finite parameter gradient (loss {})",
                span.0, span.1, loss.total
            )));
        }
        history.push(LossRecord {
            step,
            lr: adam.current_rate(),
            loss,
        });
        let mut params: Vec<&mut Vec<f64>> = nets.iter_mut().flat_map(|n| n.params_mut()).collect();
        adam.step(&mut params, &grads)?;
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(span_seed(cfg.seed, span, SALT_EVAL));
    let mut eval = LossComponents::default();
    let k = cfg.eval_batches;
    for _ in 0..k {
        let batch = Batch::sample(ctx, span, cfg.collocation, cfg.boundary_points, &mut eval_rng);
        let l = evaluate_loss(&nets, span, ctx, &batch, &ic_batch, &cfg.weights);
        eval.accumulate(&l, 1.0 / k as f64);
    }
    if !eval.is_finite() {
        return Err(Error::Diverged(format!("span [{:.6}, {:.6}]: evaluation loss {eval:?}", span.0, span.1)));
    }

    let [tc, tt, al] = nets;
    let op = |variable: Variable, net: DeepOnet| SubPidon {
        variable,
        span,
        net,
        scaler: variable.scaler(),
    };
    let sub = Subdomain {
        span,
        operators: [
            op(Variable::PartTemperature, tc),
            op(Variable::ToolTemperature, tt),
            op(Variable::DegreeOfCure, al),
        ],
    };
    let report = AttemptReport {
        span,
        steps,
        history,
        ic_mismatch: eval.ic_sum(),
        eval,
        accepted: true,
    };
    Ok((sub, report))
}

fn fresh_nets(cfg: &TrainConfig, span: (f64, f64)) -> Result<[DeepOnet; 3]> {
    let seed = span_seed(cfg.seed, span, SALT_INIT);
    Ok([
        DeepOnet::init(&cfg.architecture, mix(seed))?,
        DeepOnet::init(&cfg.architecture, mix(seed ^ 1))?,
        DeepOnet::init(&cfg.architecture, mix(seed ^ 2))?,
    ])
}

/// Training designs of a configuration.
pub fn training_designs(problem: &SurrogateProblem, cfg: &TrainConfig) -> Vec<DesignVector> {
    sample_designs(&problem.bounds, cfg.designs, cfg.design_seed)
}

/// Trains a full model from scratch.
pub fn train_all(
    problem: &SurrogateProblem,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(PidonModel, TrainReport)> {
    resume(problem, cfg, TrainState::initial(cfg), observer)
}

/// Continues a run from `state`; spans already accepted are not retrained.
pub fn resume(
    problem: &SurrogateProblem,
    cfg: &TrainConfig,
    mut state: TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<(PidonModel, TrainReport)> {
    problem.validate()?;
    cfg.validate()?;
    let designs = training_designs(problem, cfg);
    let ctx = Context::new(problem, &designs)?;
    let z_hat = cfg.ic_grid();
    let mut attempts = Vec::new();

    while let Some(&span) = state.pending.first() {
        let parent = state
            .parents
            .iter()
            .filter(|p| p.span.0 <= span.0 && span.1 <= p.span.1)
            .min_by(|a, b| (a.span.1 - a.span.0).total_cmp(&(b.span.1 - b.span.0)));
        let (init, ic) = match state.accepted.last() {
            Some(prev) => {
                let init = if let Some(p) = parent {
                    p.restricted_nets(span)
                } else if cfg.warm_start {
                    prev.operators.clone().map(|o| o.net)
                } else {
                    fresh_nets(cfg, span)?
                };
                (init, end_targets_ctx(prev, &ctx, &z_hat)?)
            }
            None => {
                let init = match parent {
                    Some(p) => p.restricted_nets(span),
                    None => fresh_nets(cfg, span)?,
                };
                (init, initial_targets(problem, ctx.len(), &z_hat))
            }
        };
        let (sub, mut report) = fit_span(&ctx, span, init, &ic, cfg)?;
        state.pending.remove(0);
        let above = report.eval.total > cfg.split_threshold;
        if above && state.splits_used < cfg.max_splits {
            let mid = 0.5 * (span.0 + span.1);
            state.pending.insert(0, (mid, span.1));
            state.pending.insert(0, (span.0, mid));
            state.splits_used += 1;
            state.parents.push(sub);
            report.accepted = false;
            log::info!(
                "span [{:.5}, {:.5}] loss {:.3e} above threshold, bisecting",
                span.0,
                span.1,
                report.eval.total
            );
            observer.on_attempt(&report)?;
            attempts.push(report);
            continue;
        }
        if above {
            let msg = format!(
                "span [{:.6}, {:.6}] kept with loss {:.3e} above the threshold {:.3e}: split budget of {} exhausted",
                span.0, span.1, report.eval.total, cfg.split_threshold, cfg.max_splits
            );
            log::warn!("{msg}");
            state.warnings.push(msg);
        }
        observer.on_attempt(&report)?;
        attempts.push(report);
        state.accepted.push(sub);
        let pending = &state.pending;
        state
            .parents
            .retain(|p| pending.iter().any(|s| p.span.0 <= s.0 && s.1 <= p.span.1));
        observer.on_accept(&state)?;
    }

    let model = PidonModel {
        problem: problem.clone(),
        architecture: cfg.architecture.clone(),
        subdomains: state.accepted,
        config: serde_json::to_value(cfg)?,
        warnings: state.warnings.clone(),
    };
    model.validate()?;
    Ok((
        model,
        TrainReport {
            attempts,
            splits_used: state.splits_used,
            warnings: state.warnings,
        },
    ))
}

/// Mean squared mismatch (network units, summed over operators) between
/// each subdomain's start and its predecessor's end, on the training designs.
pub fn boundary_mismatch(model: &PidonModel, designs: &[DesignVector], z_hat: &[f64]) -> Result<Vec<f64>> {
    let ctx = Context::new(&model.problem, designs)?;
    let n = z_hat.len();
    let index: Vec<usize> = (0..ctx.len()).flat_map(|d| std::iter::repeat(d).take(n)).collect();
    let coords: Vec<f64> = (0..ctx.len()).flat_map(|_| z_hat.iter().flat_map(|&z| [-1.0, z])).collect();
    let mut out = Vec::new();
    for pair in model.subdomains.windows(2) {
        let prev = end_targets_ctx(&pair[0], &ctx, z_hat)?;
        let mut total = 0.0;
        for v in Variable::ALL {
            let start = pair[1].operator(v).net.evaluate(&ctx.table, &index, &coords, &[], None)?;
            let target = &prev.values[v.index()];
            total += start.data.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / target.len() as f64;
        }
        out.push(total);
    }
    Ok(out)
}
