//! Objective arithmetic, the surrogate objective's derivatives, optimizer
//! behaviour on an analytic stub, call accounting and the oracle check.

use curedesign_core::cure_cycle::{
    clip_design, denormalize_design, normalize_design, DesignBounds, DesignVector, NUM_DESIGN_VARS,
};
use curedesign_core::design_opt::*;
use curedesign_core::fd_sim::SimOptions;
use curedesign_core::material::MaterialCard;
use curedesign_core::pidon::{
    Architecture, DeepOnet, PidonModel, SubPidon, Subdomain, SurrogateProblem, Variable,
};
use curedesign_core::Result;

fn fields(alpha: &[f64], temps: &[f64], air: &[f64]) -> ObjectiveFields {
    ObjectiveFields {
        end_alpha: alpha.to_vec(),
        end_alpha_gradient: vec![0.0; alpha.len()],
        temperature_c: temps.to_vec(),
        air_c: air.to_vec(),
    }
}

#[test]
fn doc_window_piecewise() {
    assert_eq!(doc_window_loss(&[0.88, 0.9, 0.93], 0.85, 0.95), 0.0);
    assert!((doc_window_loss(&[0.80, 0.9], 0.85, 0.95) - 0.05).abs() < 1e-15);
    assert!((doc_window_loss(&[0.9, 0.97], 0.85, 0.95) - 0.02).abs() < 1e-15);
    // the low side takes precedence when both are violated
    assert!((doc_window_loss(&[0.7, 0.99], 0.85, 0.95) - 0.15).abs() < 1e-15);
}

#[test]
fn exotherm_and_lag_piecewise() {
    assert_eq!(exotherm_loss(&[150.0, 190.0, 170.0], 185.0), 5.0);
    assert_eq!(exotherm_loss(&[150.0, 180.0], 185.0), 0.0);
    // excess lag averaged over all points, not only the violating ones
    assert_eq!(lag_loss(&[100.0, 100.0, 100.0, 100.0], &[70.0, 90.0, 100.0, 110.0], 20.0), 2.5);
    assert_eq!(lag_loss(&[20.0; 5], &[20.0; 5], 20.0), 0.0);
    assert_eq!(axial_gradient_loss(&[1.0, -3.0]), 2.0);
}

#[test]
fn all_terms_vanish_inside_the_windows() {
    let cfg = ObjectiveConfig::default();
    let f = fields(&[0.86, 0.9, 0.94], &[120.0, 185.0, 150.0], &[130.0, 200.0, 170.0]);
    assert_eq!(f.terms(&cfg), [0.0; 4]);
    let m = f.metrics();
    assert_eq!(m.min_end_alpha, 0.86);
    assert_eq!(m.max_temperature_c, 185.0);
    assert_eq!(m.max_thermal_lag_c, 20.0);
}

#[test]
fn breakdown_normalises_by_initial_terms() {
    let init = [0.05, 2.0, 0.0, 3.0];
    let norm = normalization_from(&init);
    assert_eq!(norm, [0.05, 2.0, 1.0, 3.0]);
    let b = ObjectiveBreakdown::new(init, norm, RawMetrics::default());
    assert!((b.total - 3.0).abs() < 1e-15);
}

fn card() -> MaterialCard {
    MaterialCard::as4_8552_invar()
}

fn reduced_bounds() -> DesignBounds {
    let mid = DesignBounds::default().midpoint().to_array();
    let (mut lo, mut hi) = (mid, mid);
    lo[5] = 175.0;
    hi[5] = 185.0;
    lo[6] = 70.0;
    hi[6] = 120.0;
    DesignBounds::new(lo, hi).unwrap()
}

fn small_arch() -> Architecture {
    Architecture {
        branch: vec![6, 6],
        trunk: vec![6, 6],
        decoder: vec![6],
    }
}

/// Untrained model with two subdomains over the full design space.
fn random_model(seed: u64) -> PidonModel {
    let problem = SurrogateProblem::new(card(), DesignBounds::default(), 0.02);
    let arch = small_arch();
    let spans = [(0.0, 0.4), (0.4, 1.0)];
    let subdomains = spans
        .iter()
        .enumerate()
        .map(|(k, &span)| Subdomain {
            span,
            operators: Variable::ALL.map(|v| SubPidon {
                variable: v,
                span,
                net: DeepOnet::init(&arch, seed + 10 * k as u64 + v.index() as u64).unwrap(),
                scaler: v.scaler(),
            }),
        })
        .collect();
    let model = PidonModel {
        problem,
        architecture: arch,
        subdomains,
        config: serde_json::Value::Null,
        warnings: Vec::new(),
    };
    model.validate().unwrap();
    model
}

fn paper_guess() -> DesignVector {
    DesignVector::from_slice(&[2.5, 1.5, 56.0, 117.0, 112.0, 176.0, 75.0, 100.0, 2.2])
        .map(|u| clip_design(&u, &DesignBounds::default()))
        .unwrap()
}

#[test]
fn axial_gradient_matches_central_differences() {
    let model = random_model(3);
    let u = paper_guess();
    let n_z = 20;
    let fast = axial_doc_gradient(&model, &u, n_z).unwrap();
    let l_c = model.problem.part_thickness;
    let h = 1e-5;
    let mut sum = 0.0;
    for j in 0..n_z {
        let x = j as f64 / (n_z - 1) as f64;
        // one-sided second-order stencils at the surfaces
        let d = if j == 0 {
            let v = model.evaluate(&u, Variable::DegreeOfCure, &[(1.0, x), (1.0, x + h), (1.0, x + 2.0 * h)]).unwrap();
            (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
        } else if j == n_z - 1 {
            let v = model.evaluate(&u, Variable::DegreeOfCure, &[(1.0, x), (1.0, x - h), (1.0, x - 2.0 * h)]).unwrap();
            (3.0 * v[0] - 4.0 * v[1] + v[2]) / (2.0 * h)
        } else {
            let v = model.evaluate(&u, Variable::DegreeOfCure, &[(1.0, x - h), (1.0, x + h)]).unwrap();
            (v[1] - v[0]) / (2.0 * h)
        };
        sum += (d / l_c).abs();
    }
    let fd = sum / n_z as f64;
    assert!((fast - fd).abs() <= 1e-4 * fd.abs(), "{fast} vs {fd}");
}

#[test]
fn constant_doc_field_has_zero_axial_gradient() {
    let mut model = random_model(5);
    for sub in &mut model.subdomains {
        let trunk = &mut sub.operators[Variable::DegreeOfCure.index()].net.trunk;
        let last = trunk.layers.last_mut().unwrap();
        last.weight.data.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let g = axial_doc_gradient(&model, &paper_guess(), 20).unwrap();
    assert_eq!(g, 0.0);
}

#[test]
fn surrogate_fields_match_plain_evaluation() {
    let model = random_model(7);
    let u = paper_guess();
    let cfg = ObjectiveConfig {
        n_z: 5,
        n_t: 7,
        ..ObjectiveConfig::default()
    };
    let obj = PidonObjective::new(&model, cfg).unwrap();
    let f = obj.fields(&u).unwrap();
    let mut queries = Vec::new();
    for i in 0..7 {
        for j in 0..5 {
            queries.push((i as f64 / 6.0, j as f64 / 4.0));
        }
    }
    let plain = model.evaluate(&u, Variable::PartTemperature, &queries).unwrap();
    for (a, b) in f.temperature_c.iter().zip(&plain) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
    let end: Vec<(f64, f64)> = (0..5).map(|j| (1.0, j as f64 / 4.0)).collect();
    let alpha = model.evaluate(&u, Variable::DegreeOfCure, &end).unwrap();
    for (a, b) in f.end_alpha.iter().zip(&alpha) {
        assert!((a - b).abs() <= 1e-12);
    }
}

/// Total with the air temperature scaled so that every term is active.
fn fd_config() -> ObjectiveConfig {
    ObjectiveConfig {
        n_z: 6,
        n_t: 9,
        alpha_min: 0.99,
        alpha_max: 1.0,
        max_temperature_c: 100.0,
        max_lag_c: -40.0,
        ..ObjectiveConfig::default()
    }
}

#[test]
fn design_gradient_matches_central_differences() {
    let model = random_model(11);
    let obj = PidonObjective::new(&model, fd_config()).unwrap();
    let b = DesignBounds::default();
    let u = DesignVector::from_slice(&[2.5, 1.5, 56.0, 117.0, 112.0, 176.0, 75.0, 80.0, 2.2]).unwrap();
    let (e, g) = obj.evaluate_with_gradient(&u, None).unwrap();
    assert!(e.terms.iter().all(|&t| t > 0.0), "{:?}", e.terms);
    let norm = normalization_from(&e.terms);
    let total = |u: &DesignVector| ObjectiveBreakdown::new(obj.evaluate(u).unwrap().terms, norm, RawMetrics::default()).total;
    let x0 = normalize_design(&u, &b);
    for i in 0..NUM_DESIGN_VARS {
        let h = 1e-6;
        let (mut xp, mut xm) = (x0, x0);
        xp[i] += h;
        xm[i] -= h;
        let dx = (total(&denormalize_design(&xp, &b)) - total(&denormalize_design(&xm, &b))) / (2.0 * h);
        let slope = 2.0 / (b.upper[i] - b.lower[i]);
        let analytic = g[i] / slope;
        assert!(
            (analytic - dx).abs() <= 1e-4 * dx.abs().max(1e-3),
            "var {i}: {analytic} vs {dx}"
        );
    }
}

#[test]
fn out_of_bounds_design_is_refused() {
    let model = random_model(1);
    let obj = PidonObjective::new(&model, ObjectiveConfig::default()).unwrap();
    let mut a = paper_guess().to_array();
    a[5] = 200.0;
    let u = DesignVector::from_slice(&a).unwrap();
    assert!(obj.evaluate(&u).is_err());
}

#[test]
fn surrogate_objective_is_deterministic() {
    let model = random_model(2);
    let obj = PidonObjective::new(&model, ObjectiveConfig::default()).unwrap();
    let u = paper_guess();
    let a = obj.evaluate_with_gradient(&u, None).unwrap();
    let b = obj.evaluate_with_gradient(&u, None).unwrap();
    assert_eq!(a, b);
}

/// `Σ (x − c)²` in normalised coordinates, reported as the first term.
struct Quadratic {
    bounds: DesignBounds,
    centre: [f64; NUM_DESIGN_VARS],
}

impl Quadratic {
    fn new(bounds: DesignBounds) -> Self {
        let mut centre = [0.0; NUM_DESIGN_VARS];
        for (i, c) in centre.iter_mut().enumerate() {
            if !bounds.is_frozen(i) {
                *c = 0.6 * ((i as f64) * 0.7).sin();
            }
        }
        Quadratic { bounds, centre }
    }

    fn value(&self, u: &DesignVector) -> f64 {
        let x = normalize_design(u, &self.bounds);
        x.iter().zip(&self.centre).map(|(a, c)| (a - c).powi(2)).sum()
    }

    fn optimum(&self) -> DesignVector {
        denormalize_design(&self.centre, &self.bounds)
    }
}

impl Surrogate for Quadratic {
    fn bounds(&self) -> &DesignBounds {
        &self.bounds
    }

    fn evaluate(&self, u: &DesignVector) -> Result<Evaluation> {
        Ok(Evaluation {
            terms: [self.value(u), 0.0, 0.0, 0.0],
            metrics: RawMetrics::default(),
        })
    }

    fn evaluate_with_gradient(
        &self,
        u: &DesignVector,
        norm: Option<&[f64; NUM_TERMS]>,
    ) -> Result<(Evaluation, [f64; NUM_DESIGN_VARS])> {
        let e = self.evaluate(u)?;
        let n = norm.copied().unwrap_or_else(|| normalization_from(&e.terms));
        let x = normalize_design(u, &self.bounds);
        let mut g = [0.0; NUM_DESIGN_VARS];
        for i in 0..NUM_DESIGN_VARS {
            if !self.bounds.is_frozen(i) {
                let slope = 2.0 / (self.bounds.upper[i] - self.bounds.lower[i]);
                g[i] = 2.0 * (x[i] - self.centre[i]) * slope / n[0];
            }
        }
        Ok((e, g))
    }
}

fn within(u: &DesignVector, b: &DesignBounds) -> bool {
    b.contains(u)
}

#[test]
fn adam_counts_three_calls_per_iteration_and_converges() {
    let q = Quadratic::new(DesignBounds::default());
    let cfg = GradientConfig {
        tolerance: 0.0,
        ..GradientConfig::default()
    };
    let tr = optimize_adam(&q, &DesignBounds::default().midpoint(), &cfg).unwrap();
    assert_eq!(tr.rows.len(), 180);
    for (k, r) in tr.rows.iter().enumerate() {
        assert_eq!(r.calls.total(), 3 * (k as u64 + 1));
        assert_eq!(r.calls.forward, k as u64 + 1);
        assert!(within(&r.design, &q.bounds));
    }
    assert!(tr.best.total < 1e-3 * tr.rows[0].breakdown.total, "{}", tr.best.total);
}

#[test]
fn nadam_converges_and_clips() {
    // optimum outside the box along every free direction
    let b = DesignBounds::default();
    let mut q = Quadratic::new(b.clone());
    q.centre = [1.5; NUM_DESIGN_VARS];
    let tr = optimize_nadam(&q, &b.midpoint(), &GradientConfig::default()).unwrap();
    assert!(tr.rows.iter().all(|r| within(&r.design, &b)));
    let last = tr.rows.last().unwrap().design.to_array();
    for i in 0..NUM_DESIGN_VARS {
        assert!((last[i] - b.upper[i]).abs() < 1e-9 * b.upper[i].abs().max(1.0), "var {i}");
    }
}

#[test]
fn plateau_schedule_halves_with_floor() {
    // a flat objective never improves, so the rate halves every 10 iterations
    struct Flat(DesignBounds);
    impl Surrogate for Flat {
        fn bounds(&self) -> &DesignBounds {
            &self.0
        }
        fn evaluate(&self, _: &DesignVector) -> Result<Evaluation> {
            Ok(Evaluation {
                terms: [1.0, 0.0, 0.0, 0.0],
                metrics: RawMetrics::default(),
            })
        }
        fn evaluate_with_gradient(
            &self,
            u: &DesignVector,
            _: Option<&[f64; NUM_TERMS]>,
        ) -> Result<(Evaluation, [f64; NUM_DESIGN_VARS])> {
            Ok((self.evaluate(u)?, [0.0; NUM_DESIGN_VARS]))
        }
    }
    let s = Flat(DesignBounds::default());
    let u0 = s.0.midpoint();
    let tr = optimize_adam(&s, &u0, &GradientConfig::default()).unwrap();
    let lrs: Vec<f64> = tr.rows.iter().map(|r| r.lr.unwrap()).collect();
    assert_eq!(lrs[0], 0.01);
    assert_eq!(lrs[10], 0.01);
    assert_eq!(lrs[11], 0.005);
    assert_eq!(lrs[21], 0.0025);
    assert_eq!(*lrs.last().unwrap(), 1e-5);
    // zero gradient leaves the design unchanged
    assert!(tr.rows.iter().all(|r| r.design == u0));
}

#[test]
fn nan_gradient_aborts_with_partial_trace() {
    struct Bad(DesignBounds);
    impl Surrogate for Bad {
        fn bounds(&self) -> &DesignBounds {
            &self.0
        }
        fn evaluate(&self, _: &DesignVector) -> Result<Evaluation> {
            Ok(Evaluation {
                terms: [1.0, 0.0, 0.0, 0.0],
                metrics: RawMetrics::default(),
            })
        }
        fn evaluate_with_gradient(
            &self,
            u: &DesignVector,
            _: Option<&[f64; NUM_TERMS]>,
        ) -> Result<(Evaluation, [f64; NUM_DESIGN_VARS])> {
            Ok((self.evaluate(u)?, [f64::NAN; NUM_DESIGN_VARS]))
        }
    }
    let s = Bad(DesignBounds::default());
    let tr = optimize_adam(&s, &s.0.midpoint(), &GradientConfig::default()).unwrap();
    assert_eq!(tr.rows.len(), 1);
    assert!(tr.aborted.is_some());
}

#[test]
fn start_outside_bounds_is_clipped() {
    let b = DesignBounds::default();
    let q = Quadratic::new(b.clone());
    let mut a = b.midpoint().to_array();
    a[0] = 10.0;
    let tr = optimize_adam(&q, &DesignVector::from_slice(&a).unwrap(), &GradientConfig::default()).unwrap();
    assert!(tr.clipped_start);
    assert_eq!(tr.rows[0].design.r1, b.upper[0]);
}

#[test]
fn pso_counts_and_finds_the_quadratic_minimum() {
    let q = Quadratic::new(reduced_bounds());
    let cfg = PsoConfig::default();
    let tr = optimize_pso(&q, &cfg, None).unwrap();
    assert_eq!(tr.rows.len(), 25);
    for (k, r) in tr.rows.iter().enumerate() {
        assert_eq!(r.calls.total(), 2 * 20 * (k as u64 + 1));
        assert!(within(&r.design, &q.bounds));
    }
    assert!(q.value(&tr.best_design) < 1e-2, "{}", q.value(&tr.best_design));
}

#[test]
fn pso_particle_at_optimum_stays() {
    let q = Quadratic::new(DesignBounds::default());
    let cfg = PsoConfig {
        particles: 1,
        ..PsoConfig::default()
    };
    let start = [q.optimum()];
    let tr = optimize_pso(&q, &cfg, Some(&start)).unwrap();
    for r in &tr.rows {
        assert!(q.value(&r.design) < 1e-24);
    }
}

#[test]
fn ga_elitism_keeps_best_non_increasing() {
    let q = Quadratic::new(DesignBounds::default());
    let cfg = GaConfig {
        population: 30,
        generations: 40,
        seed: 4,
        ..GaConfig::default()
    };
    let tr = optimize_ga(&q, &cfg, None).unwrap();
    for w in tr.rows.windows(2) {
        assert!(w[1].breakdown.total <= w[0].breakdown.total);
    }
    for (k, r) in tr.rows.iter().enumerate() {
        assert_eq!(r.calls.total(), 2 * 30 * (k as u64 + 1));
        assert!(within(&r.design, &q.bounds));
    }
}

/// Records every design it is asked about.
struct Spy {
    inner: Quadratic,
    seen: std::sync::Mutex<Vec<DesignVector>>,
}

impl Surrogate for Spy {
    fn bounds(&self) -> &DesignBounds {
        self.inner.bounds()
    }
    fn evaluate(&self, u: &DesignVector) -> Result<Evaluation> {
        self.seen.lock().unwrap().push(*u);
        self.inner.evaluate(u)
    }
    fn evaluate_with_gradient(
        &self,
        u: &DesignVector,
        norm: Option<&[f64; NUM_TERMS]>,
    ) -> Result<(Evaluation, [f64; NUM_DESIGN_VARS])> {
        self.seen.lock().unwrap().push(*u);
        self.inner.evaluate_with_gradient(u, norm)
    }
}

#[test]
fn ga_without_variation_is_static() {
    let b = DesignBounds::default();
    let cfg = GaConfig {
        population: 8,
        generations: 5,
        elitism: 1.0,
        mutation: 0.0,
        crossover: 0.0,
        seed: 9,
        ..GaConfig::default()
    };
    let spy = Spy {
        inner: Quadratic::new(b.clone()),
        seen: Default::default(),
    };
    optimize_ga(&spy, &cfg, None).unwrap();
    let seen = spy.seen.into_inner().unwrap();
    let first: Vec<[f64; NUM_DESIGN_VARS]> = seen[..8].iter().map(|u| u.to_array()).collect();
    for gen in seen.chunks(8) {
        let mut a: Vec<[f64; NUM_DESIGN_VARS]> = gen.iter().map(|u| u.to_array()).collect();
        let mut f = first.clone();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        f.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, f);
    }
}

#[test]
fn every_evaluated_individual_is_within_bounds() {
    let b = reduced_bounds();
    let spy = Spy {
        inner: Quadratic::new(b.clone()),
        seen: Default::default(),
    };
    optimize_ga(&spy, &GaConfig { population: 20, generations: 10, ..GaConfig::default() }, None).unwrap();
    optimize_pso(&spy, &PsoConfig::default(), None).unwrap();
    let seen = spy.seen.into_inner().unwrap();
    assert_eq!(seen.len(), 20 * 10 + 20 * 25);
    assert!(seen.iter().all(|u| b.contains(u)));
}

#[test]
fn population_methods_are_deterministic_and_job_independent() {
    let q = Quadratic::new(DesignBounds::default());
    let a = optimize_pso(&q, &PsoConfig { seed: 3, ..PsoConfig::default() }, None).unwrap();
    let b = optimize_pso(&q, &PsoConfig { seed: 3, jobs: 4, ..PsoConfig::default() }, None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    let g1 = optimize_ga(&q, &GaConfig { population: 16, generations: 6, seed: 1, ..GaConfig::default() }, None).unwrap();
    let g2 = optimize_ga(&q, &GaConfig { population: 16, generations: 6, seed: 1, jobs: 3, ..GaConfig::default() }, None).unwrap();
    assert_eq!(serde_json::to_string(&g1).unwrap(), serde_json::to_string(&g2).unwrap());
    let g3 = optimize_ga(&q, &GaConfig { population: 16, generations: 6, seed: 2, ..GaConfig::default() }, None).unwrap();
    assert_ne!(g1.rows, g3.rows);
}

#[test]
fn trace_csv_has_one_row_per_iteration() {
    let q = Quadratic::new(DesignBounds::default());
    let tr = optimize_adam(&q, &DesignBounds::default().midpoint(), &GradientConfig { iterations: 4, ..GradientConfig::default() }).unwrap();
    let csv = tr.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("iteration,r1,r2,hd1,hd2,ht1,ht2,h_top,h_bot,L_t,L1,L2,L3,L4,total,lr,"));
}

#[test]
fn oracle_on_inert_material_flags_undercure() {
    let mut inert = card().inert();
    inert.kinetics.pre_exponential = 1e-300;
    let opts = SimOptions {
        dt: 5.0,
        dz: 0.004,
        ..SimOptions::default()
    };
    let u = DesignBounds::default().midpoint();
    let b = verify_on_oracle(&inert, &u, &opts, &ObjectiveConfig::default(), None).unwrap();
    assert!((b.metrics.min_end_alpha - 0.05).abs() < 1e-12);
    assert!((b.metrics.max_end_alpha - 0.05).abs() < 1e-12);
    assert!((b.terms[0] - 0.80).abs() < 1e-12);
    assert!(b.metrics.mean_axial_gradient.abs() < 1e-12);
    assert!(b.metrics.max_temperature_c < u.ht2 + 1e-6);
    // both in °C: the part trails the air by tens of degrees at most
    assert!(b.metrics.mean_thermal_lag_c > 0.0 && b.metrics.mean_thermal_lag_c < 40.0);
    assert!(b.metrics.max_thermal_lag_c < 120.0);
}

#[test]
fn oracle_flags_a_hot_aggressive_cycle() {
    let b = DesignBounds::default();
    let mut a = b.midpoint().to_array();
    a[0] = b.upper[0];
    a[5] = b.upper[5];
    a[8] = b.lower[8];
    let u = DesignVector::from_slice(&a).unwrap();
    let opts = SimOptions {
        dt: 2.0,
        ..SimOptions::default()
    };
    let r = verify_on_oracle(&card(), &u, &opts, &ObjectiveConfig::default(), None).unwrap();
    assert!(r.terms[2] > 0.0, "max T {}", r.metrics.max_temperature_c);
}
