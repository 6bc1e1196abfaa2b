//! Production planning: maximize a profit level that the revenue under a
//! GP-modeled price-supply curve must reach with a given confidence.
//!
//! Revenue `sum_t (p(x_t) - c_t) x_t >= psi` is put into the `<= b` template
//! through the negated price model: `sum_t (-p(x_t)) x_t <= -psi - c^T x`.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use wgpro_core::exec::{map_ordered, stream_rng, Execution};
use wgpro_core::gp::{fit_hyperparameters_with, FitOptions, TrainingData};
use wgpro_core::innermax::{bilevel_fallback, verify_robust_feasibility, Cut, InnerInstance, RobustOuterProgram};
use wgpro_core::nlp::{multistart_with, MultistartOptions, NlpProblem, SolveStatus};
use wgpro_core::posterior::{bisect_alpha, estimate_feasibility_with, BisectionStep, EstimateOptions, PosteriorConfig};
use wgpro_core::reformulate::{
    chance_counterpart, nominal_counterpart, solve_wolfe_kkt, wolfe_counterpart, wolfe_scales, AggregateUncertainConstraint, UncertainModel,
};
use wgpro_core::smooth::{Affine, MapRef, Select};
use wgpro_core::table::{Cell, Table};
use wgpro_core::warping::{fit_warped_gp_with, WarpedGpModel};
use wgpro_core::{Error, Result};

/// Per-period production costs; instances use a prefix.
pub const COSTS: [f64; 12] = [0.1, 0.05, 0.01, 0.02, 0.1, 0.15, 0.04, 0.03, 0.1, 0.11, 0.25, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Uniform,
    Nonuniform,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::Nonuniform => "nonuniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseKind::Uniform),
            "nonuniform" => Ok(NoiseKind::Nonuniform),
            _ => Err(Error::InvalidArgument(format!("unknown noise kind '{s}'"))),
        }
    }
}

/// How `4 sigma exp(-x/2)` is read for nonuniform noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeReading {
    Variance,
    StdDev,
}

#[derive(Debug, Clone)]
pub struct PlanningInstance {
    pub costs: Vec<f64>,
    pub noise: NoiseKind,
    pub sigma_noise: f64,
    pub envelope: EnvelopeReading,
    pub n_data: usize,
    pub x_max: f64,
    pub seed: u64,
}

impl PlanningInstance {
    /// Instance with `periods` periods and the standard cost prefix.
    pub fn new(periods: usize, noise: NoiseKind, sigma_noise: f64, seed: u64) -> Result<Self> {
        if periods == 0 || periods > COSTS.len() {
            return Err(Error::InvalidArgument(format!("periods must lie in 1..={}", COSTS.len())));
        }
        Ok(Self {
            costs: COSTS[..periods].to_vec(),
            noise,
            sigma_noise,
            envelope: EnvelopeReading::Variance,
            n_data: 50,
            x_max: 3.0,
            seed,
        })
    }

    pub fn periods(&self) -> usize {
        self.costs.len()
    }

    /// Standard deviation of the price noise at supply `x`.
    pub fn noise_std(&self, x: f64) -> f64 {
        match (self.noise, self.envelope) {
            (NoiseKind::Uniform, _) => self.sigma_noise,
            (NoiseKind::Nonuniform, EnvelopeReading::Variance) => (4.0 * self.sigma_noise * (-x / 2.0).exp()).sqrt(),
            (NoiseKind::Nonuniform, EnvelopeReading::StdDev) => 4.0 * self.sigma_noise * (-x / 2.0).exp(),
        }
    }
}

/// Noise-free price-supply curve.
pub fn true_price(x: f64) -> f64 {
    (-x).exp()
}

/// Noisy observations of the price-supply curve at uniform supplies in `[0, x_max]`.
pub fn generate_dataset(inst: &PlanningInstance) -> Result<TrainingData> {
    let mut rng = stream_rng(inst.seed, 0);
    let mut xs = Vec::with_capacity(inst.n_data);
    let mut ys = Vec::with_capacity(inst.n_data);
    for _ in 0..inst.n_data {
        let x: f64 = rng.random_range(0.0..=inst.x_max);
        let e: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push(true_price(x) + inst.noise_std(x) * e);
    }
    TrainingData::from_1d(&xs, &ys)
}

/// Plain and warped surrogates of the price curve.
#[derive(Debug, Clone)]
pub struct PlanningModels {
    pub gp: UncertainModel,
    pub warped: UncertainModel,
}

pub fn fit_models(data: &TrainingData, warp_terms: usize, restarts: usize, seed: u64, exec: Execution) -> Result<PlanningModels> {
    let opts = FitOptions { restarts, seed, exec, ..Default::default() };
    let gp = fit_hyperparameters_with(data, &opts)?;
    let warped = fit_warped_gp_with(data, warp_terms, &opts)?;
    Ok(PlanningModels { gp: UncertainModel::Gp(gp), warped: UncertainModel::Warped(warped) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Nominal,
    Chance,
    Robust,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Nominal => "nominal",
            Mode::Chance => "chance",
            Mode::Robust => "robust",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Mode::Nominal),
            "chance" => Ok(Mode::Chance),
            "robust" => Ok(Mode::Robust),
            _ => Err(Error::InvalidArgument(format!("unknown mode '{s}'"))),
        }
    }
}

fn negated(model: &UncertainModel) -> UncertainModel {
    match model {
        UncertainModel::Gp(g) => UncertainModel::Gp(g.negated()),
        UncertainModel::Warped(w) => UncertainModel::Warped(w.negated()),
    }
}

/// Planning NLP over `v = (x_1..x_T, psi[, z_1..z_T, u])`, minimizing `-psi`.
#[derive(Clone)]
pub struct PlanningProblem {
    pub nlp: NlpProblem,
    pub constraint: AggregateUncertainConstraint,
    pub mode: Mode,
    pub periods: usize,
    pub costs: Vec<f64>,
}

impl PlanningProblem {
    pub fn psi_index(&self) -> usize {
        self.periods
    }

    pub fn supplies<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[..self.periods]
    }
}

/// Builds the nominal, chance-constrained or robust planning problem.
///
/// `model` is the price model (not negated). The observation predictive is
/// used, since realized prices include the noise.
pub fn build_planning_problem(inst: &PlanningInstance, model: &UncertainModel, alpha: f64, mode: Mode) -> Result<PlanningProblem> {
    match (mode, model) {
        (Mode::Chance, UncertainModel::Warped(_)) => {
            return Err(Error::InvalidArgument("chance mode needs a plain GP model".into()));
        }
        (Mode::Robust, UncertainModel::Gp(_)) => {
            return Err(Error::InvalidArgument("robust mode needs a warped GP model".into()));
        }
        _ => {}
    }
    let t = inst.periods();
    let dim = match mode {
        Mode::Robust => 2 * t + 2,
        _ => t + 1,
    };
    let neg = negated(model);
    let weights: MapRef = Select::range(0, t);
    let mut coeffs = DMatrix::zeros(1, dim);
    for (j, c) in inst.costs.iter().enumerate() {
        coeffs[(0, j)] = -c;
    }
    coeffs[(0, t)] = -1.0;
    let bound: MapRef = Affine::new(DVector::zeros(1), coeffs);
    let constraint = AggregateUncertainConstraint::new(weights.clone(), weights, bound, neg.clone(), alpha)?.with_noise(true);

    let psi_box = t as f64;
    let mut lower = vec![0.0; t];
    let mut upper = vec![inst.x_max; t];
    lower.push(-psi_box);
    upper.push(psi_box);
    if mode == Mode::Robust {
        let (ylo, yhi) = match &neg {
            UncertainModel::Warped(w) => w.y_range(),
            UncertainModel::Gp(_) => unreachable!(),
        };
        let span = (yhi - ylo).max(1e-6);
        lower.extend(std::iter::repeat_n(ylo - 5.0 * span, t));
        upper.extend(std::iter::repeat_n(yhi + 5.0 * span, t));
        lower.push(0.0);
        upper.push(1e3);
    }
    let psi = t;
    let objective = Arc::new(move |v: &[f64]| {
        let mut g = DVector::zeros(v.len());
        g[psi] = -1.0;
        Ok((-v[psi], g))
    });
    let mut nlp = NlpProblem::new(lower, upper, objective)?;
    let ineq = match mode {
        Mode::Nominal => nominal_counterpart(&constraint)?,
        Mode::Chance => chance_counterpart(&constraint)?,
        Mode::Robust => {
            let mut v_ref = vec![0.0; dim];
            v_ref[..t].fill(0.5 * inst.x_max);
            let (s1, s2) = wolfe_scales(&constraint, &v_ref)?;
            let sys = wolfe_counterpart(&constraint, Select::range(t + 1, t), Select::range(2 * t + 1, 1))?.scaled(s1, s2);
            nlp = nlp.equality(sys.equalities);
            sys.inequality
        }
    };
    nlp = nlp.inequality(ineq.clone());

    // completes a random start: worst case for the auxiliaries, then the largest feasible psi
    let hook_c = constraint.clone();
    nlp = nlp.with_start_hook(Arc::new(move |v: &mut [f64]| {
        if mode == Mode::Robust {
            if let Ok(set) = hook_c.uncertainty_set(v) {
                let x = DVector::from_column_slice(&v[..t]);
                if let Ok(sol) = solve_wolfe_kkt(&set, &x) {
                    v[t + 1..2 * t + 1].copy_from_slice(sol.z.as_slice());
                    v[2 * t + 1] = sol.u;
                }
            }
        }
        v[psi] = 0.0;
        if let Ok(e) = ineq.eval(v) {
            v[psi] = -e.scalar();
        }
    }));
    Ok(PlanningProblem { nlp, constraint, mode, periods: t, costs: inst.costs.clone() })
}

/// Solver settings shared by the planning runs.
#[derive(Debug, Clone, Copy)]
pub struct PlanningSolveOptions {
    pub multistart: MultistartOptions,
    /// Verify robust solutions by branch-and-bound and repair them by cutting planes.
    pub verify: bool,
    pub verify_tol: f64,
    pub max_rounds: usize,
}

impl Default for PlanningSolveOptions {
    fn default() -> Self {
        Self { multistart: MultistartOptions::default(), verify: true, verify_tol: 1e-2, max_rounds: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct PlanningSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub verified: Option<bool>,
    pub fallback_rounds: usize,
}

/// Multistart solve, then (robust mode) verification and cutting-plane repair.
pub fn solve_planning(p: &PlanningProblem, opts: &PlanningSolveOptions) -> Result<PlanningSolution> {
    let rep = multistart_with(&p.nlp, &opts.multistart)?;
    let v = rep.best_point().to_vec();
    let mut sol = PlanningSolution {
        x: p.supplies(&v).to_vec(),
        objective: v[p.psi_index()],
        status: rep.best.status,
        verified: None,
        fallback_rounds: 0,
    };
    if p.mode == Mode::Robust && opts.verify {
        let set = p.constraint.uncertainty_set(&v)?;
        let (x, b) = p.constraint.weights_and_bound(&v)?;
        let ok = verify_robust_feasibility(&set, &x, b, opts.verify_tol)?.is_feasible();
        sol.verified = Some(ok);
        if !ok {
            let outer = CutOuter { p, opts };
            let fb = bilevel_fallback(&outer, opts.max_rounds, opts.verify_tol)?;
            sol.x = fb.point[..p.periods].to_vec();
            sol.objective = fb.point[p.periods];
            sol.verified = Some(fb.verified);
            sol.fallback_rounds = fb.rounds;
        }
    }
    Ok(sol)
}

/// Outer problem of the cutting-plane fallback over `(x, psi)`.
struct CutOuter<'a> {
    p: &'a PlanningProblem,
    opts: &'a PlanningSolveOptions,
}

impl RobustOuterProgram for CutOuter<'_> {
    fn solve(&self, cuts: &[Cut]) -> Result<(Vec<f64>, f64)> {
        let t = self.p.periods;
        let lower = self.p.nlp.lower[..=t].to_vec();
        let upper = self.p.nlp.upper[..=t].to_vec();
        let objective = Arc::new(move |v: &[f64]| {
            let mut g = DVector::zeros(v.len());
            g[t] = -1.0;
            Ok((-v[t], g))
        });
        let mut nlp = NlpProblem::new(lower, upper, objective)?;
        for cut in cuts {
            // z^T x + c^T x + psi <= 0
            let mut coeffs = DMatrix::zeros(1, t + 1);
            for j in 0..t {
                coeffs[(0, j)] = cut.z[j] + self.p.costs[j];
            }
            coeffs[(0, t)] = 1.0;
            nlp = nlp.inequality(Affine::new(DVector::zeros(1), coeffs));
        }
        let rep = multistart_with(&nlp, &self.opts.multistart)?;
        let v = rep.best_point().to_vec();
        let psi = v[t];
        Ok((v, psi))
    }

    fn inner_instances(&self, point: &[f64]) -> Result<Vec<InnerInstance>> {
        let t = self.p.periods;
        let mut v = vec![0.0; self.p.nlp.dim];
        v[..=t].copy_from_slice(&point[..=t]);
        let set = self.p.constraint.uncertainty_set(&v)?;
        let (x, b) = self.p.constraint.weights_and_bound(&v)?;
        Ok(vec![InnerInstance { set, x, b }])
    }
}

/// Fraction of ground-truth price realizations for which the revenue reaches `psi`.
/// Profit shortfall still counted as feasible; matches the solver's constraint tolerance
/// so that the zero plan with `psi` at rounding level is not reported infeasible.
pub const FEASIBILITY_SLACK: f64 = 1e-6;

pub fn ground_truth_feasibility(inst: &PlanningInstance, x: &[f64], psi: f64, n_samples: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 1);
    let mean: f64 = x.iter().zip(&inst.costs).map(|(xt, c)| (true_price(*xt) - c) * xt).sum();
    let sd: Vec<f64> = x.iter().map(|xt| inst.noise_std(*xt) * xt).collect();
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let mut r = mean;
        for s in &sd {
            let e: f64 = StandardNormal.sample(&mut rng);
            r += s * e;
        }
        if r >= psi - FEASIBILITY_SLACK {
            hits += 1;
        }
    }
    hits as f64 / n_samples as f64
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub confidences: Vec<f64>,
    pub modes: Vec<Mode>,
    pub feasibility_samples: usize,
    pub solve: PlanningSolveOptions,
    pub exec: Execution,
    pub record_timing: bool,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub mode: Mode,
    pub confidence: f64,
    pub solution: Result<PlanningSolution>,
    pub feasibility: f64,
    pub seconds: f64,
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "mode",
    "T",
    "sigma_noise",
    "noise_kind",
    "one_minus_alpha",
    "objective",
    "feasibility",
    "solve_seconds",
    "status",
    "solution",
    "verified",
    "fallback_rounds",
];

pub(crate) fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::IterationLimit => "iteration_limit",
        SolveStatus::NumericalFailure => "numerical_failure",
    }
}

/// Solves every (mode, confidence) pair and scores it against the ground truth.
///
/// The nominal problem does not depend on the confidence and is solved once.
pub fn run_confidence_sweep(inst: &PlanningInstance, models: &PlanningModels, opts: &SweepOptions) -> Vec<SweepPoint> {
    let mut jobs = Vec::new();
    for &mode in &opts.modes {
        if mode == Mode::Nominal {
            jobs.push((mode, None));
        } else {
            jobs.extend(opts.confidences.iter().map(|c| (mode, Some(*c))));
        }
    }
    let solved = map_ordered(opts.exec, &jobs, |_, (mode, conf)| {
        let start = Instant::now();
        let alpha = 1.0 - conf.unwrap_or(0.5);
        let model = if *mode == Mode::Chance { &models.gp } else { &models.warped };
        let sol = build_planning_problem(inst, model, alpha, *mode).and_then(|p| solve_planning(&p, &opts.solve));
        let feas = match &sol {
            Ok(s) => ground_truth_feasibility(inst, &s.x, s.objective, opts.feasibility_samples, inst.seed),
            Err(_) => f64::NAN,
        };
        (sol, feas, start.elapsed().as_secs_f64())
    });
    let mut points = Vec::new();
    for ((mode, conf), (sol, feas, secs)) in jobs.into_iter().zip(solved) {
        match conf {
            Some(c) => points.push(SweepPoint { mode, confidence: c, solution: sol, feasibility: feas, seconds: secs }),
            None => {
                for &c in &opts.confidences {
                    points.push(SweepPoint { mode, confidence: c, solution: sol.clone(), feasibility: feas, seconds: secs });
                }
            }
        }
    }
    points
}

pub fn sweep_table(inst: &PlanningInstance, points: &[SweepPoint], record_timing: bool) -> Table {
    let mut t = Table::new(SWEEP_COLUMNS);
    for p in points {
        let timing = if record_timing { Cell::Float(p.seconds) } else { Cell::Text(String::new()) };
        let common = vec![
            Cell::from(p.mode.name()),
            Cell::from(inst.periods()),
            Cell::from(inst.sigma_noise),
            Cell::from(inst.noise.name()),
            Cell::from(p.confidence),
        ];
        let rest = match &p.solution {
            Ok(s) => vec![
                Cell::from(s.objective),
                Cell::from(p.feasibility),
                timing,
                Cell::from(status_name(s.status)),
                Cell::from(s.x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")),
                Cell::from(s.verified.map_or("", |b| if b { "true" } else { "false" })),
                Cell::from(s.fallback_rounds),
            ],
            Err(e) => vec![
                Cell::Float(f64::NAN),
                Cell::Float(f64::NAN),
                timing,
                Cell::from(format!("failed: {e}")),
                Cell::from(""),
                Cell::from(""),
                Cell::from(0usize),
            ],
        };
        t.rows.push(common.into_iter().chain(rest).collect());
    }
    t
}

/// Result of the confidence bisection for one feasibility target.
#[derive(Debug, Clone)]
pub struct PosteriorPoint {
    pub target: f64,
    pub confidence: f64,
    pub estimated_feasibility: f64,
    pub true_feasibility: f64,
    pub objective: f64,
    pub a_priori_objective: f64,
    pub a_priori_feasibility: f64,
    pub converged: bool,
    pub trace: Vec<BisectionStep>,
}

/// Model-based feasibility of a planning solution under the warped surrogate.
pub fn model_feasibility(p: &PlanningProblem, sol: &PlanningSolution, n_samples: usize, seed: u64, exec: Execution) -> Result<f64> {
    let UncertainModel::Warped(neg) = &p.constraint.model else {
        return Err(Error::InvalidArgument("model feasibility needs the warped model".into()));
    };
    let x = DVector::from_column_slice(&sol.x);
    let pts = DMatrix::from_column_slice(sol.x.len(), 1, &sol.x);
    let b = -sol.objective - sol.x.iter().zip(&p.costs).map(|(a, c)| a * c).sum::<f64>() + FEASIBILITY_SLACK;
    estimate_feasibility_with(neg, &x, &pts, b, n_samples, seed, &EstimateOptions { include_noise: true, exec })
}

/// Bisects the robust confidence until the model-estimated feasibility hits each target.
pub fn run_a_posteriori(
    inst: &PlanningInstance,
    warped: &WarpedGpModel,
    targets: &[f64],
    cfg: &PosteriorConfig,
    opts: &PlanningSolveOptions,
    truth_samples: usize,
) -> Result<Vec<PosteriorPoint>> {
    let model = UncertainModel::Warped(warped.clone());
    let exec = opts.multistart.exec;
    let mut out = Vec::new();
    for &target in targets {
        let solve_at = |confidence: f64| -> Result<(PlanningSolution, f64)> {
            let p = build_planning_problem(inst, &model, 1.0 - confidence, Mode::Robust)?;
            let s = solve_planning(&p, opts)?;
            let f = model_feasibility(&p, &s, cfg.n_samples, cfg.seed, exec)?;
            Ok((s, f))
        };
        let (prior, prior_feas) = solve_at(target)?;
        let cfg_t = PosteriorConfig { target, ..*cfg };
        let r = bisect_alpha(solve_at, &cfg_t)?;
        out.push(PosteriorPoint {
            target,
            confidence: r.confidence,
            estimated_feasibility: r.feasibility,
            true_feasibility: ground_truth_feasibility(inst, &r.solution.x, r.solution.objective, truth_samples, inst.seed),
            objective: r.solution.objective,
            a_priori_objective: prior.objective,
            a_priori_feasibility: prior_feas,
            converged: r.converged,
            trace: r.trace,
        });
    }
    Ok(out)
}

pub fn posterior_table(points: &[PosteriorPoint]) -> Table {
    let mut t = Table::new([
        "target",
        "confidence",
        "estimated_feasibility",
        "true_feasibility",
        "objective",
        "a_priori_objective",
        "a_priori_feasibility",
        "iterations",
        "converged",
    ]);
    for p in points {
        t.rows.push(vec![
            p.target.into(),
            p.confidence.into(),
            p.estimated_feasibility.into(),
            p.true_feasibility.into(),
            p.objective.into(),
            p.a_priori_objective.into(),
            p.a_priori_feasibility.into(),
            p.trace.len().into(),
            (if p.converged { "true" } else { "false" }).into(),
        ]);
    }
    t
}
