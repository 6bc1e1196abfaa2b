//! Monte Carlo feasibility estimation and bisection on the confidence level.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::table::{Cell, Table};
use crate::warping::{sample_observations_with, SampleOptions, WarpedGpModel};

/// Sampling settings of the feasibility estimator.
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    pub include_noise: bool,
    pub exec: Execution,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { include_noise: false, exec: Execution::Parallel }
    }
}

pub const MIN_SAMPLES: usize = 1000;

/// Fraction of sampled realizations `z` with `z^T x <= b`.
pub fn estimate_feasibility(
    model: &WarpedGpModel,
    x: &DVector<f64>,
    y_points: &DMatrix<f64>,
    b: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    estimate_feasibility_with(model, x, y_points, b, n_samples, seed, &EstimateOptions::default())
}

pub fn estimate_feasibility_with(
    model: &WarpedGpModel,
    x: &DVector<f64>,
    y_points: &DMatrix<f64>,
    b: f64,
    n_samples: usize,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<f64> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_SAMPLES} samples, got {n_samples}")));
    }
    if x.len() != y_points.nrows() {
        return Err(Error::InvalidArgument("one weight per evaluation point is required".into()));
    }
    if x.iter().all(|v| *v == 0.0) {
        return Ok(if 0.0 <= b { 1.0 } else { 0.0 });
    }
    let sopts = SampleOptions { include_noise: opts.include_noise, exec: opts.exec, ..Default::default() };
    let z = sample_observations_with(model, y_points, n_samples, seed, &sopts)?;
    let hits = (z * x).iter().filter(|v| **v <= b).count();
    Ok(hits as f64 / n_samples as f64)
}

/// Target and stopping rule of the confidence bisection.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorConfig {
    pub target: f64,
    pub tolerance: f64,
    pub n_samples: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::InvalidArgument("target feasibility must lie in (0,1)".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_LOWER: f64 = 1e-3;
pub const DEFAULT_UPPER: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct BisectionStep {
    pub iteration: usize,
    pub confidence: f64,
    pub feasibility: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BisectionResult<S> {
    /// Confidence `1 - alpha` passed to the final solve.
    pub confidence: f64,
    pub solution: S,
    pub feasibility: f64,
    pub converged: bool,
    pub trace: Vec<BisectionStep>,
}

/// Bisect the confidence level until the estimated feasibility hits the target.
///
/// `solve` receives a confidence `1 - alpha` and returns a solution with its
/// estimated feasibility; it should reuse one sample seed so that the map from
/// confidence to feasibility is deterministic.
pub fn bisect_alpha<S>(mut solve: impl FnMut(f64) -> Result<(S, f64)>, cfg: &PosteriorConfig) -> Result<BisectionResult<S>> {
    cfg.validate()?;
    let mut confidence = cfg.target;
    let mut lower: Option<f64> = None;
    let mut upper: Option<f64> = None;
    let mut trace = Vec::new();
    let mut last = None;
    for iteration in 0..cfg.max_iters.max(1) {
        let (solution, feasibility) = solve(confidence)?;
        let done = (feasibility - cfg.target).abs() < cfg.tolerance;
        if !done {
            if feasibility >= cfg.target {
                upper = Some(confidence);
            } else {
                lower = Some(confidence);
            }
        }
        trace.push(BisectionStep { iteration, confidence, feasibility, lower, upper });
        last = Some((confidence, solution, feasibility));
        if done {
            let (confidence, solution, feasibility) = last.take().unwrap();
            return Ok(BisectionResult { confidence, solution, feasibility, converged: true, trace });
        }
        confidence = 0.5 * (lower.unwrap_or(DEFAULT_LOWER) + upper.unwrap_or(DEFAULT_UPPER));
    }
    if lower.is_none() || upper.is_none() {
        let path: Vec<String> = trace.iter().map(|s| format!("({:.6}, {:.6})", s.confidence, s.feasibility)).collect();
        return Err(Error::NoConvergence(format!("no bracket after {} solves: {}", trace.len(), path.join(" "))));
    }
    let (confidence, solution, feasibility) = last.expect("at least one iteration");
    Ok(BisectionResult { confidence, solution, feasibility, converged: false, trace })
}

/// Iteration trace as a table.
pub fn trace_table(trace: &[BisectionStep]) -> Table {
    let mut t = Table::new(["iteration", "confidence", "feasibility", "lower", "upper"]);
    let opt = |v: Option<f64>| v.map_or(Cell::Text(String::new()), Cell::Float);
    for s in trace {
        t.rows.push(vec![s.iteration.into(), s.confidence.into(), s.feasibility.into(), opt(s.lower), opt(s.upper)]);
    }
    t
}
