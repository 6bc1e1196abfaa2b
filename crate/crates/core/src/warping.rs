//! Monotone tanh-sum warping and warped-GP fitting and sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_finite, Error, Result};
use crate::exec::{map_range, stream_rng, Execution};
use crate::gp::{lml_for, FitOptions, GpModel, KernelBounds, KernelParams, PredictiveGaussian, TrainingData};
use crate::linalg::cholesky_jittered;
use crate::neldermead::{self, NelderMeadOptions};

/// One `a * tanh(b * (y + c))` term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpTerm {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Parameters of `h(y) = y + sum_j a_j tanh(b_j (y + c_j))`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarpParams {
    pub terms: Vec<WarpTerm>,
}

impl WarpParams {
    pub fn new(terms: Vec<WarpTerm>) -> Result<Self> {
        for t in &terms {
            if !(t.a.is_finite() && t.b.is_finite() && t.c.is_finite()) || t.a < 0.0 || t.b < 0.0 {
                return Err(Error::InvalidArgument(format!("warp term needs a, b >= 0 and finite values: {t:?}")));
            }
        }
        Ok(Self { terms })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn single(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(vec![WarpTerm { a, b, c }])
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// True when every term is inert, so `h` is the identity.
    pub fn is_identity(&self) -> bool {
        self.terms.iter().all(|t| t.a == 0.0 || t.b == 0.0)
    }

    /// Upper bound on `|h(y) - y|`.
    pub fn amplitude(&self) -> f64 {
        self.terms.iter().map(|t| t.a).sum()
    }

    /// Warp of the reflected quantity: `-h(-y)`.
    pub fn reflected(&self) -> Self {
        Self { terms: self.terms.iter().map(|t| WarpTerm { c: -t.c, ..*t }).collect() }
    }
}

pub fn warp(y: f64, params: &WarpParams) -> f64 {
    y + params.terms.iter().map(|t| t.a * (t.b * (y + t.c)).tanh()).sum::<f64>()
}

pub fn warp_derivative(y: f64, params: &WarpParams) -> f64 {
    1.0 + params
        .terms
        .iter()
        .map(|t| {
            let s = 1.0 / (t.b * (y + t.c)).cosh();
            t.a * t.b * s * s
        })
        .sum::<f64>()
}

pub fn warp_second_derivative(y: f64, params: &WarpParams) -> f64 {
    params
        .terms
        .iter()
        .map(|t| {
            let u = t.b * (y + t.c);
            let s = 1.0 / u.cosh();
            -2.0 * t.a * t.b * t.b * u.tanh() * s * s
        })
        .sum()
}

/// Inverse of `h` by safeguarded Newton on a bracket that always holds the root.
pub fn warp_inverse(xi: f64, params: &WarpParams) -> Result<f64> {
    if !xi.is_finite() {
        return Err(Error::InvalidArgument("warp_inverse needs a finite value".into()));
    }
    if params.is_identity() {
        return Ok(xi);
    }
    // |h(y) - y| <= sum a_j, so the root lies within xi -/+ that amplitude.
    let amp = params.amplitude();
    let (mut lo, mut hi) = (xi - amp - 1e-12 * (1.0 + xi.abs()), xi + amp + 1e-12 * (1.0 + xi.abs()));
    let mut expansions = 0;
    while !(warp(lo, params) <= xi && warp(hi, params) >= xi) {
        let w = (hi - lo).max(1.0);
        lo -= w;
        hi += w;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::NumericalFailure(format!("could not bracket warp inverse of {xi}")));
        }
    }
    let tol = 1e-10 * xi.abs().max(1.0);
    let mut y = xi.clamp(lo, hi);
    for _ in 0..200 {
        let r = warp(y, params) - xi;
        if r.abs() <= 0.25 * tol {
            return Ok(y);
        }
        if r > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let step = y - r / warp_derivative(y, params);
        y = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * y.abs().max(1.0) {
            break;
        }
    }
    let r = warp(y, params) - xi;
    if r.abs() <= tol {
        Ok(y)
    } else {
        Err(Error::NumericalFailure(format!("warp inverse stalled at residual {r:e}")))
    }
}

/// Observation-space warping `H(y) = h((y - loc) / scale)`.
///
/// Fitting happens on standardized targets; `loc` and `scale` carry the
/// standardization so that all downstream code works in observation units.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWarp {
    pub params: WarpParams,
    pub loc: f64,
    pub scale: f64,
}

impl ObservationWarp {
    pub fn new(params: WarpParams, loc: f64, scale: f64) -> Result<Self> {
        if !(loc.is_finite() && scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument("warp standardization needs finite loc and scale > 0".into()));
        }
        Ok(Self { params, loc, scale })
    }

    pub fn identity() -> Self {
        Self { params: WarpParams::identity(), loc: 0.0, scale: 1.0 }
    }

    /// Raw warp without standardization.
    pub fn raw(params: WarpParams) -> Self {
        Self { params, loc: 0.0, scale: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.params.is_identity()
    }

    #[inline]
    pub fn apply(&self, y: f64) -> f64 {
        warp((y - self.loc) / self.scale, &self.params)
    }

    #[inline]
    pub fn derivative(&self, y: f64) -> f64 {
        warp_derivative((y - self.loc) / self.scale, &self.params) / self.scale
    }

    #[inline]
    pub fn second_derivative(&self, y: f64) -> f64 {
        warp_second_derivative((y - self.loc) / self.scale, &self.params) / (self.scale * self.scale)
    }

    pub fn inverse(&self, xi: f64) -> Result<f64> {
        Ok(self.loc + self.scale * warp_inverse(xi, &self.params)?)
    }

    /// Warp for the negated quantity: `y -> -H(-y)`.
    pub fn negated(&self) -> Self {
        Self { params: self.params.reflected(), loc: -self.loc, scale: self.scale }
    }
}

/// GP over latent targets `H(y)`.
#[derive(Debug, Clone)]
pub struct WarpedGpModel {
    warp: ObservationWarp,
    latent_gp: GpModel,
    raw_targets: DVector<f64>,
    y_range: (f64, f64),
}

impl WarpedGpModel {
    /// Assemble from a warp and kernel: the latent GP is trained on `H(y)`.
    pub fn from_parts(warp: ObservationWarp, kernel: KernelParams, data: &TrainingData) -> Result<Self> {
        let latent = data.targets.map(|y| warp.apply(y));
        ensure_finite(latent.as_slice(), "warped targets")?;
        let latent_gp = GpModel::new(kernel, TrainingData::new(data.inputs.clone(), latent)?)?;
        let y_range = (data.targets.min(), data.targets.max());
        Ok(Self { warp, latent_gp, raw_targets: data.targets.clone(), y_range })
    }

    /// A plain GP viewed as a warped GP with identity warping.
    pub fn from_gp(gp: GpModel) -> Self {
        let t = gp.data().targets.clone();
        Self { warp: ObservationWarp::identity(), y_range: (t.min(), t.max()), raw_targets: t, latent_gp: gp }
    }

    pub fn warp(&self) -> &ObservationWarp {
        &self.warp
    }

    pub fn latent_gp(&self) -> &GpModel {
        &self.latent_gp
    }

    pub fn y_range(&self) -> (f64, f64) {
        self.y_range
    }

    pub fn raw_targets(&self) -> &DVector<f64> {
        &self.raw_targets
    }

    /// Model of the negated observations.
    pub fn negated(&self) -> Self {
        Self {
            warp: self.warp.negated(),
            latent_gp: self.latent_gp.negated(),
            raw_targets: -&self.raw_targets,
            y_range: (-self.y_range.1, -self.y_range.0),
        }
    }

    /// Latent log marginal likelihood plus the log-Jacobian of the warp.
    pub fn objective(&self) -> f64 {
        self.latent_gp.log_marginal_likelihood() + self.raw_targets.iter().map(|y| self.warp.derivative(*y).ln()).sum::<f64>()
    }

    /// Latent predictive at test points; `include_noise` adds the observation noise.
    pub fn predict_latent(&self, test: &DMatrix<f64>, include_noise: bool) -> Result<PredictiveGaussian> {
        if include_noise {
            self.latent_gp.predict_observed(test)
        } else {
            self.latent_gp.predict_joint(test)
        }
    }

    /// Inversely warped mean: the nominal observation-space prediction.
    pub fn predict_nominal(&self, test: &DMatrix<f64>) -> Result<DVector<f64>> {
        let p = self.latent_gp.predict_joint(test)?;
        let v: Result<Vec<f64>> = p.mean.iter().map(|m| self.warp.inverse(*m)).collect();
        Ok(DVector::from_vec(v?))
    }
}

/// Objective of a warped GP for given parameters, in observation units.
pub fn warped_objective(data: &TrainingData, warp: &ObservationWarp, kernel: &KernelParams) -> Result<f64> {
    let latent = data.targets.map(|y| warp.apply(y));
    let jac: f64 = data.targets.iter().map(|y| warp.derivative(*y).ln()).sum();
    Ok(lml_for(kernel, &data.inputs, &latent)? + jac)
}

const LOG_A: (f64, f64) = (-8.0 * std::f64::consts::LN_10, std::f64::consts::LN_10); // [1e-8, 10]
// steepness above ~3 (standardized units) lets the fit place near-steps in sparse
// regions, which turn into plateaus of the inverse-warped mean
const LOG_B: (f64, f64) = (-18.420680743952367, 1.0986122886681098); // [1e-8, 3]
const C_RANGE: (f64, f64) = (-4.0, 4.0);

fn warp_from_theta(theta: &[f64]) -> WarpParams {
    WarpParams {
        terms: theta
            .chunks(3)
            .map(|t| WarpTerm {
                a: t[0].clamp(LOG_A.0, LOG_A.1).exp(),
                b: t[1].clamp(LOG_B.0, LOG_B.1).exp(),
                c: t[2].clamp(C_RANGE.0, C_RANGE.1),
            })
            .collect(),
    }
}

/// Jointly fit kernel and warp parameters by multistart Nelder–Mead.
pub fn fit_warped_gp(data: &TrainingData, n_terms: usize, restarts: usize, seed: u64) -> Result<WarpedGpModel> {
    fit_warped_gp_with(data, n_terms, &FitOptions { restarts, seed, max_evals: 8000, ..Default::default() })
}

pub fn fit_warped_gp_with(data: &TrainingData, n_terms: usize, opts: &FitOptions) -> Result<WarpedGpModel> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("fitting needs at least two observations".into()));
    }
    if n_terms == 0 {
        return Err(Error::InvalidArgument("warped fit needs n_terms >= 1".into()));
    }
    let n = data.len() as f64;
    let loc = data.targets.sum() / n;
    let var = data.targets.map(|y| (y - loc).powi(2)).sum() / n;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let t = data.targets.map(|y| (y - loc) / scale);
    let bounds = KernelBounds::from_data(&data.inputs, &t);
    let nk = bounds.dim();

    let objective = |theta: &[f64]| -> f64 {
        let w = warp_from_theta(&theta[nk..]);
        let latent = t.map(|v| warp(v, &w));
        let jac: f64 = t.iter().map(|v| warp_derivative(*v, &w).ln()).sum();
        match lml_for(&bounds.kernel(&theta[..nk]), &data.inputs, &latent) {
            Ok(v) => -(v + jac),
            Err(_) => f64::INFINITY,
        }
    };
    let runs = map_range(opts.exec, opts.restarts.max(1), |r| {
        let mut rng = stream_rng(opts.seed, r as u64);
        let mut theta0 = bounds.sample(&mut rng, r == 0);
        for _ in 0..n_terms {
            if r == 0 {
                theta0.extend([0.1f64.ln(), 0.0, 0.0]);
            } else {
                theta0.push(rng.random_range(0.01f64.ln()..2f64.ln()));
                theta0.push(rng.random_range(0.2f64.ln()..3f64.ln()));
                theta0.push(rng.random_range(-2.0..2.0));
            }
        }
        neldermead::minimize(objective, &theta0, 0.5, NelderMeadOptions { max_evals: opts.max_evals, ..Default::default() })
    });
    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, (_, f))| f.is_finite())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r.0.clone())
        .ok_or_else(|| Error::NumericalFailure("every warped fitting restart failed".into()))?;
    let warp = ObservationWarp::new(warp_from_theta(&best[nk..]), loc, scale)?;
    WarpedGpModel::from_parts(warp, bounds.kernel(&best[..nk]), data)
}

/// Options for drawing observation-space realizations.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub include_noise: bool,
    pub exec: Execution,
    pub chunk: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { include_noise: false, exec: Execution::Parallel, chunk: 4096 }
    }
}

/// Draw `n_samples` joint realizations `H^{-1}(xi)`, `xi ~ N(mu, Sigma)`, one per row.
pub fn sample_observations(
    model: &WarpedGpModel,
    test: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    sample_observations_with(model, test, n_samples, seed, &SampleOptions::default())
}

pub fn sample_observations_with(
    model: &WarpedGpModel,
    test: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
    opts: &SampleOptions,
) -> Result<DMatrix<f64>> {
    let pred = model.predict_latent(test, opts.include_noise)?;
    sample_from_predictive(&pred, model.warp(), n_samples, seed, opts)
}

/// Sample `H^{-1}(xi)` for `xi` from an explicit latent Gaussian.
pub fn sample_from_predictive(
    pred: &PredictiveGaussian,
    warp: &ObservationWarp,
    n_samples: usize,
    seed: u64,
    opts: &SampleOptions,
) -> Result<DMatrix<f64>> {
    let n = pred.dim();
    let (chol, _) = cholesky_jittered(&pred.cov)?;
    let l = chol.l();
    let chunk = opts.chunk.max(1);
    let n_chunks = n_samples.div_ceil(chunk);
    let blocks = map_range(opts.exec, n_chunks, |c| -> Result<Vec<f64>> {
        let rows = chunk.min(n_samples - c * chunk);
        let mut rng = stream_rng(seed, c as u64);
        let mut out = Vec::with_capacity(rows * n);
        let mut e = DVector::zeros(n);
        for _ in 0..rows {
            for v in e.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let xi = &pred.mean + &l * &e;
            for v in xi.iter() {
                out.push(warp.inverse(*v)?);
            }
        }
        Ok(out)
    });
    let mut data = Vec::with_capacity(n_samples * n);
    for b in blocks {
        data.extend(b?);
    }
    Ok(DMatrix::from_row_slice(n_samples, n, &data))
}
