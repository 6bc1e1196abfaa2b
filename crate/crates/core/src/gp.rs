//! Exact Gaussian-process regression with a squared-exponential (ARD) kernel.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::exec::{map_range, stream_rng, Execution};
use crate::linalg::{cholesky_jittered, clamp_covariance};
use crate::neldermead::{self, NelderMeadOptions};

/// Hyperparameters of the squared-exponential kernel plus the observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let p = Self { signal_variance, lengthscales, noise_variance };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::InvalidArgument("signal_variance must be positive".into()));
        }
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidArgument("lengthscales must be positive".into()));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::InvalidArgument("noise_variance must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            s += d * d;
        }
        self.signal_variance * (-0.5 * s).exp()
    }
}

/// Squared-exponential kernel `var * exp(-0.5 * sum(((a_d - b_d) / l_d)^2))`.
pub fn se_kernel(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    ensure_finite(a, "kernel input a")?;
    ensure_finite(b, "kernel input b")?;
    params.validate()?;
    if a.len() != params.input_dim() || b.len() != params.input_dim() {
        return Err(Error::InvalidArgument("kernel input dimension mismatch".into()));
    }
    Ok(params.eval(a, b))
}

/// Regression inputs (one row per observation) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
}

impl TrainingData {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::InvalidArgument("training data needs N >= 1 and k >= 1".into()));
        }
        if inputs.nrows() != targets.len() {
            return Err(Error::InvalidArgument("inputs and targets differ in length".into()));
        }
        ensure_finite(inputs.as_slice(), "training inputs")?;
        ensure_finite(targets.as_slice(), "training targets")?;
        Ok(Self { inputs, targets })
    }

    /// One-dimensional convenience constructor.
    pub fn from_1d(x: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(x.len(), 1, x), DVector::from_column_slice(y))
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Read a CSV with header `x1,..,xk,y`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let io_err = |e: &dyn std::fmt::Display| Error::Io { path: path.display().to_string(), message: e.to_string() };
        let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(&e))?;
        let header = reader.headers().map_err(|e| io_err(&e))?.clone();
        let k = header.len().checked_sub(1).filter(|k| *k >= 1).ok_or_else(|| {
            Error::InvalidArgument(format!("{}: expected columns x1..xk,y", path.display()))
        })?;
        for (i, name) in header.iter().enumerate() {
            let expected = if i < k { format!("x{}", i + 1) } else { "y".to_string() };
            if name.trim() != expected {
                return Err(Error::InvalidArgument(format!(
                    "{}: column {} is '{name}', expected '{expected}'",
                    path.display(),
                    i + 1
                )));
            }
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| io_err(&e))?;
            for (i, field) in record.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("{}: bad number '{field}'", path.display())))?;
                if i < k {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
        }
        let n = ys.len();
        Self::new(DMatrix::from_row_slice(n, k, &xs), DVector::from_vec(ys))
    }
}

/// Joint Gaussian over a set of test points.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PredictiveGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Prediction together with derivatives with respect to the test inputs.
///
/// `mean_grad[(i, d)]` is the derivative of mean `i` with respect to coordinate
/// `d` of test point `i` (the mean at point `i` depends on no other point).
/// `cov_grad[i][d]` is the full derivative of the covariance matrix with respect
/// to coordinate `d` of test point `i`.
#[derive(Debug, Clone)]
pub struct PredictionGradients {
    pub prediction: PredictiveGaussian,
    pub mean_grad: DMatrix<f64>,
    pub cov_grad: Vec<Vec<DMatrix<f64>>>,
}

/// A factorized GP posterior.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelParams,
    data: TrainingData,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    /// Factorize `K(X,X) + noise * I` for the given data.
    pub fn new(kernel: KernelParams, data: TrainingData) -> Result<Self> {
        kernel.validate()?;
        if kernel.input_dim() != data.input_dim() {
            return Err(Error::InvalidArgument("kernel and data input dimensions differ".into()));
        }
        let k = gram(&kernel, &data.inputs);
        let (c, jitter) = cholesky_jittered(&k)?;
        let alpha = c.solve(&data.targets);
        Ok(Self { kernel, data, chol: c.l(), alpha, jitter })
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    /// Lower-triangular factor of `K(X,X) + noise * I` (plus any jitter).
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Solution of `(K + noise * I) alpha = y`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Diagonal jitter added during factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Same posterior for negated targets: predicts `-f`.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.data.targets = -&self.data.targets;
        out.alpha = -&self.alpha;
        out
    }

    fn cross(&self, test: &DMatrix<f64>) -> DMatrix<f64> {
        let n = test.nrows();
        let big_n = self.data.len();
        let mut ks = DMatrix::zeros(n, big_n);
        let mut a = vec![0.0; test.ncols()];
        let mut b = vec![0.0; test.ncols()];
        for i in 0..n {
            row_into(test, i, &mut a);
            for j in 0..big_n {
                row_into(&self.data.inputs, j, &mut b);
                ks[(i, j)] = self.kernel.eval(&a, &b);
            }
        }
        ks
    }

    fn check_test(&self, test: &DMatrix<f64>) -> Result<()> {
        if test.nrows() == 0 {
            return Err(Error::InvalidArgument("need at least one test point".into()));
        }
        if test.ncols() != self.data.input_dim() {
            return Err(Error::InvalidArgument("test point dimension mismatch".into()));
        }
        ensure_finite(test.as_slice(), "test points")
    }

    fn solve_lower(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.chol
            .solve_lower_triangular(rhs)
            .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))
    }

    /// Joint posterior of the latent function at the test points (no observation noise).
    pub fn predict_joint(&self, test: &DMatrix<f64>) -> Result<PredictiveGaussian> {
        self.check_test(test)?;
        let ks = self.cross(test);
        let mean = &ks * &self.alpha;
        let v = self.solve_lower(&ks.transpose())?;
        let cov = gram(&KernelParams { noise_variance: 0.0, ..self.kernel.clone() }, test) - v.transpose() * v;
        Ok(PredictiveGaussian { mean, cov: clamp_covariance(&cov) })
    }

    /// Joint predictive of new noisy observations: latent posterior plus `noise * I`.
    pub fn predict_observed(&self, test: &DMatrix<f64>) -> Result<PredictiveGaussian> {
        let mut p = self.predict_joint(test)?;
        for i in 0..p.dim() {
            p.cov[(i, i)] += self.kernel.noise_variance;
        }
        Ok(p)
    }

    /// Predictive (latent or observed) with derivatives with respect to test inputs.
    pub fn predict_with_gradients(&self, test: &DMatrix<f64>, include_noise: bool) -> Result<PredictionGradients> {
        self.check_test(test)?;
        let n = test.nrows();
        let k = test.ncols();
        let big_n = self.data.len();
        let ks = self.cross(test);
        let mean = &ks * &self.alpha;
        let v = self.solve_lower(&ks.transpose())?;
        let a = self
            .chol
            .transpose()
            .solve_upper_triangular(&v)
            .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))?;
        let cov = gram(&KernelParams { noise_variance: 0.0, ..self.kernel.clone() }, test) - v.transpose() * &v;
        let mut cov = clamp_covariance(&cov);
        if include_noise {
            for i in 0..n {
                cov[(i, i)] += self.kernel.noise_variance;
            }
        }

        let mut mean_grad = DMatrix::zeros(n, k);
        let mut cov_grad = vec![vec![DMatrix::zeros(n, n); k]; n];
        let mut xi = vec![0.0; k];
        let mut xj = vec![0.0; k];
        for i in 0..n {
            row_into(test, i, &mut xi);
            for d in 0..k {
                let l2 = self.kernel.lengthscales[d].powi(2);
                // derivative of k(x_i, X_a) with respect to x_{i,d}
                let g: DVector<f64> = DVector::from_fn(big_n, |a_idx, _| {
                    -ks[(i, a_idx)] * (xi[d] - self.data.inputs[(a_idx, d)]) / l2
                });
                mean_grad[(i, d)] = g.dot(&self.alpha);
                let m = &mut cov_grad[i][d];
                for j in 0..n {
                    let ga = g.dot(&a.column(j));
                    if j == i {
                        m[(i, i)] = -2.0 * ga;
                    } else {
                        row_into(test, j, &mut xj);
                        let kij = self.kernel.eval(&xi, &xj);
                        let dk = -kij * (xi[d] - xj[d]) / l2;
                        m[(i, j)] = dk - ga;
                        m[(j, i)] = dk - ga;
                    }
                }
            }
        }
        Ok(PredictionGradients { prediction: PredictiveGaussian { mean, cov }, mean_grad, cov_grad })
    }

    /// `-0.5 y^T alpha - sum(log diag L) - N/2 log(2 pi)`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        lml_from_parts(&self.chol, &self.alpha, &self.data.targets)
    }
}

fn row_into(m: &DMatrix<f64>, i: usize, out: &mut [f64]) {
    for (d, o) in out.iter_mut().enumerate() {
        *o = m[(i, d)];
    }
}

/// `K(X, X) + noise * I`.
fn gram(kernel: &KernelParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut a = vec![0.0; x.ncols()];
    let mut b = vec![0.0; x.ncols()];
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        row_into(x, i, &mut a);
        k[(i, i)] = kernel.signal_variance + kernel.noise_variance;
        for j in 0..i {
            row_into(x, j, &mut b);
            let v = kernel.eval(&a, &b);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn lml_from_parts(chol: &DMatrix<f64>, alpha: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol.diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * y.dot(alpha) - log_det_half - 0.5 * n * (2.0 * PI).ln()
}

/// Log marginal likelihood of `targets` under a kernel, without keeping the factorization.
pub(crate) fn lml_for(kernel: &KernelParams, inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<f64> {
    let k = gram(kernel, inputs);
    let (c, _) = cholesky_jittered(&k)?;
    let alpha = c.solve(targets);
    Ok(lml_from_parts(&c.l(), &alpha, targets))
}

/// Options for multistart marginal-likelihood fitting.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub exec: Execution,
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { restarts: 10, seed: 0, exec: Execution::Parallel, max_evals: 4000 }
    }
}

/// Box limits on the log-parameters of the kernel, derived from the data scale.
#[derive(Debug, Clone)]
pub(crate) struct KernelBounds {
    pub log_var: (f64, f64),
    pub log_len: Vec<(f64, f64)>,
    pub log_noise: (f64, f64),
}

impl KernelBounds {
    pub fn from_data(inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Self {
        let n = targets.len() as f64;
        let second_moment = (targets.dot(targets) / n).max(1e-12);
        let log_len = (0..inputs.ncols())
            .map(|d| {
                let col = inputs.column(d);
                let span = col.max() - col.min();
                let span = if span > 0.0 { span } else { 1.0 };
                ((1e-3 * span).ln(), (1e3 * span).ln())
            })
            .collect();
        Self {
            log_var: ((1e-4 * second_moment).ln(), (1e4 * second_moment).ln()),
            log_len,
            log_noise: ((1e-10 * second_moment).ln(), second_moment.ln()),
        }
    }

    pub fn dim(&self) -> usize {
        2 + self.log_len.len()
    }

    /// Kernel from a log-parameter vector `[ln var, ln l_1.., ln noise]`, clamped to bounds.
    pub fn kernel(&self, theta: &[f64]) -> KernelParams {
        let k = self.log_len.len();
        KernelParams {
            signal_variance: theta[0].clamp(self.log_var.0, self.log_var.1).exp(),
            lengthscales: (0..k).map(|d| theta[1 + d].clamp(self.log_len[d].0, self.log_len[d].1).exp()).collect(),
            noise_variance: theta[1 + k].clamp(self.log_noise.0, self.log_noise.1).exp(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, first: bool) -> Vec<f64> {
        let mid = |b: (f64, f64), t: f64| b.0 + t * (b.1 - b.0);
        let mut theta = Vec::with_capacity(self.dim());
        if first {
            theta.push(mid(self.log_var, 0.5));
            theta.extend(self.log_len.iter().map(|b| mid(*b, 0.4)));
            theta.push(mid(self.log_noise, 0.6));
        } else {
            theta.push(mid(self.log_var, rng.random_range(0.35..0.65)));
            theta.extend(self.log_len.iter().map(|b| mid(*b, rng.random_range(0.25..0.6))));
            theta.push(mid(self.log_noise, rng.random_range(0.3..0.9)));
        }
        theta
    }
}

/// Fit kernel hyperparameters by multistart Nelder–Mead on the log-parameters.
pub fn fit_hyperparameters(data: &TrainingData, restarts: usize, seed: u64) -> Result<GpModel> {
    fit_hyperparameters_with(data, &FitOptions { restarts, seed, ..Default::default() })
}

pub fn fit_hyperparameters_with(data: &TrainingData, opts: &FitOptions) -> Result<GpModel> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("fitting needs at least two observations".into()));
    }
    let bounds = KernelBounds::from_data(&data.inputs, &data.targets);
    let objective = |theta: &[f64]| -> f64 {
        match lml_for(&bounds.kernel(theta), &data.inputs, &data.targets) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let runs = map_range(opts.exec, opts.restarts.max(1), |r| {
        let mut rng = stream_rng(opts.seed, r as u64);
        let theta0 = bounds.sample(&mut rng, r == 0);
        neldermead::minimize(objective, &theta0, 0.7, NelderMeadOptions { max_evals: opts.max_evals, ..Default::default() })
    });
    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, (_, f))| f.is_finite())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r.0.clone())
        .ok_or_else(|| Error::NumericalFailure("every fitting restart failed to factorize".into()))?;
    GpModel::new(bounds.kernel(&best), data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn kp(var: f64, l: &[f64], noise: f64) -> KernelParams {
        KernelParams::new(var, l.to_vec(), noise).unwrap()
    }

    #[test]
    fn kernel_examples() {
        assert_relative_eq!(se_kernel(&[0.3], &[0.3], &kp(2.0, &[1.0], 0.0)).unwrap(), 2.0);
        assert_relative_eq!(se_kernel(&[0.0], &[1.0], &kp(1.0, &[1.0], 0.0)).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(
            se_kernel(&[0.0, 0.0], &[1.0, 2.0], &kp(1.0, &[1.0, 2.0], 0.0)).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        assert!(se_kernel(&[f64::NAN], &[0.0], &kp(1.0, &[1.0], 0.0)).is_err());
    }

    #[test]
    fn kernel_params_reject_invalid() {
        assert!(KernelParams::new(0.0, vec![1.0], 0.0).is_err());
        assert!(KernelParams::new(1.0, vec![-1.0], 0.0).is_err());
        assert!(KernelParams::new(1.0, vec![1.0], -1e-3).is_err());
    }

    #[test]
    fn noiseless_single_point_interpolates() {
        let data = TrainingData::from_1d(&[0.4], &[1.7]).unwrap();
        let gp = GpModel::new(kp(1.0, &[0.5], 0.0), data).unwrap();
        let p = gp.predict_joint(&DMatrix::from_element(1, 1, 0.4)).unwrap();
        assert!((p.mean[0] - 1.7).abs() < 1e-8);
        assert!(p.cov[(0, 0)].abs() < 1e-8);
    }

    #[test]
    fn prior_is_recovered_far_from_data() {
        let data = TrainingData::from_1d(&[0.0, 0.5, 1.0], &[1.0, -0.5, 0.3]).unwrap();
        let gp = GpModel::new(kp(1.3, &[0.3], 1e-4), data).unwrap();
        let test = DMatrix::from_column_slice(2, 1, &[50.0, 80.0]);
        let p = gp.predict_joint(&test).unwrap();
        assert!(p.mean.amax() < 1e-6);
        assert!((&p.cov - DMatrix::identity(2, 2) * 1.3).amax() < 1e-6);
    }

    #[test]
    fn lml_single_point_closed_form() {
        let data = TrainingData::from_1d(&[0.0], &[0.0]).unwrap();
        let gp = GpModel::new(kp(0.75, &[1.0], 0.25), data).unwrap();
        assert_relative_eq!(gp.log_marginal_likelihood(), -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn lml_two_points_closed_form() {
        let kern = kp(1.4, &[0.8], 0.1);
        let x = [0.2, 0.9];
        let y = [0.5, -0.3];
        let gp = GpModel::new(kern.clone(), TrainingData::from_1d(&x, &y).unwrap()).unwrap();
        let k12 = 1.4 * (-0.5 * ((0.2f64 - 0.9) / 0.8).powi(2)).exp();
        let (a, b, d) = (1.5, k12, 1.5);
        let det = a * d - b * b;
        let quad = (d * y[0] * y[0] - 2.0 * b * y[0] * y[1] + a * y[1] * y[1]) / det;
        let expected = -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln();
        assert_relative_eq!(gp.log_marginal_likelihood(), expected, epsilon = 1e-10);
    }

    #[test]
    fn scaling_targets_decreases_lml() {
        let kern = kp(1.0, &[0.5], 0.05);
        let x = [0.1, 0.4, 0.7, 1.3];
        let y = [0.3, -0.2, 0.8, 0.1];
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let a = GpModel::new(kern.clone(), TrainingData::from_1d(&x, &y).unwrap()).unwrap();
        let b = GpModel::new(kern, TrainingData::from_1d(&x, &y2).unwrap()).unwrap();
        assert!(a.alpha().dot(&a.data().targets) > 0.0);
        assert!(b.log_marginal_likelihood() < a.log_marginal_likelihood());
    }

    #[test]
    fn fitting_is_deterministic() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let data = TrainingData::from_1d(&x, &y).unwrap();
        let a = fit_hyperparameters(&data, 4, 11).unwrap();
        let b = fit_hyperparameters(&data, 4, 11).unwrap();
        assert_eq!(a.kernel(), b.kernel());
    }

    #[test]
    fn constant_targets_fit_small_noise() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let y = vec![3.0; 10];
        let gp = fit_hyperparameters(&TrainingData::from_1d(&x, &y).unwrap(), 6, 3).unwrap();
        assert!(gp.kernel().noise_variance <= 1e-4 * gp.kernel().signal_variance, "{:?}", gp.kernel());
    }

    #[test]
    fn fitting_requires_two_points() {
        let data = TrainingData::from_1d(&[1.0], &[2.0]).unwrap();
        assert!(fit_hyperparameters(&data, 2, 0).is_err());
    }

    #[test]
    fn negated_model_flips_mean_only() {
        let data = TrainingData::from_1d(&[0.0, 0.7, 1.5], &[0.2, 0.9, -0.4]).unwrap();
        let gp = GpModel::new(kp(1.0, &[0.6], 0.01), data).unwrap();
        let test = DMatrix::from_column_slice(2, 1, &[0.3, 1.1]);
        let p = gp.predict_joint(&test).unwrap();
        let q = gp.negated().predict_joint(&test).unwrap();
        assert!((p.mean + q.mean).amax() < 1e-14);
        assert!((p.cov - q.cov).amax() < 1e-14);
    }
}
