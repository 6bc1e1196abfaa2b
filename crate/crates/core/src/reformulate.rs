//! Deterministic counterparts of aggregate uncertain constraints `sum_i g(y_i) x_i <= b`.
//!
//! Three forms are emitted as smooth maps of the decision vector: the nominal
//! constraint on the inversely warped mean, the exact chance constraint for a
//! plain GP, and the Wolfe-dual system for a warped GP.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite, Error, Result};
use crate::gp::{GpModel, PredictionGradients, PredictiveGaussian};
use crate::smooth::{Evaluation, FnMap, MapRef, Scale};
use crate::uncertainty::{chi2_quantile, normal_quantile, UncertaintyEllipsoid, WarpedSet};
use crate::warping::{ObservationWarp, WarpedGpModel};

/// Surrogate behind an uncertain constraint.
#[derive(Debug, Clone)]
pub enum UncertainModel {
    Gp(GpModel),
    Warped(WarpedGpModel),
}

impl UncertainModel {
    pub fn latent_gp(&self) -> &GpModel {
        match self {
            Self::Gp(g) => g,
            Self::Warped(w) => w.latent_gp(),
        }
    }

    pub fn warp(&self) -> ObservationWarp {
        match self {
            Self::Gp(_) => ObservationWarp::identity(),
            Self::Warped(w) => w.warp().clone(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.latent_gp().data().input_dim()
    }

    pub fn is_identity_warp(&self) -> bool {
        self.warp().is_identity()
    }
}

/// `sum_i g(y_i) x_i <= b` where `x`, the points `y_i` and `b` are smooth maps of the decisions.
///
/// `points` returns the `n` points flattened row-wise (`n * k` values).
#[derive(Clone)]
pub struct AggregateUncertainConstraint {
    pub weights: MapRef,
    pub points: MapRef,
    pub bound: MapRef,
    pub model: UncertainModel,
    pub alpha: f64,
    pub include_noise: bool,
}

struct Inputs {
    x: Evaluation,
    y: Evaluation,
    b: Evaluation,
    pred: PredictionGradients,
}

impl AggregateUncertainConstraint {
    pub fn new(weights: MapRef, points: MapRef, bound: MapRef, model: UncertainModel, alpha: f64) -> Result<Self> {
        let k = model.input_dim();
        if weights.is_empty() || points.len() != weights.len() * k {
            return Err(Error::InvalidArgument(format!(
                "need one {k}-dimensional point per weight: {} weights, {} point values",
                weights.len(),
                points.len()
            )));
        }
        if bound.len() != 1 {
            return Err(Error::InvalidArgument("bound map must be scalar".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
        }
        Ok(Self { weights, points, bound, model, alpha, include_noise: false })
    }

    pub fn with_noise(mut self, include_noise: bool) -> Self {
        self.include_noise = include_noise;
        self
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    /// `F_n^{1-alpha}` with `n` the number of aggregated terms.
    pub fn radius_sq(&self) -> Result<f64> {
        chi2_quantile(self.n(), 1.0 - self.alpha)
    }

    fn test_points(&self, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.model.input_dim(), y.as_slice())
    }

    fn inputs(&self, v: &[f64]) -> Result<Inputs> {
        let x = self.weights.eval(v)?;
        let y = self.points.eval(v)?;
        let b = self.bound.eval(v)?;
        let pred = self.model.latent_gp().predict_with_gradients(&self.test_points(&y.values), self.include_noise)?;
        Ok(Inputs { x, y, b, pred })
    }

    /// Latent predictive at the points selected by `v`.
    pub fn prediction(&self, v: &[f64]) -> Result<PredictiveGaussian> {
        let y = self.points.eval(v)?;
        let test = self.test_points(&y.values);
        if self.include_noise {
            self.model.latent_gp().predict_observed(&test)
        } else {
            self.model.latent_gp().predict_joint(&test)
        }
    }

    /// Warped uncertainty set at the points selected by `v`.
    pub fn uncertainty_set(&self, v: &[f64]) -> Result<WarpedSet> {
        let p = self.prediction(v)?;
        Ok(WarpedSet::new(UncertaintyEllipsoid::new(p.mean, p.cov, self.alpha)?, self.model.warp()))
    }

    /// Current weights and bound.
    pub fn weights_and_bound(&self, v: &[f64]) -> Result<(DVector<f64>, f64)> {
        Ok((self.weights.eval(v)?.values, self.bound.eval(v)?.scalar()))
    }
}

/// Sum of `partial_j * jacobian.row(j)` over several blocks.
fn chain(dim: usize, parts: &[(&[f64], &DMatrix<f64>)]) -> DVector<f64> {
    let mut g = DVector::zeros(dim);
    for (partial, jac) in parts {
        for (j, p) in partial.iter().enumerate() {
            if *p != 0.0 {
                g.axpy(*p, &jac.row(j).transpose(), 1.0);
            }
        }
    }
    g
}

/// Value of the exact chance-constraint counterpart; `clamped` reports a negative radicand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChanceResidual {
    pub value: f64,
    pub clamped: bool,
}

/// `mu^T x + F^{-1}(1 - alpha) sqrt(x^T Sigma x) - b`.
pub fn chance_constraint_residual(x: &DVector<f64>, pred: &PredictiveGaussian, b: f64, alpha: f64) -> Result<ChanceResidual> {
    if x.len() != pred.dim() {
        return Err(Error::InvalidArgument("weights and prediction differ in size".into()));
    }
    ensure_finite(x.as_slice(), "chance weights")?;
    let q = normal_quantile(1.0 - alpha)?;
    let quad = x.dot(&(&pred.cov * x));
    let clamped = quad < 0.0;
    Ok(ChanceResidual { value: pred.mean.dot(x) + q * quad.max(0.0).sqrt() - b, clamped })
}

/// Exact chance constraint as a scalar inequality map (`<= 0`).
pub fn chance_counterpart(c: &AggregateUncertainConstraint) -> Result<MapRef> {
    if !c.model.is_identity_warp() {
        return Err(Error::InvalidArgument("the chance counterpart needs a plain GP model".into()));
    }
    let q = normal_quantile(1.0 - c.alpha)?;
    let c = c.clone();
    Ok(FnMap::new(1, move |v: &[f64]| {
        let inp = c.inputs(v)?;
        let (n, k) = (c.n(), c.model.input_dim());
        let x = &inp.x.values;
        let p = &inp.pred;
        let sx = &p.prediction.cov * x;
        let quad = x.dot(&sx).max(0.0);
        let s = quad.sqrt();
        let s_eff = s.max(1e-12);
        let value = p.prediction.mean.dot(x) + q * s - inp.b.scalar();
        let dx: Vec<f64> = (0..n).map(|i| p.prediction.mean[i] + q * sx[i] / s_eff).collect();
        let mut dy = vec![0.0; n * k];
        for i in 0..n {
            for d in 0..k {
                let dquad = x.dot(&(&p.cov_grad[i][d] * x));
                dy[i * k + d] = x[i] * p.mean_grad[(i, d)] + q * dquad / (2.0 * s_eff);
            }
        }
        let g = chain(v.len(), &[(&dx, &inp.x.jacobian), (&dy, &inp.y.jacobian), (&[-1.0], &inp.b.jacobian)]);
        Ok(Evaluation { values: DVector::from_element(1, value), jacobian: DMatrix::from_row_slice(1, v.len(), g.as_slice()) })
    }))
}

/// Nominal constraint `sum_i H^{-1}(mu_i) x_i - b <= 0`.
pub fn nominal_counterpart(c: &AggregateUncertainConstraint) -> Result<MapRef> {
    let c = c.clone();
    let warp = c.model.warp();
    Ok(FnMap::new(1, move |v: &[f64]| {
        let inp = c.inputs(v)?;
        let (n, k) = (c.n(), c.model.input_dim());
        let x = &inp.x.values;
        let p = &inp.pred;
        let mut value = -inp.b.scalar();
        let mut dx = vec![0.0; n];
        let mut dy = vec![0.0; n * k];
        for i in 0..n {
            let g = warp.inverse(p.prediction.mean[i])?;
            let dg = 1.0 / warp.derivative(g);
            value += g * x[i];
            dx[i] = g;
            for d in 0..k {
                dy[i * k + d] = x[i] * dg * p.mean_grad[(i, d)];
            }
        }
        let g = chain(v.len(), &[(&dx, &inp.x.jacobian), (&dy, &inp.y.jacobian), (&[-1.0], &inp.b.jacobian)]);
        Ok(Evaluation { values: DVector::from_element(1, value), jacobian: DMatrix::from_row_slice(1, v.len(), g.as_slice()) })
    }))
}

/// Constraint maps of the Wolfe counterpart.
///
/// `inequality` is `z^T x - b <= 0`. `equalities` stacks stationarity
/// `Sigma D x - 2u (H(z) - mu) = 0` (n rows, `D = diag(1/H'(z))`) and the
/// normalization `4 u^2 F - x^T D Sigma D x = 0`. The caller bounds `u >= 0`.
#[derive(Clone)]
pub struct WolfeSystem {
    pub inequality: MapRef,
    pub equalities: MapRef,
}

/// Wolfe-dual robust counterpart over the auxiliary decisions `z` (n values) and `u` (scalar).
pub fn wolfe_counterpart(c: &AggregateUncertainConstraint, z: MapRef, u: MapRef) -> Result<WolfeSystem> {
    let n = c.n();
    if z.len() != n || u.len() != 1 {
        return Err(Error::InvalidArgument("wolfe counterpart needs n auxiliary z values and scalar u".into()));
    }
    let f = c.radius_sq()?;
    let warp = c.model.warp();

    let ci = c.clone();
    let zi = z.clone();
    let inequality = FnMap::new(1, move |v: &[f64]| {
        let x = ci.weights.eval(v)?;
        let b = ci.bound.eval(v)?;
        let ze = zi.eval(v)?;
        let value = ze.values.dot(&x.values) - b.scalar();
        let g = chain(
            v.len(),
            &[(ze.values.as_slice(), &x.jacobian), (x.values.as_slice(), &ze.jacobian), (&[-1.0], &b.jacobian)],
        );
        Ok(Evaluation { values: DVector::from_element(1, value), jacobian: DMatrix::from_row_slice(1, v.len(), g.as_slice()) })
    });

    let ce = c.clone();
    let equalities = FnMap::new(n + 1, move |v: &[f64]| {
        let inp = ce.inputs(v)?;
        let k = ce.model.input_dim();
        let ze = z.eval(v)?;
        let ue = u.eval(v)?;
        let uu = ue.scalar();
        let x = &inp.x.values;
        let p = &inp.pred;
        let sigma = &p.prediction.cov;
        let mu = &p.prediction.mean;
        let zv = &ze.values;
        let h = zv.map(|t| warp.apply(t));
        let hp = zv.map(|t| warp.derivative(t));
        let d = hp.map(|t| 1.0 / t);
        let dd = DVector::from_fn(n, |j, _| -warp.second_derivative(zv[j]) * d[j] * d[j]);
        let w = d.component_mul(x);
        let s = sigma * &w;

        let mut values = DVector::zeros(n + 1);
        let mut jacobian = DMatrix::zeros(n + 1, v.len());
        for i in 0..n {
            values[i] = s[i] - 2.0 * uu * (h[i] - mu[i]);
            let dx: Vec<f64> = (0..n).map(|j| sigma[(i, j)] * d[j]).collect();
            let dz: Vec<f64> =
                (0..n).map(|j| sigma[(i, j)] * x[j] * dd[j] - if i == j { 2.0 * uu * hp[i] } else { 0.0 }).collect();
            let du = [-2.0 * (h[i] - mu[i])];
            let mut dy = vec![0.0; n * k];
            for pt in 0..n {
                for q in 0..k {
                    let mut val = p.cov_grad[pt][q].row(i).dot(&w.transpose());
                    if pt == i {
                        val += 2.0 * uu * p.mean_grad[(pt, q)];
                    }
                    dy[pt * k + q] = val;
                }
            }
            let g = chain(
                v.len(),
                &[(&dx, &inp.x.jacobian), (&dz, &ze.jacobian), (&du, &ue.jacobian), (&dy, &inp.y.jacobian)],
            );
            jacobian.set_row(i, &g.transpose());
        }
        values[n] = 4.0 * uu * uu * f - w.dot(&s);
        let dx: Vec<f64> = (0..n).map(|j| -2.0 * s[j] * d[j]).collect();
        let dz: Vec<f64> = (0..n).map(|j| -2.0 * s[j] * x[j] * dd[j]).collect();
        let du = [8.0 * uu * f];
        let mut dy = vec![0.0; n * k];
        for pt in 0..n {
            for q in 0..k {
                dy[pt * k + q] = -w.dot(&(&p.cov_grad[pt][q] * &w));
            }
        }
        let g = chain(v.len(), &[(&dx, &inp.x.jacobian), (&dz, &ze.jacobian), (&du, &ue.jacobian), (&dy, &inp.y.jacobian)]);
        jacobian.set_row(n, &g.transpose());
        Ok(Evaluation { values, jacobian })
    });
    Ok(WolfeSystem { inequality, equalities })
}

impl WolfeSystem {
    /// Same system with the stationarity rows divided by `stationarity` and the
    /// normalization row by `normalization`.
    pub fn scaled(&self, stationarity: f64, normalization: f64) -> Self {
        let n = self.equalities.len() - 1;
        let mut f = vec![1.0 / stationarity; n];
        f.push(1.0 / normalization);
        Self { inequality: self.inequality.clone(), equalities: Scale::new(self.equalities.clone(), f) }
    }
}

/// Typical magnitudes of the Wolfe stationarity and normalization terms at `v_ref`.
///
/// Uses `|Sigma D x|_inf` and `x^T D Sigma D x` with `D` taken at the inversely
/// warped mean; zero weights are replaced by ones. Dividing the equalities by
/// these keeps their residuals comparable to the other constraints.
pub fn wolfe_scales(c: &AggregateUncertainConstraint, v_ref: &[f64]) -> Result<(f64, f64)> {
    let p = c.prediction(v_ref)?;
    let warp = c.model.warp();
    let mut x = c.weights.eval(v_ref)?.values;
    if x.amax() == 0.0 {
        x.fill(1.0);
    }
    let mut w = x.clone();
    for i in 0..w.len() {
        w[i] /= warp.derivative(warp.inverse(p.mean[i])?);
    }
    let s = &p.cov * &w;
    let a = s.amax();
    let b = w.dot(&s);
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Ok((1.0, 1.0));
    }
    Ok((a, b))
}

/// Worst-case point of the Wolfe system for fixed weights.
#[derive(Debug, Clone)]
pub struct WolfeSolution {
    pub z: DVector<f64>,
    pub u: f64,
    /// `z^T x`, the worst-case aggregate.
    pub value: f64,
    /// Infinity norm of the stationarity and normalization residuals.
    pub residual: f64,
}

fn wolfe_residual(set: &WarpedSet, x: &DVector<f64>, z: &DVector<f64>, u: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let e = &set.ellipsoid;
    let w_ = &set.warp;
    let h = z.map(|t| w_.apply(t));
    let hp = z.map(|t| w_.derivative(t));
    let d = hp.map(|t| 1.0 / t);
    let dd = DVector::from_fn(n, |j, _| -w_.second_derivative(z[j]) * d[j] * d[j]);
    let w = d.component_mul(x);
    let s = &e.sigma * &w;
    let mut r = DVector::zeros(n + 1);
    let mut jac = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        r[i] = s[i] - 2.0 * u * (h[i] - e.mu[i]);
        for j in 0..n {
            jac[(i, j)] = e.sigma[(i, j)] * x[j] * dd[j];
        }
        jac[(i, i)] -= 2.0 * u * hp[i];
        jac[(i, n)] = -2.0 * (h[i] - e.mu[i]);
    }
    r[n] = 4.0 * u * u * e.radius_sq - w.dot(&s);
    for j in 0..n {
        jac[(n, j)] = -2.0 * s[j] * x[j] * dd[j];
    }
    jac[(n, n)] = 8.0 * u * e.radius_sq;
    (r, jac)
}

/// Solve the Wolfe stationarity system for fixed `x`.
///
/// Starts from the fixed point `xi = mu + sqrt(F) Sigma D x / ||D x||_Sigma`
/// and polishes with damped Newton on `(z, u)`.
pub fn solve_wolfe_kkt(set: &WarpedSet, x: &DVector<f64>) -> Result<WolfeSolution> {
    let n = set.dim();
    if x.len() != n {
        return Err(Error::InvalidArgument("weights and set differ in size".into()));
    }
    ensure_finite(x.as_slice(), "wolfe weights")?;
    let e = &set.ellipsoid;
    let warp = &set.warp;
    if x.amax() == 0.0 || e.radius_sq == 0.0 {
        let z = set.to_observed(&e.mu)?;
        return Ok(WolfeSolution { value: z.dot(x), z, u: 0.0, residual: 0.0 });
    }
    let rf = e.radius_sq.sqrt();
    let mut xi = e.mu.clone();
    for _ in 0..200 {
        let z = set.to_observed(&xi)?;
        let w = DVector::from_fn(n, |i, _| x[i] / warp.derivative(z[i]));
        let s = &e.sigma * &w;
        let norm = w.dot(&s).max(0.0).sqrt();
        if norm == 0.0 {
            break;
        }
        let next = &e.mu + s * (rf / norm);
        let change = (&next - &xi).amax();
        xi = next;
        if change <= 1e-14 * (1.0 + xi.amax()) {
            break;
        }
    }
    let mut z = set.to_observed(&xi)?;
    let w = DVector::from_fn(n, |i, _| x[i] / warp.derivative(z[i]));
    let mut u = w.dot(&(&e.sigma * &w)).max(0.0).sqrt() / (2.0 * rf);

    let (mut r, mut jac) = wolfe_residual(set, x, &z, u);
    for _ in 0..50 {
        let norm = r.amax();
        if norm <= 1e-14 * (1.0 + x.amax()) {
            break;
        }
        let Some(step) = jac.clone().lu().solve(&(-&r)) else { break };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let zn = &z + step.rows(0, n) * t;
            let un = (u + t * step[n]).max(0.0);
            let (rn, jn) = wolfe_residual(set, x, &zn, un);
            if rn.amax() < norm {
                z = zn;
                u = un;
                r = rn;
                jac = jn;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(WolfeSolution { value: z.dot(x), residual: r.amax(), z, u })
}

/// Sign pattern of the aggregate weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XSign {
    Nonneg,
    Nonpos,
    Mixed,
}

impl XSign {
    pub fn of(x: &[f64]) -> Self {
        if x.iter().all(|v| *v >= 0.0) {
            Self::Nonneg
        } else if x.iter().all(|v| *v <= 0.0) {
            Self::Nonpos
        } else {
            Self::Mixed
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Certificate {
    CertifiedUniqueKkt,
    Uncertified,
}

const CERT_GRID: usize = 4001;

/// Curvature check of the warp on `y_domain`: concave warp with nonnegative
/// weights, or convex warp with nonpositive weights, is certified.
pub fn convexity_certificate(warp: &ObservationWarp, x_sign: XSign, y_domain: (f64, f64)) -> Certificate {
    let (lo, hi) = y_domain;
    if x_sign == XSign::Mixed || !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Certificate::Uncertified;
    }
    let mut concave = true;
    let mut convex = true;
    for i in 0..CERT_GRID {
        let y = lo + (hi - lo) * i as f64 / (CERT_GRID - 1) as f64;
        let h2 = warp.second_derivative(y);
        concave &= h2 <= 0.0;
        convex &= h2 >= 0.0;
    }
    match (x_sign, concave, convex) {
        (XSign::Nonneg, true, _) | (XSign::Nonpos, _, true) => Certificate::CertifiedUniqueKkt,
        _ => Certificate::Uncertified,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{KernelParams, TrainingData};
    use crate::smooth::{fd_jacobian, Affine, Select};
    use crate::warping::WarpParams;
    use approx::assert_relative_eq;

    fn pred(mu: &[f64], cov: &[f64]) -> PredictiveGaussian {
        let n = mu.len();
        PredictiveGaussian { mean: DVector::from_column_slice(mu), cov: DMatrix::from_row_slice(n, n, cov) }
    }

    #[test]
    fn chance_residual_examples() {
        let p = pred(&[1.0], &[0.04]);
        let zero = chance_constraint_residual(&DVector::zeros(1), &p, 2.0, 0.05).unwrap();
        assert_eq!(zero.value, -2.0);
        let half = chance_constraint_residual(&DVector::from_element(1, 1.0), &p, 2.0, 0.5).unwrap();
        assert_relative_eq!(half.value, -1.0, epsilon = 1e-12);
        let r = chance_constraint_residual(&DVector::from_element(1, 1.0), &p, 2.0, 0.05).unwrap();
        assert_relative_eq!(r.value, -0.671029, epsilon = 1e-6);
        assert!(!r.clamped);
    }

    #[test]
    fn certificate_examples() {
        let id = ObservationWarp::identity();
        for s in [XSign::Nonneg, XSign::Nonpos] {
            assert_eq!(convexity_certificate(&id, s, (-5.0, 5.0)), Certificate::CertifiedUniqueKkt);
        }
        assert_eq!(convexity_certificate(&id, XSign::Mixed, (-5.0, 5.0)), Certificate::Uncertified);
        let one = ObservationWarp::raw(WarpParams::single(1.0, 1.0, 0.0).unwrap());
        assert_eq!(convexity_certificate(&one, XSign::Nonneg, (0.1, 3.0)), Certificate::CertifiedUniqueKkt);
        assert_eq!(convexity_certificate(&one, XSign::Nonneg, (-3.0, 3.0)), Certificate::Uncertified);
        assert_eq!(convexity_certificate(&one, XSign::Nonpos, (-3.0, -0.1)), Certificate::CertifiedUniqueKkt);
    }

    #[test]
    fn identity_kkt_matches_support_function() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let mu = DVector::from_vec(vec![0.2, -0.4]);
        let e = UncertaintyEllipsoid::with_radius(mu.clone(), sigma.clone(), 4.0).unwrap();
        let set = WarpedSet::new(e, ObservationWarp::identity());
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let sol = solve_wolfe_kkt(&set, &x).unwrap();
        let closed = mu.dot(&x) + 2.0 * x.dot(&(&sigma * &x)).sqrt();
        assert_relative_eq!(sol.value, closed, epsilon = 1e-10);
        assert!(sol.residual < 1e-10);
    }

    #[test]
    fn zero_weights_give_zero_dual() {
        let e = UncertaintyEllipsoid::with_radius(DVector::zeros(2), DMatrix::identity(2, 2), 4.0).unwrap();
        let set = WarpedSet::new(e, ObservationWarp::raw(WarpParams::single(0.5, 1.0, 0.0).unwrap()));
        let sol = solve_wolfe_kkt(&set, &DVector::zeros(2)).unwrap();
        assert_eq!(sol.u, 0.0);
        assert_eq!(sol.value, 0.0);
    }

    fn toy_constraint(warp: Option<WarpParams>, alpha: f64) -> AggregateUncertainConstraint {
        let x = [0.0, 0.6, 1.2, 1.9, 2.5];
        let y = [1.0, 0.55, 0.3, 0.15, 0.08];
        let data = TrainingData::from_1d(&x, &y).unwrap();
        let kern = KernelParams::new(0.5, vec![0.9], 1e-3).unwrap();
        let model = match warp {
            None => UncertainModel::Gp(GpModel::new(kern, data).unwrap()),
            Some(w) => UncertainModel::Warped(
                WarpedGpModel::from_parts(ObservationWarp::new(w, 0.4, 0.3).unwrap(), kern, &data).unwrap(),
            ),
        };
        // v = [x1, x2, y1, y2, z1, z2, u, b]
        AggregateUncertainConstraint::new(Select::range(0, 2), Select::range(2, 2), Select::new(vec![7]), model, alpha)
            .unwrap()
            .with_noise(true)
    }

    #[test]
    fn chance_gradient_matches_finite_difference() {
        let c = toy_constraint(None, 0.1);
        let m = chance_counterpart(&c).unwrap();
        let v = [0.7, 1.3, 0.4, 1.6, 0.0, 0.0, 0.0, 1.0];
        let e = m.eval(&v).unwrap();
        let fd = fd_jacobian(m.as_ref(), &v, 1e-6).unwrap();
        assert!((e.jacobian - fd).amax() < 1e-5);
    }

    #[test]
    fn chance_rejects_warped_models() {
        let c = toy_constraint(Some(WarpParams::single(0.5, 1.0, 0.0).unwrap()), 0.1);
        assert!(chance_counterpart(&c).is_err());
    }

    #[test]
    fn nominal_and_wolfe_gradients_match_finite_difference() {
        let c = toy_constraint(Some(WarpParams::single(0.5, 1.2, 0.3).unwrap()), 0.1);
        let v = [0.7, 1.3, 0.4, 1.6, 0.45, 0.2, 0.8, 1.0];
        let nominal = nominal_counterpart(&c).unwrap();
        let fd = fd_jacobian(nominal.as_ref(), &v, 1e-6).unwrap();
        assert!((nominal.eval(&v).unwrap().jacobian - fd).amax() < 1e-5);
        let sys = wolfe_counterpart(&c, Select::range(4, 2), Select::new(vec![6])).unwrap();
        for map in [&sys.inequality, &sys.equalities] {
            let fd = fd_jacobian(map.as_ref(), &v, 1e-6).unwrap();
            let an = map.eval(&v).unwrap().jacobian;
            assert!((an - &fd).amax() < 1e-5, "{}", fd);
        }
    }

    #[test]
    fn wolfe_system_vanishes_at_kkt_solution() {
        let c = toy_constraint(Some(WarpParams::single(0.5, 1.2, 0.3).unwrap()), 0.1);
        let mut v = vec![0.7, 1.3, 0.4, 1.6, 0.0, 0.0, 0.0, 1.0];
        let set = c.uncertainty_set(&v).unwrap();
        let x = DVector::from_vec(vec![0.7, 1.3]);
        let sol = solve_wolfe_kkt(&set, &x).unwrap();
        v[4] = sol.z[0];
        v[5] = sol.z[1];
        v[6] = sol.u;
        let sys = wolfe_counterpart(&c, Select::range(4, 2), Select::new(vec![6])).unwrap();
        assert!(sys.equalities.eval(&v).unwrap().values.amax() < 1e-9);
        assert!(crate::uncertainty::warped_membership(&set, &sol.z).abs() < 1e-6);
    }

    #[test]
    fn identity_wolfe_with_vacuous_weights() {
        let c = toy_constraint(None, 0.1);
        let b = Affine::constant(&[0.0], 8);
        let c = AggregateUncertainConstraint { bound: b, ..c };
        let sys = wolfe_counterpart(&c, Select::range(4, 2), Select::new(vec![6])).unwrap();
        let v = [0.0, 0.0, 0.4, 1.6, 0.3, 0.2, 0.0, 0.0];
        assert_eq!(sys.equalities.eval(&v).unwrap().values[2], 0.0);
        assert_eq!(sys.inequality.eval(&v).unwrap().scalar(), 0.0);
    }
    #[test]
    fn scaling_divides_rows() {
        let c = toy_constraint(Some(WarpParams::single(0.5, 1.2, 0.3).unwrap()), 0.1);
        let v = [0.7, 1.3, 0.4, 1.6, 0.45, 0.2, 0.8, 1.0];
        let sys = wolfe_counterpart(&c, Select::range(4, 2), Select::new(vec![6])).unwrap();
        let scaled = sys.scaled(4.0, 0.5);
        let a = sys.equalities.eval(&v).unwrap();
        let b = scaled.equalities.eval(&v).unwrap();
        for r in 0..2 {
            assert_relative_eq!(b.values[r], a.values[r] / 4.0, epsilon = 1e-14);
            assert_relative_eq!(b.jacobian[(r, 4)], a.jacobian[(r, 4)] / 4.0, epsilon = 1e-14);
        }
        assert_relative_eq!(b.values[2], a.values[2] / 0.5, epsilon = 1e-14);
        assert_eq!(scaled.inequality.eval(&v).unwrap(), sys.inequality.eval(&v).unwrap());
    }

    #[test]
    fn identity_scales_are_support_terms() {
        let c = toy_constraint(None, 0.1);
        let v = [0.7, 1.3, 0.4, 1.6, 0.0, 0.0, 0.0, 1.0];
        let p = c.prediction(&v).unwrap();
        let x = DVector::from_vec(vec![0.7, 1.3]);
        let sx = &p.cov * &x;
        let (a, b) = wolfe_scales(&c, &v).unwrap();
        assert_relative_eq!(a, sx.amax(), epsilon = 1e-12);
        assert_relative_eq!(b, x.dot(&sx), epsilon = 1e-12);
        // zero weights fall back to unit weights
        let (a0, _) = wolfe_scales(&c, &[0.0, 0.0, 0.4, 1.6, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(a0 > 0.0);
    }
}
