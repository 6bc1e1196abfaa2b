//! Quantiles, latent confidence ellipsoids and warped uncertainty sets.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_lr;

use crate::error::{ensure_finite, Error, Result};
use crate::gp::PredictiveGaussian;
use crate::warping::ObservationWarp;

/// Bisect a nondecreasing function for `f(x) = target` on `[lo, hi]` until the bracket stops shrinking.
fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(dof as f64 / 2.0, x / 2.0)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidArgument("chi2 quantile needs dof >= 1".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("chi2 quantile needs 0 <= p < 1, got {p}")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let mut hi = dof as f64 + 10.0;
    while chi2_cdf(dof, hi) < p {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::NumericalFailure("chi2 quantile bracket overflow".into()));
        }
    }
    Ok(bisect(|x| chi2_cdf(dof, x), p, 0.0, hi))
}

pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("normal quantile needs 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    Ok(bisect(normal_cdf, p, -40.0, 40.0))
}

/// Latent set `{xi : (xi - mu)^T Sigma^{-1} (xi - mu) <= radius_sq}`.
#[derive(Debug, Clone)]
pub struct UncertaintyEllipsoid {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub radius_sq: f64,
    pub alpha: f64,
    chol: DMatrix<f64>,
}

impl UncertaintyEllipsoid {
    /// Ellipsoid holding probability mass `1 - alpha`.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
        }
        let r = chi2_quantile(mu.len().max(1), 1.0 - alpha)?;
        Self::build(mu, sigma, r, alpha)
    }

    /// Ellipsoid with an explicit squared radius.
    pub fn with_radius(mu: DVector<f64>, sigma: DMatrix<f64>, radius_sq: f64) -> Result<Self> {
        if !(radius_sq.is_finite() && radius_sq >= 0.0) {
            return Err(Error::InvalidArgument("radius_sq must be finite and nonnegative".into()));
        }
        let alpha = 1.0 - chi2_cdf(mu.len().max(1), radius_sq);
        Self::build(mu, sigma, radius_sq, alpha)
    }

    fn build(mu: DVector<f64>, sigma: DMatrix<f64>, radius_sq: f64, alpha: f64) -> Result<Self> {
        let n = mu.len();
        if n == 0 || sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::InvalidArgument("ellipsoid dimension mismatch".into()));
        }
        ensure_finite(mu.as_slice(), "ellipsoid center")?;
        ensure_finite(sigma.as_slice(), "ellipsoid covariance")?;
        let sym = (&sigma + sigma.transpose()) * 0.5;
        let chol: Cholesky<f64, Dyn> =
            Cholesky::new(sym.clone()).ok_or_else(|| Error::NumericalFailure("ellipsoid covariance is singular".into()))?;
        Ok(Self { mu, sigma: sym, radius_sq, alpha, chol: chol.l() })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius_sq.sqrt()
    }

    /// Lower Cholesky factor of `sigma`.
    pub fn sigma_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `(xi - mu)^T Sigma^{-1} (xi - mu)`.
    pub fn mahalanobis(&self, xi: &DVector<f64>) -> f64 {
        let d = xi - &self.mu;
        match self.chol.solve_lower_triangular(&d) {
            Some(w) => w.norm_squared(),
            None => f64::INFINITY,
        }
    }

    pub fn contains(&self, xi: &DVector<f64>) -> bool {
        self.mahalanobis(xi) <= self.radius_sq
    }
}

pub fn ellipsoid_from_prediction(pred: &PredictiveGaussian, alpha: f64) -> Result<UncertaintyEllipsoid> {
    UncertaintyEllipsoid::new(pred.mean.clone(), pred.cov.clone(), alpha)
}

/// Observation-space preimage of an ellipsoid under componentwise warping.
#[derive(Debug, Clone)]
pub struct WarpedSet {
    pub ellipsoid: UncertaintyEllipsoid,
    pub warp: ObservationWarp,
}

impl WarpedSet {
    pub fn new(ellipsoid: UncertaintyEllipsoid, warp: ObservationWarp) -> Self {
        Self { ellipsoid, warp }
    }

    pub fn dim(&self) -> usize {
        self.ellipsoid.dim()
    }

    pub fn to_latent(&self, z: &DVector<f64>) -> DVector<f64> {
        z.map(|v| self.warp.apply(v))
    }

    pub fn to_observed(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        let v: Result<Vec<f64>> = xi.iter().map(|x| self.warp.inverse(*x)).collect();
        Ok(DVector::from_vec(v?))
    }
}

/// Signed membership value; `<= 0` means `z` is in the set.
pub fn warped_membership(set: &WarpedSet, z: &DVector<f64>) -> f64 {
    set.ellipsoid.mahalanobis(&set.to_latent(z)) - set.ellipsoid.radius_sq
}

/// Axis-aligned box `mu_i -/+ r sqrt(Sigma_ii)` enclosing the ellipsoid.
pub fn latent_bounding_box(e: &UncertaintyEllipsoid) -> (DVector<f64>, DVector<f64>) {
    let r = e.radius();
    let half = DVector::from_fn(e.dim(), |i, _| r * e.sigma[(i, i)].sqrt());
    (&e.mu - &half, &e.mu + &half)
}
