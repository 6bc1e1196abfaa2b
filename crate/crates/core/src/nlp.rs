//! Smooth constrained local solver (augmented Lagrangian over projected BFGS)
//! and the multistart driver.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::{map_range, stream_rng, Execution};
use crate::smooth::{Evaluation, MapRef};

/// Objective value and gradient.
pub type ObjectiveFn = Arc<dyn Fn(&[f64]) -> Result<(f64, DVector<f64>)> + Send + Sync>;
/// Completes a random start in place (e.g. fills auxiliary variables).
pub type StartHook = Arc<dyn Fn(&mut [f64]) + Send + Sync>;

/// `min f(v)` s.t. `equalities(v) = 0`, `inequalities(v) <= 0`, `lower <= v <= upper`.
#[derive(Clone)]
pub struct NlpProblem {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: ObjectiveFn,
    pub equalities: Vec<MapRef>,
    pub inequalities: Vec<MapRef>,
    pub start_hook: Option<StartHook>,
    /// Objective divided by this inside the solver; values are reported unscaled.
    pub objective_scale: f64,
    /// Set when some derivatives come from finite differences.
    pub approximate: bool,
}

impl NlpProblem {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, objective: ObjectiveFn) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidArgument("bounds must be nonempty and of equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l.is_nan() || u.is_nan() || l > u) {
            return Err(Error::InvalidArgument("every lower bound must not exceed its upper bound".into()));
        }
        Ok(Self {
            dim: lower.len(),
            lower,
            upper,
            objective,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            start_hook: None,
            objective_scale: 1.0,
            approximate: false,
        })
    }

    /// Objective known only by value; gradients by central differences.
    pub fn from_values(lower: Vec<f64>, upper: Vec<f64>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let objective: ObjectiveFn = Arc::new(move |v: &[f64]| {
            let fv = f(v);
            let mut g = DVector::zeros(v.len());
            let mut w = v.to_vec();
            for j in 0..v.len() {
                let h = 1e-7 * v[j].abs().max(1.0);
                w[j] = v[j] + h;
                let fp = f(&w);
                w[j] = v[j] - h;
                let fm = f(&w);
                w[j] = v[j];
                g[j] = (fp - fm) / (2.0 * h);
            }
            Ok((fv, g))
        });
        let mut p = Self::new(lower, upper, objective)?;
        p.approximate = true;
        Ok(p)
    }

    pub fn equality(mut self, m: MapRef) -> Self {
        self.equalities.push(m);
        self
    }

    pub fn inequality(mut self, m: MapRef) -> Self {
        self.inequalities.push(m);
        self
    }

    pub fn with_start_hook(mut self, hook: StartHook) -> Self {
        self.start_hook = Some(hook);
        self
    }

    pub fn with_objective_scale(mut self, scale: f64) -> Self {
        self.objective_scale = scale;
        self
    }

    fn project(&self, v: &mut [f64]) {
        for ((x, l), u) in v.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*l, *u);
        }
    }

    /// Run the start hook (if any) on `v` and clamp it to the bounds.
    pub fn complete_start(&self, v: &mut [f64]) {
        if let Some(hook) = &self.start_hook {
            hook(v);
        }
        self.project(v);
    }

    fn eval_all(&self, maps: &[MapRef], v: &[f64]) -> Result<Evaluation> {
        let m: usize = maps.iter().map(|c| c.len()).sum();
        let mut values = DVector::zeros(m);
        let mut jacobian = DMatrix::zeros(m, v.len());
        let mut row = 0;
        for c in maps {
            let e = c.eval(v)?;
            let k = e.values.len();
            if e.jacobian.nrows() != k || e.jacobian.ncols() != v.len() {
                return Err(Error::InvalidArgument("constraint Jacobian has the wrong shape".into()));
            }
            values.rows_mut(row, k).copy_from(&e.values);
            jacobian.rows_mut(row, k).copy_from(&e.jacobian);
            row += k;
        }
        if values.iter().chain(jacobian.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure("constraint evaluation is not finite".into()));
        }
        Ok(Evaluation { values, jacobian })
    }

    fn eval_objective(&self, v: &[f64]) -> Result<(f64, DVector<f64>)> {
        let (f, g) = (self.objective)(v)?;
        if !f.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure("objective evaluation is not finite".into()));
        }
        Ok((f / self.objective_scale, g / self.objective_scale))
    }

    /// Largest bound or constraint violation at `v`.
    pub fn violation(&self, v: &[f64]) -> Result<f64> {
        let e = self.eval_all(&self.equalities, v)?;
        let i = self.eval_all(&self.inequalities, v)?;
        let mut viol = e.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        viol = i.values.iter().fold(viol, |a, x| a.max(*x));
        for ((x, l), u) in v.iter().zip(&self.lower).zip(&self.upper) {
            viol = viol.max(l - x).max(x - u);
        }
        Ok(viol)
    }
}

/// Settings of the augmented-Lagrangian solver.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol: f64,
    pub inner: InnerMethod,
}

/// Method for the bound-constrained subproblems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerMethod {
    /// Projected BFGS; cheap iterations, suits most problems.
    #[default]
    Bfgs,
    /// Projected Newton with a finite-difference Hessian; for small, badly scaled problems.
    Newton,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { initial_penalty: 10.0, penalty_growth: 10.0, max_penalty: 1e10, max_outer: 20, max_inner: 3000, tol: 1e-6, inner: InnerMethod::Bfgs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    IterationLimit,
    NumericalFailure,
}

/// KKT residuals at a returned point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub violation: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub point: Vec<f64>,
    pub value: f64,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub approximate: bool,
}

impl LocalSolution {
    /// Optimal, or stopped early at a point satisfying the constraints.
    pub fn is_usable(&self, tol: f64) -> bool {
        self.status == SolveStatus::Optimal || (self.status == SolveStatus::IterationLimit && self.kkt.violation <= tol)
    }
}

struct Multipliers<'a> {
    lambda: &'a DVector<f64>,
    nu: &'a DVector<f64>,
    rho: f64,
}

/// Augmented Lagrangian value and gradient.
fn augmented(p: &NlpProblem, m: &Multipliers, v: &[f64]) -> Result<(f64, DVector<f64>)> {
    let (f, mut g) = p.eval_objective(v)?;
    let mut val = f;
    if !p.equalities.is_empty() {
        let e = p.eval_all(&p.equalities, v)?;
        let shifted = m.lambda + &e.values * m.rho;
        val += m.lambda.dot(&e.values) + 0.5 * m.rho * e.values.norm_squared();
        g += e.jacobian.transpose() * shifted;
    }
    if !p.inequalities.is_empty() {
        let e = p.eval_all(&p.inequalities, v)?;
        let shifted = (m.nu + &e.values * m.rho).map(|t| t.max(0.0));
        val += (shifted.norm_squared() - m.nu.norm_squared()) / (2.0 * m.rho);
        g += e.jacobian.transpose() * shifted;
    }
    Ok((val, g))
}

fn projected_gradient_norm(p: &NlpProblem, v: &[f64], g: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..v.len() {
        let t = (v[j] - g[j]).clamp(p.lower[j], p.upper[j]);
        worst = worst.max((t - v[j]).abs());
    }
    worst
}

/// Projected BFGS on `phi` over the bound box.
///
/// `h0` is the diagonal of the initial inverse Hessian, also used on resets.
fn minimize_box(
    p: &NlpProblem,
    phi: &dyn Fn(&[f64]) -> Result<(f64, DVector<f64>)>,
    v0: &[f64],
    h0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64, DVector<f64>)> {
    let n = v0.len();
    let mut v = v0.to_vec();
    p.project(&mut v);
    let (mut f, mut g) = phi(&v)?;
    let reset = |h: &mut DMatrix<f64>| {
        h.fill(0.0);
        h.set_diagonal(h0);
    };
    let mut h = DMatrix::<f64>::zeros(n, n);
    reset(&mut h);
    let mut fresh = true;
    let max_step: f64 = p
        .lower
        .iter()
        .zip(&p.upper)
        .map(|(l, u)| u - l)
        .filter(|w| w.is_finite())
        .fold(10.0, f64::max);
    let mut flat_steps = 0;
    for _ in 0..max_iter {
        if flat_steps > 10 {
            break;
        }
        if projected_gradient_norm(p, &v, &g) <= tol {
            break;
        }
        let eps = |j: usize| 1e-12 * (1.0 + p.lower[j].abs().max(p.upper[j].abs()).min(1e12));
        let active: Vec<bool> = (0..n)
            .map(|j| (v[j] <= p.lower[j] + eps(j) && g[j] > 0.0) || (v[j] >= p.upper[j] - eps(j) && g[j] < 0.0))
            .collect();
        let mut d = DVector::zeros(n);
        for i in 0..n {
            if !active[i] {
                d[i] = -(0..n).filter(|j| !active[*j]).map(|j| h[(i, j)] * g[j]).sum::<f64>();
            }
        }
        let mut slope = g.dot(&d);
        if !(slope < -1e-18 * g.norm() * d.norm()) {
            reset(&mut h);
            fresh = true;
            d = DVector::from_fn(n, |j, _| if active[j] { 0.0 } else { -h0[j] * g[j] });
            slope = g.dot(&d);
            if slope >= 0.0 {
                break;
            }
        }
        let dmax = d.amax();
        let mut t = if dmax > max_step { max_step / dmax } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = (0..n).map(|j| v[j] + t * d[j]).collect();
            p.project(&mut trial);
            let step: f64 = (0..n).map(|j| g[j] * (trial[j] - v[j])).sum();
            if let Ok((ft, gt)) = phi(&trial) {
                // near the optimum f is flat to evaluation noise, so fall back to gradient decrease
                let flat = ft <= f + 1e-10 * f.abs().max(1.0)
                    && projected_gradient_norm(p, &trial, &gt) < 0.9 * projected_gradient_norm(p, &v, &g);
                let armijo = ft <= f + 1e-4 * step.min(0.0);
                if ft.is_finite() && (armijo || flat) {
                    let significant = armijo && f - ft > 1e-12 * f.abs().max(1.0);
                    flat_steps = if significant { 0 } else { flat_steps + 1 };
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((vn, fnew, gn)) = accepted else {
            if fresh {
                break;
            }
            reset(&mut h);
            fresh = true;
            continue;
        };
        let s = DVector::from_fn(n, |j, _| vn[j] - v[j]);
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                // Shanno-Phua scaling relative to the preconditioner
                let hy0 = y.component_mul(h0);
                let scale = sy / y.dot(&hy0);
                h *= scale;
            }
            let r = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (r * (1.0 + r * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * r;
            fresh = false;
        }
        let stalled = (f - fnew).abs() <= 1e-16 * f.abs().max(1.0) && s.amax() <= 1e-15 * (1.0 + v.iter().fold(0.0f64, |a, x| a.max(x.abs())));
        let was_fresh = fresh;
        v = vn;
        f = fnew;
        g = gn;
        if stalled {
            if was_fresh {
                break;
            }
            reset(&mut h);
            fresh = true;
        }
    }
    Ok((v, f, g))
}

/// Projected Newton on `phi` with a finite-difference Hessian over the free variables.
///
/// Negative curvature is flipped and tiny eigenvalues are lifted, so every
/// step is a descent direction on the free subspace.
fn minimize_box_newton(
    p: &NlpProblem,
    phi: &dyn Fn(&[f64]) -> Result<(f64, DVector<f64>)>,
    v0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64, DVector<f64>)> {
    let n = v0.len();
    let mut v = v0.to_vec();
    p.project(&mut v);
    let (mut f, mut g) = phi(&v)?;
    let mut flat_steps = 0;
    for _ in 0..max_iter {
        let pg = projected_gradient_norm(p, &v, &g);
        if pg <= tol || flat_steps > 5 {
            break;
        }
        let eps = |j: usize| 1e-12 * (1.0 + p.lower[j].abs().max(p.upper[j].abs()).min(1e12));
        let free: Vec<usize> = (0..n)
            .filter(|&j| !((v[j] <= p.lower[j] + eps(j) && g[j] > 0.0) || (v[j] >= p.upper[j] - eps(j) && g[j] < 0.0)))
            .collect();
        if free.is_empty() {
            break;
        }
        let m = free.len();
        let mut hess = DMatrix::zeros(m, m);
        let mut w = v.clone();
        for (c, &j) in free.iter().enumerate() {
            let mut h = 1e-6 * (1.0 + v[j].abs());
            if v[j] + h > p.upper[j] {
                h = -h;
            }
            w[j] = v[j] + h;
            let (_, gh) = phi(&w)?;
            w[j] = v[j];
            for (r, &i) in free.iter().enumerate() {
                hess[(r, c)] = (gh[i] - g[i]) / h;
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let eig = hess.symmetric_eigen();
        let top = eig.eigenvalues.amax().max(1e-300);
        let gf = DVector::from_fn(m, |r, _| g[free[r]]);
        let proj = eig.eigenvectors.transpose() * &gf;
        let scaled = DVector::from_fn(m, |r, _| proj[r] / eig.eigenvalues[r].abs().max(1e-10 * top));
        let df = -(&eig.eigenvectors * scaled);
        let mut d = DVector::zeros(n);
        for (r, &j) in free.iter().enumerate() {
            d[j] = df[r];
        }
        let mut accepted = None;
        for dir in [d, DVector::from_fn(n, |j, _| if free.contains(&j) { -g[j] } else { 0.0 })] {
            let mut t = 1.0;
            for _ in 0..50 {
                let mut trial: Vec<f64> = (0..n).map(|j| v[j] + t * dir[j]).collect();
                p.project(&mut trial);
                let step: f64 = (0..n).map(|j| g[j] * (trial[j] - v[j])).sum();
                if let Ok((ft, gt)) = phi(&trial) {
                    let flat = ft <= f + 1e-10 * f.abs().max(1.0) && projected_gradient_norm(p, &trial, &gt) < 0.9 * pg;
                    let armijo = ft <= f + 1e-4 * step.min(0.0);
                    if ft.is_finite() && (armijo || flat) {
                        let significant = armijo && f - ft > 1e-12 * f.abs().max(1.0);
                        flat_steps = if significant { 0 } else { flat_steps + 1 };
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((vn, fnew, gn)) = accepted else { break };
        v = vn;
        f = fnew;
        g = gn;
    }
    Ok((v, f, g))
}

/// Inverse of the Gauss-Newton diagonal `1 + rho * sum_i J_ij^2` of the
/// penalty terms, as a preconditioner for the inner solve.
fn penalty_diagonal(p: &NlpProblem, v: &[f64], rho: f64) -> Result<DVector<f64>> {
    let mut d = DVector::from_element(v.len(), 1.0);
    for maps in [&p.equalities, &p.inequalities] {
        if !maps.is_empty() {
            let e = p.eval_all(maps, v)?;
            for j in 0..v.len() {
                d[j] += rho * e.jacobian.column(j).norm_squared();
            }
        }
    }
    Ok(d.map(|t| 1.0 / t))
}

fn kkt_at(
    p: &NlpProblem,
    v: &[f64],
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> Result<(KktResiduals, f64)> {
    let (f, gf) = p.eval_objective(v)?;
    let mut gl = gf.clone();
    let mut viol = 0.0f64;
    let mut comp = 0.0f64;
    if !p.equalities.is_empty() {
        let e = p.eval_all(&p.equalities, v)?;
        gl += e.jacobian.transpose() * lambda;
        viol = viol.max(e.values.amax());
    }
    if !p.inequalities.is_empty() {
        let e = p.eval_all(&p.inequalities, v)?;
        gl += e.jacobian.transpose() * nu;
        for (gi, ni) in e.values.iter().zip(nu.iter()) {
            viol = viol.max(*gi);
            comp = comp.max((gi * ni).abs());
        }
    }
    let scale = gf.amax().max(lambda.amax()).max(nu.amax()).max(1.0);
    Ok((
        KktResiduals { stationarity: projected_gradient_norm(p, v, &gl) / scale, violation: viol, complementarity: comp },
        f * p.objective_scale,
    ))
}

/// Least-squares multipliers for the free variables, using equalities and
/// inequalities within `active_tol` of their bound. `None` when an inequality
/// multiplier comes out negative.
fn least_squares_multipliers(
    p: &NlpProblem,
    v: &[f64],
    active_tol: f64,
) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
    let (_, gf) = p.eval_objective(v)?;
    let eq = p.eval_all(&p.equalities, v)?;
    let ineq = p.eval_all(&p.inequalities, v)?;
    let active: Vec<usize> = (0..ineq.values.len()).filter(|i| ineq.values[*i] >= -active_tol).collect();
    let free: Vec<usize> = (0..v.len())
        .filter(|j| {
            let eps = 1e-12 * (1.0 + v[*j].abs());
            v[*j] > p.lower[*j] + eps && v[*j] < p.upper[*j] - eps
        })
        .collect();
    let m = eq.values.len() + active.len();
    if m == 0 || free.is_empty() {
        return Ok(None);
    }
    let a = DMatrix::from_fn(free.len(), m, |r, c| {
        let j = free[r];
        if c < eq.values.len() {
            eq.jacobian[(c, j)]
        } else {
            ineq.jacobian[(active[c - eq.values.len()], j)]
        }
    });
    let rhs = DVector::from_fn(free.len(), |r, _| -gf[free[r]]);
    let Ok(mu) = a.svd(true, true).solve(&rhs, 1e-12) else {
        return Ok(None);
    };
    let lambda = mu.rows(0, eq.values.len()).into_owned();
    let mut nu = DVector::zeros(ineq.values.len());
    for (k, i) in active.iter().enumerate() {
        let t = mu[eq.values.len() + k];
        if t < 0.0 {
            return Ok(None);
        }
        nu[*i] = t;
    }
    Ok(Some((lambda, nu)))
}

/// Local solve from `x0` (projected onto the bounds).
pub fn solve_local(p: &NlpProblem, x0: &[f64]) -> LocalSolution {
    solve_local_with(p, x0, &SolverOptions::default())
}

pub fn solve_local_with(p: &NlpProblem, x0: &[f64], opts: &SolverOptions) -> LocalSolution {
    let n_eq: usize = p.equalities.iter().map(|c| c.len()).sum();
    let n_in: usize = p.inequalities.iter().map(|c| c.len()).sum();
    let mut lambda = DVector::zeros(n_eq);
    let mut nu = DVector::zeros(n_in);
    let mut rho = opts.initial_penalty;
    let mut v = x0.to_vec();
    p.project(&mut v);
    let failure = |v: Vec<f64>, lambda: DVector<f64>, nu: DVector<f64>| LocalSolution {
        point: v,
        value: f64::NAN,
        status: SolveStatus::NumericalFailure,
        kkt: KktResiduals::default(),
        eq_multipliers: lambda,
        ineq_multipliers: nu,
        approximate: p.approximate,
    };
    if v.len() != p.dim || v.iter().any(|x| !x.is_finite()) {
        return failure(v, lambda, nu);
    }
    let mut prev_viol = f64::INFINITY;
    let mut omega = 1e-3;
    let mut best: Option<(f64, LocalSolution)> = None;
    let mut stale = 0;
    for _ in 0..opts.max_outer {
        let mult = Multipliers { lambda: &lambda, nu: &nu, rho };
        let phi = |w: &[f64]| augmented(p, &mult, w);
        let h0 = match penalty_diagonal(p, &v, rho) {
            Ok(d) => d,
            Err(_) => return failure(v, lambda, nu),
        };
        let inner = match opts.inner {
            InnerMethod::Bfgs => minimize_box(p, &phi, &v, &h0, omega, opts.max_inner),
            InnerMethod::Newton => minimize_box_newton(p, &phi, &v, omega, opts.max_inner),
        };
        let (vn, _, _) = match inner {
            Ok(r) => r,
            Err(_) => return failure(v, lambda, nu),
        };
        let moved = vn.iter().zip(&v).any(|(a, b)| (a - b).abs() > 1e-14 * (1.0 + b.abs()));
        v = vn;
        let (ce, ci) = match (p.eval_all(&p.equalities, &v), p.eval_all(&p.inequalities, &v)) {
            (Ok(a), Ok(b)) => (a.values, b.values),
            _ => return failure(v, lambda, nu),
        };
        lambda += &ce * rho;
        nu = (&nu + &ci * rho).map(|t| t.max(0.0));
        let viol = ce.amax().max(ci.iter().fold(0.0f64, |a, x| a.max(*x)));
        let (mut kkt, value) = match kkt_at(p, &v, &lambda, &nu) {
            Ok(r) => r,
            Err(_) => return failure(v, lambda, nu),
        };
        let mut reported = (lambda.clone(), nu.clone());
        if kkt.violation <= opts.tol && kkt.stationarity > opts.tol {
            // first-order estimates are noisy once the penalty is large
            if let Ok(Some((l2, n2))) = least_squares_multipliers(p, &v, opts.tol) {
                if let Ok((k2, _)) = kkt_at(p, &v, &l2, &n2) {
                    if k2.stationarity.max(k2.complementarity) < kkt.stationarity.max(kkt.complementarity) {
                        kkt = k2;
                        reported = (l2, n2);
                    }
                }
            }
        }
        let optimal = kkt.violation <= opts.tol && kkt.stationarity <= opts.tol && kkt.complementarity <= opts.tol;
        let merit = kkt.violation.max(kkt.stationarity).max(kkt.complementarity);
        if best.as_ref().is_none_or(|(m, _)| merit < *m) {
            stale = 0;
            let status = if optimal { SolveStatus::Optimal } else { SolveStatus::IterationLimit };
            let sol = LocalSolution {
                point: v.clone(),
                value,
                status,
                kkt,
                eq_multipliers: reported.0,
                ineq_multipliers: reported.1,
                approximate: p.approximate,
            };
            best = Some((merit, sol));
        } else {
            stale += 1;
        }
        // a stalled inner solve with a feasible iterate cannot be improved by more penalty
        if optimal || (viol <= opts.tol && (!moved || stale >= 3)) {
            break;
        }
        if viol > opts.tol && (viol > 0.25 * prev_viol || rho < 1e3) {
            rho = (rho * opts.penalty_growth).min(opts.max_penalty);
        }
        prev_viol = viol;
        omega = (omega * 0.1).max(0.1 * opts.tol);
    }
    match best {
        Some((_, sol)) if sol.status != SolveStatus::Optimal && sol.kkt.violation <= 1e3 * opts.tol => newton_polish(p, sol, opts.tol),
        Some((_, sol)) => sol,
        None => LocalSolution { status: SolveStatus::IterationLimit, ..failure(v, lambda, nu) },
    }
}

fn merit(k: &KktResiduals) -> f64 {
    k.violation.max(k.stationarity).max(k.complementarity)
}

/// Newton steps on the active-set KKT system, with a finite-difference
/// Hessian of the Lagrangian. Used when the penalty iteration stalls close to
/// a solution; only improving steps are kept.
fn newton_polish(p: &NlpProblem, mut sol: LocalSolution, tol: f64) -> LocalSolution {
    for _ in 0..8 {
        let Ok(Some((v, lambda, nu))) = newton_step(p, &sol, tol) else {
            break;
        };
        let Ok((kkt, value)) = kkt_at(p, &v, &lambda, &nu) else {
            break;
        };
        if !(merit(&kkt) < merit(&sol.kkt)) {
            break;
        }
        sol.point = v;
        sol.value = value;
        sol.kkt = kkt;
        sol.eq_multipliers = lambda;
        sol.ineq_multipliers = nu;
        if merit(&kkt) <= tol {
            sol.status = SolveStatus::Optimal;
            break;
        }
    }
    sol
}

fn newton_step(p: &NlpProblem, sol: &LocalSolution, tol: f64) -> Result<Option<(Vec<f64>, DVector<f64>, DVector<f64>)>> {
    let v = &sol.point;
    let n = v.len();
    let ineq = p.eval_all(&p.inequalities, v)?;
    let active: Vec<usize> =
        (0..ineq.values.len()).filter(|i| ineq.values[*i] >= -tol || sol.ineq_multipliers[*i] > tol).collect();
    let free: Vec<usize> = (0..n)
        .filter(|j| {
            let eps = 1e-12 * (1.0 + v[*j].abs());
            v[*j] > p.lower[*j] + eps && v[*j] < p.upper[*j] - eps
        })
        .collect();
    let n_eq = sol.eq_multipliers.len();
    // Lagrangian gradient, objective gradient, active values and Jacobian
    let lagrangian = |w: &[f64]| -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>)> {
        let (_, gf) = p.eval_objective(w)?;
        let eq = p.eval_all(&p.equalities, w)?;
        let ineq = p.eval_all(&p.inequalities, w)?;
        let mut gl = gf.clone();
        if n_eq > 0 {
            gl += eq.jacobian.transpose() * &sol.eq_multipliers;
        }
        let mut c = DVector::zeros(n_eq + active.len());
        let mut a = DMatrix::zeros(n_eq + active.len(), n);
        for r in 0..n_eq {
            c[r] = eq.values[r];
            a.row_mut(r).copy_from(&eq.jacobian.row(r));
        }
        for (k, i) in active.iter().enumerate() {
            gl += ineq.jacobian.row(*i).transpose() * sol.ineq_multipliers[*i];
            c[n_eq + k] = ineq.values[*i];
            a.row_mut(n_eq + k).copy_from(&ineq.jacobian.row(*i));
        }
        Ok((gl, gf, c, a))
    };
    let (_, gf, c, a) = lagrangian(v)?;
    let m = c.len();
    let nf = free.len();
    if nf == 0 {
        return Ok(None);
    }
    let mut hess = DMatrix::zeros(nf, nf);
    for (k, j) in free.iter().enumerate() {
        let h = 1e-6 * (1.0 + v[*j].abs());
        let mut up = v.clone();
        let mut dn = v.clone();
        up[*j] += h;
        dn[*j] -= h;
        let gu = lagrangian(&up)?.0;
        let gd = lagrangian(&dn)?.0;
        for (r, i) in free.iter().enumerate() {
            hess[(r, k)] = (gu[*i] - gd[*i]) / (2.0 * h);
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let mut kmat = DMatrix::zeros(nf + m, nf + m);
    kmat.view_mut((0, 0), (nf, nf)).copy_from(&hess);
    let mut rhs = DVector::zeros(nf + m);
    for (r, i) in free.iter().enumerate() {
        rhs[r] = -gf[*i];
        for q in 0..m {
            kmat[(r, nf + q)] = a[(q, *i)];
            kmat[(nf + q, r)] = a[(q, *i)];
        }
    }
    for q in 0..m {
        rhs[nf + q] = -c[q];
    }
    let Some(sol_vec) = kmat.clone().lu().solve(&rhs).or_else(|| kmat.svd(true, true).solve(&rhs, 1e-14).ok()) else {
        return Ok(None);
    };
    if sol_vec.iter().any(|t| !t.is_finite()) {
        return Ok(None);
    }
    let mut w = v.clone();
    for (r, j) in free.iter().enumerate() {
        w[*j] += sol_vec[r];
    }
    p.project(&mut w);
    let lambda = sol_vec.rows(nf, n_eq).into_owned();
    let mut nu = DVector::zeros(sol.ineq_multipliers.len());
    for (k, i) in active.iter().enumerate() {
        nu[*i] = sol_vec[nf + n_eq + k].max(0.0);
    }
    Ok(Some((w, lambda, nu)))
}

/// Settings of the multistart driver.
#[derive(Debug, Clone, Copy)]
pub struct MultistartOptions {
    pub n_starts: usize,
    pub stop_hits: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub exec: Execution,
    /// Starts solved per parallel batch; reports do not depend on it.
    pub batch: usize,
    pub solver: SolverOptions,
}

impl Default for MultistartOptions {
    fn default() -> Self {
        Self {
            n_starts: 30,
            stop_hits: 5,
            rel_tol: 1e-4,
            seed: 0,
            exec: Execution::Parallel,
            batch: 6,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StartRecord {
    pub index: usize,
    pub status: SolveStatus,
    pub value: f64,
    /// Incumbent value after processing this start.
    pub incumbent: f64,
}

#[derive(Debug, Clone)]
pub struct MultistartReport {
    pub best: LocalSolution,
    pub best_start: usize,
    pub n_starts_run: usize,
    pub n_hits_of_best: usize,
    pub starts: Vec<StartRecord>,
}

impl MultistartReport {
    pub fn best_point(&self) -> &[f64] {
        &self.best.point
    }

    pub fn best_value(&self) -> f64 {
        self.best.value
    }
}

/// Uniform random start `index` for the problem, completed by its start hook.
pub fn random_start(p: &NlpProblem, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, index as u64);
    let mut v: Vec<f64> = p.lower.iter().zip(&p.upper).map(|(l, u)| if l < u { rng.random_range(*l..=*u) } else { *l }).collect();
    p.complete_start(&mut v);
    v
}

/// Solve from uniform random starts until the best value has been matched `stop_hits` times.
pub fn multistart(p: &NlpProblem, n_starts: usize, stop_hits: usize, rel_tol: f64, seed: u64) -> Result<MultistartReport> {
    multistart_with(p, &MultistartOptions { n_starts, stop_hits, rel_tol, seed, ..Default::default() })
}

pub fn multistart_with(p: &NlpProblem, opts: &MultistartOptions) -> Result<MultistartReport> {
    if p.lower.iter().chain(&p.upper).any(|b| !b.is_finite()) {
        return Err(Error::InvalidArgument("multistart needs finite bounds".into()));
    }
    let matches = |a: f64, b: f64| (a - b).abs() <= opts.rel_tol * b.abs().max(1.0);
    let mut best: Option<(usize, LocalSolution)> = None;
    let mut hits = 0;
    let mut starts = Vec::new();
    let batch = opts.batch.max(1);
    let mut next = 0;
    'outer: while next < opts.n_starts {
        let count = batch.min(opts.n_starts - next);
        let results = map_range(opts.exec, count, |j| {
            let x0 = random_start(p, opts.seed, next + j);
            solve_local_with(p, &x0, &opts.solver)
        });
        for (j, sol) in results.into_iter().enumerate() {
            let index = next + j;
            let usable = sol.is_usable(opts.solver.tol) && sol.value.is_finite();
            if usable {
                match &best {
                    Some((_, b)) if matches(sol.value, b.value) => {
                        hits += 1;
                        if sol.status == SolveStatus::Optimal && b.status != SolveStatus::Optimal {
                            best = Some((index, sol.clone()));
                        }
                    }
                    Some((_, b)) if sol.value > b.value => {}
                    _ => {
                        best = Some((index, sol.clone()));
                        hits = 1;
                    }
                }
            }
            let incumbent = best.as_ref().map_or(f64::INFINITY, |b| b.1.value);
            starts.push(StartRecord { index, status: sol.status, value: sol.value, incumbent });
            if hits >= opts.stop_hits {
                break 'outer;
            }
        }
        next += count;
    }
    let (best_start, best) =
        best.ok_or_else(|| Error::NoSolution(format!("none of {} starts produced a usable point", starts.len())))?;
    Ok(MultistartReport { best, best_start, n_starts_run: starts.len(), n_hits_of_best: hits, starts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smooth::FnMap;
    use approx::assert_relative_eq;

    fn quad1() -> NlpProblem {
        NlpProblem::new(vec![-10.0], vec![10.0], Arc::new(|v: &[f64]| Ok(((v[0] - 1.0).powi(2), DVector::from_element(1, 2.0 * (v[0] - 1.0))))))
            .unwrap()
    }

    #[test]
    fn unconstrained_quadratic() {
        let s = solve_local(&quad1(), &[5.0]);
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.point[0] - 1.0).abs() < 1e-6);
        assert!(s.value.abs() < 1e-10);
    }

    #[test]
    fn disc_constrained_linear() {
        let obj: ObjectiveFn = Arc::new(|v: &[f64]| Ok((v[0] + v[1], DVector::from_vec(vec![1.0, 1.0]))));
        let disc = FnMap::new(1, |v: &[f64]| {
            Ok(Evaluation {
                values: DVector::from_element(1, v[0] * v[0] + v[1] * v[1] - 1.0),
                jacobian: DMatrix::from_row_slice(1, 2, &[2.0 * v[0], 2.0 * v[1]]),
            })
        });
        let p = NlpProblem::new(vec![-5.0; 2], vec![5.0; 2], obj).unwrap().inequality(disc);
        let s = solve_local(&p, &[0.3, 0.1]);
        assert_eq!(s.status, SolveStatus::Optimal, "{:?}", s.kkt);
        let r = -std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.point[0] - r).abs() < 1e-5 && (s.point[1] - r).abs() < 1e-5);
        assert_relative_eq!(s.value, -std::f64::consts::SQRT_2, epsilon = 1e-6);
    }

    #[test]
    fn rosenbrock_in_box() {
        let obj: ObjectiveFn = Arc::new(|v: &[f64]| {
            let (x, y) = (v[0], v[1]);
            let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)]);
            Ok((f, g))
        });
        let p = NlpProblem::new(vec![-2.0; 2], vec![2.0; 2], obj).unwrap();
        let s = solve_local(&p, &[-1.2, 1.0]);
        assert!((s.point[0] - 1.0).abs() < 1e-5 && (s.point[1] - 1.0).abs() < 1e-5, "{:?}", s.point);
    }

    #[test]
    fn active_bound_is_respected() {
        let p = NlpProblem::new(vec![2.0], vec![4.0], quad1().objective).unwrap();
        let s = solve_local(&p, &[3.0]);
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_eq!(s.point[0], 2.0);
    }

    #[test]
    fn equality_constraint() {
        // min x^2 + y^2 s.t. x + y = 1
        let obj: ObjectiveFn = Arc::new(|v: &[f64]| Ok((v[0] * v[0] + v[1] * v[1], DVector::from_vec(vec![2.0 * v[0], 2.0 * v[1]]))));
        let line = FnMap::new(1, |v: &[f64]| {
            Ok(Evaluation { values: DVector::from_element(1, v[0] + v[1] - 1.0), jacobian: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]) })
        });
        let p = NlpProblem::new(vec![-3.0; 2], vec![3.0; 2], obj).unwrap().equality(line);
        let s = solve_local(&p, &[2.0, -1.0]);
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.point[0] - 0.5).abs() < 1e-6 && (s.point[1] - 0.5).abs() < 1e-6);
        assert!((s.eq_multipliers[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn finite_difference_objective_is_marked() {
        let p = NlpProblem::from_values(vec![-3.0], vec![3.0], |v| (v[0] - 0.5).powi(4) + v[0]).unwrap();
        let s = solve_local(&p, &[2.0]);
        assert!(s.approximate);
        assert!((s.point[0] - (0.5 - 0.25f64.cbrt())).abs() < 1e-3);
    }

    #[test]
    fn convex_problem_stops_after_stop_hits() {
        let r = multistart(&quad1(), 30, 5, 1e-4, 3).unwrap();
        assert_eq!(r.n_starts_run, 5);
        assert_eq!(r.n_hits_of_best, 5);
        assert!((r.best_point()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_fails() {
        let p = NlpProblem::new(vec![-1.0], vec![1.0], Arc::new(|_: &[f64]| Ok((f64::NAN, DVector::zeros(1))))).unwrap();
        assert_eq!(solve_local(&p, &[0.0]).status, SolveStatus::NumericalFailure);
        assert!(matches!(multistart(&p, 4, 2, 1e-4, 0), Err(Error::NoSolution(_))));
    }

    fn two_basins() -> NlpProblem {
        // smooth surrogate of min(x^2, (x-3)^2 + 0.5): softmin with small temperature
        NlpProblem::new(
            vec![-1.0],
            vec![4.0],
            Arc::new(|v: &[f64]| {
                let x = v[0];
                let (a, b) = (x * x, (x - 3.0).powi(2) + 0.5);
                let (da, db) = (2.0 * x, 2.0 * (x - 3.0));
                let t = 0.01;
                let m = a.min(b);
                let (ea, eb) = ((-(a - m) / t).exp(), (-(b - m) / t).exp());
                let f = m - t * (ea + eb).ln();
                let g = (ea * da + eb * db) / (ea + eb);
                Ok((f, DVector::from_element(1, g)))
            }),
        )
        .unwrap()
    }

    #[test]
    fn multistart_is_deterministic_and_policy_independent() {
        let p = two_basins();
        let a = multistart_with(&p, &MultistartOptions { seed: 8, exec: Execution::Sequential, batch: 1, ..Default::default() }).unwrap();
        let b = multistart_with(&p, &MultistartOptions { seed: 8, exec: Execution::Parallel, batch: 7, ..Default::default() }).unwrap();
        assert_eq!(a.best.point, b.best.point);
        assert_eq!(a.n_starts_run, b.n_starts_run);
        let inc: Vec<f64> = a.starts.iter().map(|s| s.incumbent).collect();
        assert!(inc.windows(2).all(|w| w[1] <= w[0]));
    }
}
