//! Global maximization of `x^T H^{-1}(xi)` over the latent ellipsoid by
//! branch-and-bound, robust-feasibility verification and the cutting-plane
//! fallback for solutions that fail verification.
//!
//! The objective is monotone in every coordinate (increasing where `x_i > 0`,
//! decreasing where `x_i < 0`), so the best corner of a box bounds it from
//! above and the worst corner bounds the global optimum from below whenever
//! the box meets the ellipsoid.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::uncertainty::{latent_bounding_box, UncertaintyEllipsoid, WarpedSet};

pub const MAX_VERTEX_DIM: usize = 20;

/// An axis-aligned latent box with its bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxNode {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub node_upper_bound: f64,
    pub node_lower_bound: f64,
}

/// Branch-and-bound settings.
#[derive(Debug, Clone, Copy)]
pub struct BnbOptions {
    pub eps_rel: f64,
    pub max_nodes: usize,
    pub trace: bool,
}

impl Default for BnbOptions {
    fn default() -> Self {
        Self { eps_rel: 1e-2, max_nodes: 1_000_000, trace: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeAction {
    Branched,
    PrunedOutside,
    PrunedInside,
    PrunedBound,
}

/// One processed node, for debugging output.
#[derive(Debug, Clone)]
pub struct NodeTrace {
    pub node: BoxNode,
    pub action: NodeAction,
    pub global_lower: f64,
    pub global_upper: f64,
}

#[derive(Debug, Clone)]
pub struct BnbResult {
    /// Value of the returned feasible point (the incumbent).
    pub value: f64,
    /// Observation-space maximizer `z = H^{-1}(xi)`.
    pub argpoint: DVector<f64>,
    pub latent_argpoint: DVector<f64>,
    pub upper_bound: f64,
    pub nodes: usize,
    /// Global (lower, upper) after every processed node.
    pub bound_history: Vec<(f64, f64)>,
    pub trace: Vec<NodeTrace>,
}

struct Heaped {
    ub: f64,
    seq: u64,
    node: BoxNode,
}

impl PartialEq for Heaped {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Heaped {}
impl PartialOrd for Heaped {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Heaped {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ub.total_cmp(&other.ub).then(other.seq.cmp(&self.seq))
    }
}

/// Problem in oriented coordinates `xi' = mu + S (xi - mu)`, `S = diag(sign x)`,
/// where the objective is nondecreasing in every coordinate.
struct Oriented<'a> {
    set: &'a WarpedSet,
    x: &'a DVector<f64>,
    sign: Vec<f64>,
    precision: DMatrix<f64>,
    mu: DVector<f64>,
    radius_sq: f64,
}

impl<'a> Oriented<'a> {
    fn new(set: &'a WarpedSet, x: &'a DVector<f64>) -> Result<Self> {
        let e = &set.ellipsoid;
        let sign: Vec<f64> = x.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&sign));
        let l = e.sigma_factor();
        let linv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(e.dim(), e.dim()))
            .ok_or_else(|| Error::NumericalFailure("covariance factor is singular".into()))?;
        let precision = &s * (linv.transpose() * linv) * &s;
        Ok(Self { set, x, sign, precision, mu: e.mu.clone(), radius_sq: e.radius_sq })
    }

    fn to_original(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(p.len(), |i, _| self.mu[i] + self.sign[i] * (p[i] - self.mu[i]))
    }

    fn value(&self, p: &DVector<f64>) -> Result<f64> {
        let xi = self.to_original(p);
        let mut v = 0.0;
        for i in 0..p.len() {
            if self.x[i] != 0.0 {
                v += self.x[i] * self.set.warp.inverse(xi[i])?;
            }
        }
        Ok(v)
    }

    fn mahalanobis(&self, p: &DVector<f64>) -> f64 {
        let d = p - &self.mu;
        d.dot(&(&self.precision * &d))
    }

    /// Minimizer of the Mahalanobis form over the box by projected coordinate descent.
    fn min_point(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
        let n = lo.len();
        let mut p = DVector::from_fn(n, |i, _| self.mu[i].clamp(lo[i], hi[i]));
        let pr = &self.precision;
        for _ in 0..10_000 {
            let mut change = 0.0f64;
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    if j != i {
                        acc += pr[(i, j)] * (p[j] - self.mu[j]);
                    }
                }
                let t = (self.mu[i] - acc / pr[(i, i)]).clamp(lo[i], hi[i]);
                change = change.max((t - p[i]).abs());
                p[i] = t;
            }
            let scale = hi.iter().zip(lo.iter()).fold(0.0f64, |a, (h, l)| a.max(h - l)).max(1e-300);
            if change <= 1e-13 * scale {
                break;
            }
        }
        p
    }

    /// Largest `t` in `[0, t_max]` with `p + t d` inside the ellipsoid (`p` inside).
    fn ray_to_boundary(&self, p: &DVector<f64>, d: &DVector<f64>, t_max: f64) -> f64 {
        let q = p - &self.mu;
        let pd = &self.precision * d;
        let a = d.dot(&pd);
        let b = 2.0 * q.dot(&pd);
        let c = q.dot(&(&self.precision * &q)) - self.radius_sq;
        if a <= 0.0 {
            return t_max;
        }
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let root = if b >= 0.0 { (2.0 * (-c)) / (b + disc.sqrt()) } else { (-b + disc.sqrt()) / (2.0 * a) };
        root.clamp(0.0, t_max)
    }
}

/// Minimum and maximum of the Mahalanobis form over a box.
fn box_extremes(o: &Oriented, lo: &DVector<f64>, hi: &DVector<f64>) -> (f64, f64) {
    let n = lo.len();
    let min = o.mahalanobis(&o.min_point(lo, hi));
    let mut max = 0.0f64;
    let mut v = DVector::zeros(n);
    for mask in 0u64..(1u64 << n) {
        for i in 0..n {
            v[i] = if mask >> i & 1 == 1 { hi[i] } else { lo[i] };
        }
        max = max.max(o.mahalanobis(&v));
    }
    (min, max)
}

/// Whether the box holds a point of the ellipsoid boundary.
pub fn node_intersects_boundary(node: &BoxNode, e: &UncertaintyEllipsoid) -> Result<bool> {
    let n = node.lower.len();
    if n > MAX_VERTEX_DIM {
        return Err(Error::UnsupportedDimension(n));
    }
    if n != e.dim() || node.upper.len() != n {
        return Err(Error::InvalidArgument("node and ellipsoid dimensions differ".into()));
    }
    let set = WarpedSet::new(e.clone(), crate::warping::ObservationWarp::identity());
    let ones = DVector::from_element(n, 1.0);
    let o = Oriented::new(&set, &ones)?;
    let (min, max) = box_extremes(&o, &node.lower, &node.upper);
    Ok(min <= e.radius_sq && e.radius_sq <= max)
}

/// Maximize `x^T H^{-1}(xi)` over the latent ellipsoid of `set`.
pub fn bnb_inner_max(set: &WarpedSet, x: &DVector<f64>, eps_rel: f64) -> Result<BnbResult> {
    bnb_inner_max_with(set, x, &BnbOptions { eps_rel, ..Default::default() })
}

pub fn bnb_inner_max_with(set: &WarpedSet, x: &DVector<f64>, opts: &BnbOptions) -> Result<BnbResult> {
    let n = set.dim();
    if x.len() != n {
        return Err(Error::InvalidArgument("weights and set differ in size".into()));
    }
    if n > MAX_VERTEX_DIM {
        return Err(Error::UnsupportedDimension(n));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite".into()));
    }
    let o = Oriented::new(set, x)?;
    let (lo0, hi0) = latent_bounding_box(&set.ellipsoid);
    let sd: Vec<f64> = (0..n).map(|i| set.ellipsoid.sigma[(i, i)].sqrt()).collect();

    let mut best_value = f64::NEG_INFINITY;
    let mut best_point = o.mu.clone();

    let make_node = |lo: DVector<f64>, hi: DVector<f64>, o: &Oriented| -> Result<BoxNode> {
        Ok(BoxNode { node_upper_bound: o.value(&hi)?, node_lower_bound: o.value(&lo)?, lower: lo, upper: hi })
    };

    if x.iter().all(|v| *v == 0.0) || set.ellipsoid.radius_sq == 0.0 {
        let value = o.value(&o.mu)?;
        let z = set.to_observed(&set.ellipsoid.mu)?;
        return Ok(BnbResult {
            value,
            argpoint: z,
            latent_argpoint: set.ellipsoid.mu.clone(),
            upper_bound: value,
            nodes: 0,
            bound_history: vec![(value, value)],
            trace: Vec::new(),
        });
    }

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let root = make_node(lo0, hi0, &o)?;
    heap.push(Heaped { ub: root.node_upper_bound, seq, node: root });
    let mut nodes = 0usize;
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut global_lower = f64::NEG_INFINITY;

    let converged =
        |lower: f64, upper: f64| lower.is_finite() && upper - lower <= opts.eps_rel * upper.abs().max(lower.abs()).max(1e-12);

    while let Some(Heaped { node, .. }) = heap.pop() {
        let global_upper = node.node_upper_bound.max(global_lower);
        if converged(global_lower, global_upper) {
            heap.push(Heaped { ub: node.node_upper_bound, seq: 0, node });
            break;
        }
        if nodes >= opts.max_nodes {
            return Err(Error::BudgetExceeded { nodes, lower: global_lower, upper: global_upper });
        }
        nodes += 1;
        let action;
        if node.node_upper_bound <= global_lower {
            action = NodeAction::PrunedBound;
        } else {
            let pmin = o.min_point(&node.lower, &node.upper);
            let dmin = o.mahalanobis(&pmin);
            if dmin > o.radius_sq {
                action = NodeAction::PrunedOutside;
            } else {
                // a feasible point of the box pushed toward its best corner
                let d = &node.upper - &pmin;
                let t = o.ray_to_boundary(&pmin, &d, 1.0);
                let p = &pmin + d * t;
                let v = o.value(&p)?;
                if v > best_value {
                    best_value = v;
                    best_point = p;
                }
                let (_, dmax) = box_extremes(&o, &node.lower, &node.upper);
                if dmax < o.radius_sq {
                    action = NodeAction::PrunedInside;
                } else {
                    // the worst corner bounds the optimum because some feasible point dominates it
                    global_lower = global_lower.max(best_value).max(node.node_lower_bound);
                    let split = (0..n)
                        .max_by(|a, b| {
                            let wa = (node.upper[*a] - node.lower[*a]) / sd[*a];
                            let wb = (node.upper[*b] - node.lower[*b]) / sd[*b];
                            wa.total_cmp(&wb).then(b.cmp(a))
                        })
                        .unwrap_or(0);
                    let mid = 0.5 * (node.lower[split] + node.upper[split]);
                    let mut hi_left = node.upper.clone();
                    hi_left[split] = mid;
                    let mut lo_right = node.lower.clone();
                    lo_right[split] = mid;
                    for (lo, hi) in [(node.lower.clone(), hi_left), (lo_right, node.upper.clone())] {
                        let child = make_node(lo, hi, &o)?;
                        if child.node_upper_bound > global_lower {
                            seq += 1;
                            heap.push(Heaped { ub: child.node_upper_bound, seq, node: child });
                        }
                    }
                    action = NodeAction::Branched;
                }
            }
        }
        global_lower = global_lower.max(best_value);
        let upper_now = heap.peek().map_or(global_lower, |h| h.node.node_upper_bound.max(global_lower));
        history.push((global_lower, upper_now));
        if opts.trace {
            trace.push(NodeTrace { node, action, global_lower, global_upper: upper_now });
        }
    }
    if !best_value.is_finite() {
        return Err(Error::NumericalFailure("branch-and-bound found no feasible point".into()));
    }
    let upper_bound = heap.peek().map_or(best_value, |h| h.node.node_upper_bound.max(best_value));

    // push the incumbent onto the boundary along the objective gradient; this cannot lower its value
    let xi = o.to_original(&best_point);
    let grad = DVector::from_fn(n, |i, _| {
        if x[i] == 0.0 {
            0.0
        } else {
            let z = set.warp.inverse(xi[i]).unwrap_or(xi[i]);
            x[i].abs() / set.warp.derivative(z)
        }
    });
    if grad.amax() > 0.0 && o.mahalanobis(&best_point) < o.radius_sq {
        let t = o.ray_to_boundary(&best_point, &grad, f64::INFINITY);
        let moved = &best_point + grad * t;
        let v = o.value(&moved)?;
        if v >= best_value {
            best_value = v;
            best_point = moved;
        }
    }
    let latent = o.to_original(&best_point);
    let argpoint = set.to_observed(&latent)?;
    Ok(BnbResult {
        value: best_value,
        argpoint,
        latent_argpoint: latent,
        upper_bound: upper_bound.max(best_value),
        nodes,
        bound_history: history,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verification {
    Feasible { worst_value: f64 },
    Infeasible { worst_value: f64, worst_point: DVector<f64> },
}

impl Verification {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Self::Feasible { .. })
    }

    pub fn worst_value(&self) -> f64 {
        match self {
            Self::Feasible { worst_value } | Self::Infeasible { worst_value, .. } => *worst_value,
        }
    }
}

/// Check `max_{z in U} z^T x <= b + tol * max(1, |b|)`.
pub fn verify_robust_feasibility(set: &WarpedSet, x: &DVector<f64>, b: f64, tol: f64) -> Result<Verification> {
    let r = bnb_inner_max(set, x, tol.min(1e-2))?;
    if r.value <= b + tol * b.abs().max(1.0) {
        Ok(Verification::Feasible { worst_value: r.value })
    } else {
        Ok(Verification::Infeasible { worst_value: r.value, worst_point: r.argpoint })
    }
}

/// One aggregate constraint evaluated at an outer solution.
#[derive(Debug, Clone)]
pub struct InnerInstance {
    pub set: WarpedSet,
    pub x: DVector<f64>,
    pub b: f64,
}

/// Fixed scenario `z` for aggregate constraint `constraint`: requires `z^T x <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cut {
    pub constraint: usize,
    pub z: DVector<f64>,
}

/// Outer problem of the bilevel robust program.
pub trait RobustOuterProgram {
    /// Solve with every aggregate constraint replaced by its finite cut set; returns point and objective.
    fn solve(&self, cuts: &[Cut]) -> Result<(Vec<f64>, f64)>;
    /// Uncertainty set, weights and bound of every aggregate constraint at `point`.
    fn inner_instances(&self, point: &[f64]) -> Result<Vec<InnerInstance>>;
}

#[derive(Debug, Clone)]
pub struct FallbackResult {
    pub point: Vec<f64>,
    pub objective: f64,
    pub rounds: usize,
    pub cuts: Vec<Cut>,
    pub verified: bool,
    /// Largest `max_z z^T x - b` at the returned point.
    pub max_violation: f64,
    pub objective_history: Vec<f64>,
}

/// Cutting-plane loop: solve the outer problem, add the worst-case scenario of
/// every violated constraint, repeat until verified or `max_rounds` is reached.
pub fn bilevel_fallback(program: &dyn RobustOuterProgram, max_rounds: usize, tol: f64) -> Result<FallbackResult> {
    let mut cuts = Vec::new();
    let mut history = Vec::new();
    let mut last = None;
    for round in 1..=max_rounds.max(1) {
        let (point, objective) = program.solve(&cuts)?;
        history.push(objective);
        let mut worst = f64::NEG_INFINITY;
        let mut new_cuts = Vec::new();
        for (c, inst) in program.inner_instances(&point)?.into_iter().enumerate() {
            match verify_robust_feasibility(&inst.set, &inst.x, inst.b, tol)? {
                Verification::Feasible { worst_value } => worst = worst.max(worst_value - inst.b),
                Verification::Infeasible { worst_value, worst_point } => {
                    worst = worst.max(worst_value - inst.b);
                    new_cuts.push(Cut { constraint: c, z: worst_point });
                }
            }
        }
        let verified = new_cuts.is_empty();
        last = Some((point, objective, round, worst, verified));
        if verified {
            break;
        }
        cuts.extend(new_cuts);
    }
    let (point, objective, rounds, max_violation, verified) = last.expect("at least one round runs");
    Ok(FallbackResult { point, objective, rounds, cuts, verified, max_violation, objective_history: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warping::{ObservationWarp, WarpParams};
    use approx::assert_relative_eq;

    fn set(mu: &[f64], sigma: &[f64], f: f64, warp: ObservationWarp) -> WarpedSet {
        let n = mu.len();
        WarpedSet::new(
            UncertaintyEllipsoid::with_radius(DVector::from_column_slice(mu), DMatrix::from_row_slice(n, n, sigma), f).unwrap(),
            warp,
        )
    }

    #[test]
    fn identity_unit_circle() {
        let s = set(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 1.0, ObservationWarp::identity());
        let r = bnb_inner_max(&s, &DVector::from_vec(vec![1.0, 1.0]), 1e-2).unwrap();
        assert!((r.value - 2f64.sqrt()).abs() <= 1e-2 * 2f64.sqrt());
        assert!(r.upper_bound >= 2f64.sqrt() - 1e-12);
    }

    #[test]
    fn one_dimensional_corner_is_exact() {
        let w = ObservationWarp::raw(WarpParams::single(0.8, 1.3, -0.2).unwrap());
        let s = set(&[0.4], &[0.25], 3.0, w.clone());
        let r = bnb_inner_max(&s, &DVector::from_vec(vec![2.0]), 1e-2).unwrap();
        let exact = 2.0 * w.inverse(0.4 + 3f64.sqrt() * 0.5).unwrap();
        assert_relative_eq!(r.value, exact, epsilon = 1e-9);
    }

    #[test]
    fn negative_weights_use_the_opposite_corner() {
        let s = set(&[0.3, -0.2], &[1.0, 0.4, 0.4, 0.5], 2.0, ObservationWarp::identity());
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let r = bnb_inner_max(&s, &x, 1e-4).unwrap();
        let sigma = &s.ellipsoid.sigma;
        let exact = s.ellipsoid.mu.dot(&x) + (2.0 * x.dot(&(sigma * &x))).sqrt();
        assert!((r.value - exact).abs() <= 1e-4 * exact.abs());
    }

    #[test]
    fn zero_weights_give_center_value() {
        let s = set(&[0.3, -0.2], &[1.0, 0.0, 0.0, 1.0], 2.0, ObservationWarp::identity());
        let r = bnb_inner_max(&s, &DVector::zeros(2), 1e-2).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(verify_robust_feasibility(&s, &DVector::zeros(2), 0.0, 1e-2).unwrap().is_feasible());
    }

    #[test]
    fn budget_is_enforced() {
        let s = set(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 1.0, ObservationWarp::identity());
        let opts = BnbOptions { eps_rel: 1e-9, max_nodes: 5, trace: false };
        let e = bnb_inner_max_with(&s, &DVector::from_vec(vec![1.0, 1.0]), &opts).unwrap_err();
        assert!(matches!(e, Error::BudgetExceeded { nodes: 5, .. }));
    }

    #[test]
    fn boundary_classification_examples() {
        let e = UncertaintyEllipsoid::with_radius(DVector::zeros(2), DMatrix::identity(2, 2), 1.0).unwrap();
        let inside = BoxNode {
            lower: DVector::from_vec(vec![-0.1, -0.1]),
            upper: DVector::from_vec(vec![0.1, 0.1]),
            node_upper_bound: 0.0,
            node_lower_bound: 0.0,
        };
        assert!(!node_intersects_boundary(&inside, &e).unwrap());
        let all = BoxNode { lower: DVector::from_vec(vec![-2.0, -2.0]), upper: DVector::from_vec(vec![2.0, 2.0]), ..inside.clone() };
        assert!(node_intersects_boundary(&all, &e).unwrap());
        let outside = BoxNode { lower: DVector::from_vec(vec![1.5, 1.5]), upper: DVector::from_vec(vec![2.0, 2.0]), ..inside };
        assert!(!node_intersects_boundary(&outside, &e).unwrap());
    }

    #[test]
    fn large_dimension_is_rejected() {
        let n = 21;
        let e = UncertaintyEllipsoid::with_radius(DVector::zeros(n), DMatrix::identity(n, n), 1.0).unwrap();
        let node = BoxNode { lower: DVector::zeros(n), upper: DVector::zeros(n), node_upper_bound: 0.0, node_lower_bound: 0.0 };
        assert!(matches!(node_intersects_boundary(&node, &e), Err(Error::UnsupportedDimension(21))));
    }
}
