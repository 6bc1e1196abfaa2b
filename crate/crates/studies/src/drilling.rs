//! Drill scheduling with uncertain mud-motor degradation.
//!
//! Units: depth m, weight on bit N, rotary speed rpm, torque N·m, motor
//! pressure drop MPa, time h. Inside the NLP the weight on bit is scaled to
//! 10 kN and the top-drive speed to 100 rpm, maintenance depths to km.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use wgpro_core::exec::{map_ordered, Execution};
use wgpro_core::gp::{FitOptions, TrainingData};
use wgpro_core::innermax::{bnb_inner_max, verify_robust_feasibility};
use wgpro_core::nlp::{multistart_with, solve_local_with, InnerMethod, MultistartOptions, NlpProblem, SolveStatus};
use wgpro_core::reformulate::{
    convexity_certificate, nominal_counterpart, solve_wolfe_kkt, wolfe_counterpart, wolfe_scales, AggregateUncertainConstraint,
    Certificate, UncertainModel, XSign,
};
use wgpro_core::smooth::{Affine, Evaluation, FnMap, MapRef};
use wgpro_core::table::{parse_csv, read_csv, Cell, Table};
use wgpro_core::uncertainty::{chi2_quantile, latent_bounding_box, UncertaintyEllipsoid, WarpedSet};
use wgpro_core::warping::{fit_warped_gp_with, WarpedGpModel};
use wgpro_core::{Error, Result};

pub const LIFETIME_CSV: &str = include_str!("../data/pdm_lifetime.csv");
pub const GEOLOGY_2SEG_CSV: &str = include_str!("../data/geology_2seg.csv");
pub const GEOLOGY_6SEG_CSV: &str = include_str!("../data/geology_6seg.csv");

/// Rock-bit interaction parameters of one formation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RockParams {
    /// Intrinsic specific energy S*, MPa.
    pub s_star: f64,
    /// Weight per unit radius at the regime switch, N/mm.
    pub w_star: f64,
    /// ξε, MPa.
    pub xi_eps: f64,
    /// μγ'.
    pub mu_gamma: f64,
    /// (1-β)w*, N/mm: intercept of the cutting torque line. Kept for reference; the
    /// response shifts that line to meet the friction line at `w_star`.
    pub w_friction: f64,
    pub xi: f64,
}

impl RockParams {
    pub const SHALE: Self = Self { s_star: 278.0, w_star: 199.0, xi_eps: 125.0, mu_gamma: 0.48, w_friction: 157.0, xi: 0.98 };
    pub const SANDSTONE: Self = Self { s_star: 315.0, w_star: 59.0, xi_eps: 50.0, mu_gamma: 0.93, w_friction: 33.0, xi: 0.65 };

    pub fn by_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "shale" => Ok(Self::SHALE),
            "sandstone" => Ok(Self::SANDSTONE),
            other => Err(Error::InvalidArgument(format!("unknown rock {other:?} (expected shale or sandstone)"))),
        }
    }
}

/// Bit geometry and operating limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitParams {
    /// Bit radius a, mm.
    pub radius: f64,
    pub rho: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Top-drive speed limit, rpm.
    pub n_max: f64,
}

impl Default for BitParams {
    fn default() -> Self {
        Self { radius: 100.4, rho: 0.0, w_min: 1_000.0, w_max: 40_000.0, n_max: 120.0 }
    }
}

/// Quadratic motor characteristics: pressure drop from torque and motor speed from pressure drop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerCurve {
    /// Δp = c0 + c1 T + c2 T².
    pub pressure: [f64; 3],
    /// N_motor = d0 + d1 Δp + d2 Δp².
    pub motor_speed: [f64; 3],
    /// Operating limit on Δp; also the upper end of the lifetime data.
    pub dp_max: f64,
}

impl Default for PowerCurve {
    fn default() -> Self {
        Self { pressure: [0.8, 1.2e-3, 1e-7], motor_speed: [150.0, -5.0, -1.5], dp_max: 5.0 }
    }
}

fn quad(c: &[f64; 3], x: f64) -> (f64, f64) {
    (c[0] + c[1] * x + c[2] * x * x, c[1] + 2.0 * c[2] * x)
}

/// `max(s, 0)`, or its softplus with width `kappa`, and the derivative.
fn ramp(s: f64, kappa: f64) -> (f64, f64) {
    if kappa <= 0.0 {
        return if s > 0.0 { (s, 1.0) } else { (0.0, 0.0) };
    }
    let r = s / kappa;
    if r > 40.0 {
        (s, 1.0)
    } else {
        (kappa * r.exp().ln_1p(), 1.0 / (1.0 + (-r).exp()))
    }
}

/// Operating point of the bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    /// Rate of penetration, m/h.
    pub rop: f64,
    /// Motor pressure drop, MPa.
    pub delta_p: f64,
    /// Bit torque, N·m.
    pub torque: f64,
    /// Bit speed (top drive plus motor), rpm.
    pub n_bit: f64,
    /// Depth of cut, mm/rev.
    pub depth_of_cut: f64,
    /// Scaled torque t, N/mm.
    pub t: f64,
}

#[derive(Debug, Clone, Copy)]
struct ResponseGrad {
    r: Response,
    drop_dw: f64,
    drop_dn: f64,
    ddp_dw: f64,
}

fn evaluate(weight: f64, n_top: f64, rock: &RockParams, bit: &BitParams, pc: &PowerCurve, kappa: f64) -> ResponseGrad {
    let per_mm = 1.0 / (bit.radius * (1.0 - bit.rho));
    let w = weight * per_mm;
    let k = 1.0 / rock.xi_eps - 1.0 / rock.s_star;
    let (r1, r1p) = ramp(w - rock.w_star, kappa);
    let d = w / rock.s_star + k * r1;
    let dd = (1.0 / rock.s_star + k * r1p) * per_mm;
    // torque: friction line up to w*, then slope 1/xi shifted to stay continuous
    let kt = 1.0 / rock.xi - rock.mu_gamma;
    let t = rock.mu_gamma * w + kt * r1;
    let dt = (rock.mu_gamma + kt * r1p) * per_mm;
    let tf = bit.radius * bit.radius * (1.0 - bit.rho * bit.rho) / 2000.0;
    let torque = t * tf;
    let (dp, dp_dt) = quad(&pc.pressure, torque);
    let ddp = dp_dt * dt * tf;
    let (nm, nm_dp) = quad(&pc.motor_speed, dp);
    let n_bit = n_top + nm;
    let rop = 0.06 * d * n_bit;
    ResponseGrad {
        r: Response { rop, delta_p: dp, torque, n_bit, depth_of_cut: d, t },
        drop_dw: 0.06 * (dd * n_bit + d * nm_dp * ddp),
        drop_dn: 0.06 * d,
        ddp_dw: ddp,
    }
}

/// Rate of penetration and motor load at weight on bit `weight` (N) and top-drive speed `n_top` (rpm).
pub fn detournay_response(weight: f64, n_top: f64, rock: &RockParams, bit: &BitParams, pc: &PowerCurve) -> Result<Response> {
    if !(weight > 0.0 && weight <= bit.w_max) {
        return Err(Error::InvalidArgument(format!("weight on bit {weight} N outside (0, {}]", bit.w_max)));
    }
    if !(0.0..=bit.n_max).contains(&n_top) {
        return Err(Error::InvalidArgument(format!("top-drive speed {n_top} rpm outside [0, {}]", bit.n_max)));
    }
    let r = evaluate(weight, n_top, rock, bit, pc, 0.0).r;
    if r.n_bit <= 0.0 {
        return Err(Error::InvalidArgument(format!("motor stalls at delta_p = {} MPa", r.delta_p)));
    }
    Ok(r)
}

/// Lifetime measurements of the mud motor.
#[derive(Debug, Clone, PartialEq)]
pub struct LifetimeData {
    pub delta_p: Vec<f64>,
    pub lifetime_h: Vec<f64>,
}

impl LifetimeData {
    pub fn from_table(t: &Table) -> Result<Self> {
        let col = |name: &str| t.floats(name).ok_or_else(|| Error::InvalidArgument(format!("lifetime data needs a {name} column")));
        let delta_p = col("delta_p_mpa")?;
        let lifetime_h = col("lifetime_h")?;
        if delta_p.len() < 2 || delta_p.iter().chain(&lifetime_h).any(|v| !v.is_finite()) || lifetime_h.iter().any(|l| *l <= 0.0) {
            return Err(Error::InvalidArgument("lifetime data needs at least two finite rows with positive lifetimes".into()));
        }
        Ok(Self { delta_p, lifetime_h })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&read_csv(path)?)
    }

    pub fn builtin() -> Self {
        Self::from_table(&parse_csv(LIFETIME_CSV).expect("bundled csv parses")).expect("bundled lifetime data is valid")
    }

    /// Degradation rates `1 / lifetime` per hour.
    pub fn rates(&self) -> Vec<f64> {
        self.lifetime_h.iter().map(|l| 1.0 / l).collect()
    }
}

/// Warped GP of the degradation rate (1/h) over the pressure drop (MPa).
pub fn fit_degradation_model(data: &LifetimeData, warp_terms: usize, restarts: usize, seed: u64, exec: Execution) -> Result<WarpedGpModel> {
    let td = TrainingData::from_1d(&data.delta_p, &data.rates())?;
    fit_warped_gp_with(&td, warp_terms, &FitOptions { restarts, seed, exec, ..Default::default() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    /// Inverse-warped posterior mean, 1/h.
    pub rate: f64,
    /// `delta_p` lies outside the data range widened to 1.5 times its width.
    pub extrapolated: bool,
}

pub fn degradation_rate(delta_p: f64, model: &WarpedGpModel) -> Result<RateEstimate> {
    if !delta_p.is_finite() {
        return Err(Error::InvalidArgument("pressure drop must be finite".into()));
    }
    let x = model.latent_gp().data().inputs.column(0);
    let (lo, hi) = (x.min(), x.max());
    let pad = 0.25 * (hi - lo);
    let rate = model.predict_nominal(&DMatrix::from_element(1, 1, delta_p))?[0];
    Ok(RateEstimate { rate, extrapolated: delta_p < lo - pad || delta_p > hi + pad })
}

/// A rock formation starting at depth `top`.
#[derive(Debug, Clone, PartialEq)]
pub struct Formation {
    pub top: f64,
    pub name: String,
    pub rock: RockParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geology {
    pub formations: Vec<Formation>,
}

impl Geology {
    /// Columns `top_m` and `rock`; tops strictly increasing.
    pub fn from_table(t: &Table) -> Result<Self> {
        let (Some(jt), Some(jr)) = (t.column("top_m"), t.column("rock")) else {
            return Err(Error::InvalidArgument("geology needs top_m and rock columns".into()));
        };
        let mut formations = Vec::new();
        for row in &t.rows {
            let top = row[jt].as_f64().ok_or_else(|| Error::InvalidArgument(format!("bad formation top {}", row[jt])))?;
            let name = row[jr].to_string().trim().to_ascii_lowercase();
            formations.push(Formation { top, rock: RockParams::by_name(&name)?, name });
        }
        if formations.is_empty() || formations.windows(2).any(|w| w[1].top <= w[0].top) || !formations[0].top.is_finite() {
            return Err(Error::InvalidArgument("formation tops must be finite and strictly increasing".into()));
        }
        Ok(Self { formations })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&read_csv(path)?)
    }

    pub fn two_segment() -> Self {
        Self::from_table(&parse_csv(GEOLOGY_2SEG_CSV).expect("bundled csv parses")).expect("bundled geology is valid")
    }

    pub fn six_segment() -> Self {
        Self::from_table(&parse_csv(GEOLOGY_6SEG_CSV).expect("bundled csv parses")).expect("bundled geology is valid")
    }
}

/// A geological segment between two depths.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub name: String,
    pub rock: RockParams,
}

#[derive(Debug, Clone)]
pub struct DrillInstance {
    pub geology: Geology,
    pub target_depth: f64,
    pub bit: BitParams,
    pub power: PowerCurve,
    /// Maintenance time `base + per_m * depth`, h.
    pub maintenance_base: f64,
    pub maintenance_per_m: f64,
    /// Softplus width (N/mm) smoothing the response kinks inside the NLP; 0 disables it.
    pub smoothing: f64,
    pub rate_model: WarpedGpModel,
}

impl DrillInstance {
    pub fn new(geology: Geology, target_depth: f64, rate_model: WarpedGpModel) -> Result<Self> {
        let inst = Self {
            geology,
            target_depth,
            bit: BitParams::default(),
            power: PowerCurve::default(),
            maintenance_base: 8.0,
            maintenance_per_m: 0.004,
            smoothing: 1.0,
            rate_model,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let x0 = self.geology.formations[0].top;
        if !(self.target_depth > x0) {
            return Err(Error::InvalidArgument(format!("target depth {} must exceed the first formation top {x0}", self.target_depth)));
        }
        let b = &self.bit;
        if !(b.radius > 0.0 && (0.0..1.0).contains(&b.rho) && 0.0 < b.w_min && b.w_min < b.w_max && b.n_max >= 0.0) {
            return Err(Error::InvalidArgument("bit parameters out of range".into()));
        }
        if !(self.maintenance_base >= 0.0 && self.maintenance_per_m >= 0.0 && self.smoothing >= 0.0) {
            return Err(Error::InvalidArgument("maintenance times and smoothing must be nonnegative".into()));
        }
        if self.rate_model.latent_gp().kernel().input_dim() != 1 {
            return Err(Error::InvalidArgument("the degradation model takes the pressure drop as its only input".into()));
        }
        for f in &self.geology.formations {
            if self.response(b.w_min, 0.0, &f.rock).r.n_bit <= 0.0 {
                return Err(Error::InvalidArgument(format!("motor stalls at minimum weight in {}", f.name)));
            }
        }
        Ok(())
    }

    /// Geological segments above the target depth.
    pub fn segments(&self) -> Vec<Segment> {
        let f = &self.geology.formations;
        let mut out = Vec::new();
        for (i, fm) in f.iter().enumerate() {
            if fm.top >= self.target_depth {
                break;
            }
            let hi = f.get(i + 1).map_or(self.target_depth, |n| n.top.min(self.target_depth));
            out.push(Segment { lo: fm.top, hi, name: fm.name.clone(), rock: fm.rock });
        }
        out
    }

    /// Index of the segment containing depth `x` (boundaries belong to the deeper segment).
    pub fn segment_of(&self, x: f64) -> usize {
        let segs = self.segments();
        segs.iter().rposition(|s| s.lo <= x).unwrap_or(0)
    }

    pub fn maintenance_time(&self, depth: f64) -> f64 {
        self.maintenance_base + self.maintenance_per_m * depth
    }

    fn response(&self, weight: f64, n_top: f64, rock: &RockParams) -> ResponseGrad {
        evaluate(weight, n_top, rock, &self.bit, &self.power, self.smoothing)
    }

    /// Largest admissible weight on bit in `rock`: `w_max`, or where Δp reaches `dp_max`.
    pub fn weight_cap(&self, rock: &RockParams) -> f64 {
        let dp = |w: f64| self.response(w, 0.0, rock).r.delta_p;
        if dp(self.bit.w_max) <= self.power.dp_max {
            return self.bit.w_max;
        }
        let (mut lo, mut hi) = (self.bit.w_min, self.bit.w_max);
        if dp(lo) > self.power.dp_max {
            return lo;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if dp(mid) <= self.power.dp_max {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Below this squared radius the robust counterpart of a group is replaced by the
/// nominal one: the Wolfe system degenerates as the set shrinks to a point.
pub const NOMINAL_RADIUS_SQ: f64 = 1e-2;

fn nearly_nominal(alpha: f64, k: usize) -> bool {
    chi2_quantile(k.max(1), 1.0 - alpha).is_ok_and(|r| r < NOMINAL_RADIUS_SQ)
}

/// How the degradation constraints enter the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    Ignore,
    Nominal,
    /// Worst case over the warped-GP uncertainty set at confidence `1 - alpha`.
    Robust { alpha: f64 },
}

impl Degradation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ignore => "ignore",
            Self::Nominal => "nominal",
            Self::Robust { .. } => "robust",
        }
    }

    pub fn confidence(self) -> Option<f64> {
        match self {
            Self::Robust { alpha } => Some(1.0 - alpha),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum End {
    Fixed(f64),
    Event(usize),
}

#[derive(Debug, Clone)]
struct Span {
    seg: usize,
    start: End,
    end: End,
}

/// Index arithmetic of the schedule variables `(W/1e4, N/100, x_event/1e3[, z, u per group])`.
#[derive(Debug, Clone)]
struct Layout {
    segments: Vec<Segment>,
    spans: Vec<Span>,
    n_events: usize,
    event_seg: Vec<usize>,
    /// Span indices of each degradation group, in depth order.
    groups: Vec<Vec<usize>>,
}

impl Layout {
    fn new(segments: Vec<Segment>, assignment: &[usize]) -> Self {
        let mut spans = Vec::new();
        let mut groups = vec![Vec::new()];
        let mut event = 0;
        for (s, seg) in segments.iter().enumerate() {
            let mut start = End::Fixed(seg.lo);
            while event < assignment.len() && assignment[event] == s {
                groups.last_mut().unwrap().push(spans.len());
                spans.push(Span { seg: s, start, end: End::Event(event) });
                groups.push(Vec::new());
                start = End::Event(event);
                event += 1;
            }
            groups.last_mut().unwrap().push(spans.len());
            spans.push(Span { seg: s, start, end: End::Fixed(seg.hi) });
        }
        Self { segments, spans, n_events: assignment.len(), event_seg: assignment.to_vec(), groups }
    }

    fn n_spans(&self) -> usize {
        self.spans.len()
    }

    fn w(&self, i: usize) -> usize {
        i
    }

    fn n(&self, i: usize) -> usize {
        self.n_spans() + i
    }

    fn p(&self, e: usize) -> usize {
        2 * self.n_spans() + e
    }

    fn depth(&self, end: End, v: &[f64]) -> (f64, Option<usize>) {
        match end {
            End::Fixed(x) => (x, None),
            End::Event(e) => (1e3 * v[self.p(e)], Some(self.p(e))),
        }
    }
}

#[derive(Clone)]
struct SpanModel {
    layout: Arc<Layout>,
    bit: BitParams,
    power: PowerCurve,
    smoothing: f64,
}

impl SpanModel {
    fn response(&self, i: usize, v: &[f64]) -> ResponseGrad {
        let rock = &self.layout.segments[self.layout.spans[i].seg].rock;
        evaluate(1e4 * v[self.layout.w(i)], 1e2 * v[self.layout.n(i)], rock, &self.bit, &self.power, self.smoothing)
    }

    /// Time on span `i` (h) with its gradient written into `g`.
    fn time(&self, i: usize, v: &[f64], g: &mut [f64]) -> f64 {
        let l = &self.layout;
        let (a, ja) = l.depth(l.spans[i].start, v);
        let (b, jb) = l.depth(l.spans[i].end, v);
        let len = b - a;
        let rg = self.response(i, v);
        let vel = rg.r.rop;
        g[l.w(i)] += -len * rg.drop_dw * 1e4 / (vel * vel);
        g[l.n(i)] += -len * rg.drop_dn * 1e2 / (vel * vel);
        if let Some(j) = jb {
            g[j] += 1e3 / vel;
        }
        if let Some(j) = ja {
            g[j] -= 1e3 / vel;
        }
        len / vel
    }

    fn times_map(&self, spans: Vec<usize>) -> MapRef {
        let m = self.clone();
        FnMap::new(spans.len(), move |v: &[f64]| {
            let mut values = DVector::zeros(spans.len());
            let mut jacobian = DMatrix::zeros(spans.len(), v.len());
            let mut g = vec![0.0; v.len()];
            for (r, &i) in spans.iter().enumerate() {
                g.fill(0.0);
                values[r] = m.time(i, v, &mut g);
                jacobian.set_row(r, &DVector::from_column_slice(&g).transpose());
            }
            Ok(Evaluation { values, jacobian })
        })
    }

    fn pressure_map(&self, spans: Vec<usize>) -> MapRef {
        let m = self.clone();
        FnMap::new(spans.len(), move |v: &[f64]| {
            let mut values = DVector::zeros(spans.len());
            let mut jacobian = DMatrix::zeros(spans.len(), v.len());
            for (r, &i) in spans.iter().enumerate() {
                let rg = m.response(i, v);
                values[r] = rg.r.delta_p;
                jacobian[(r, m.layout.w(i))] = 1e4 * rg.ddp_dw;
            }
            Ok(Evaluation { values, jacobian })
        })
    }
}

/// Continuous-depth schedule NLP for a fixed maintenance-segment assignment.
#[derive(Clone)]
pub struct ScheduleProblem {
    pub nlp: NlpProblem,
    pub assignment: Vec<usize>,
    pub degradation: Degradation,
    /// One aggregate constraint `sum_j time_j r(delta_p_j) <= 1` per group between maintenance events.
    pub constraints: Vec<AggregateUncertainConstraint>,
    layout: Arc<Layout>,
    model: SpanModel,
    maintenance: (f64, f64),
}

/// Builds the schedule NLP; `assignment[k]` is the segment of the k-th maintenance event (nondecreasing).
pub fn build_schedule_nlp(inst: &DrillInstance, assignment: &[usize], degradation: Degradation) -> Result<ScheduleProblem> {
    inst.validate()?;
    let segments = inst.segments();
    if assignment.windows(2).any(|w| w[1] < w[0]) || assignment.iter().any(|s| *s >= segments.len()) {
        return Err(Error::InvalidArgument(format!("assignment {assignment:?} must be nondecreasing segment indices below {}", segments.len())));
    }
    if let Degradation::Robust { alpha } = degradation {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
        }
    }
    let layout = Arc::new(Layout::new(segments, assignment));
    let model = SpanModel { layout: layout.clone(), bit: inst.bit, power: inst.power, smoothing: inst.smoothing };
    let ns = layout.n_spans();
    let ne = layout.n_events;

    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for sp in &layout.spans {
        lower.push(inst.bit.w_min / 1e4);
        upper.push(inst.weight_cap(&layout.segments[sp.seg].rock) / 1e4);
    }
    lower.extend(std::iter::repeat_n(0.0, ns));
    upper.extend(std::iter::repeat_n(inst.bit.n_max / 1e2, ns));
    for &s in assignment {
        lower.push(layout.segments[s].lo / 1e3);
        upper.push(layout.segments[s].hi / 1e3);
    }
    // reference point: full speed, events spread evenly inside their segments
    let mut v_ref: Vec<f64> = upper[..2 * ns].to_vec();
    for (e, &s) in assignment.iter().enumerate() {
        let same: Vec<usize> = (0..ne).filter(|k| assignment[*k] == s).collect();
        let rank = same.iter().position(|k| *k == e).unwrap() as f64;
        let seg = &layout.segments[s];
        v_ref.push((seg.lo + (seg.hi - seg.lo) * (rank + 1.0) / (same.len() as f64 + 1.0)) / 1e3);
    }

    // z in standardized rate units, u relative to its value at the reference point
    let (z_loc, z_scale) = (inst.rate_model.warp().loc, inst.rate_model.warp().scale);
    let mut aux: Vec<Option<(usize, usize)>> = vec![None; layout.groups.len()];
    if let Degradation::Robust { alpha } = degradation {
        let (ylo, yhi) = inst.rate_model.y_range();
        let span = (yhi - ylo).max(1e-9);
        for (g, a) in layout.groups.iter().zip(&mut aux) {
            if nearly_nominal(alpha, g.len()) {
                continue;
            }
            *a = Some((lower.len(), g.len()));
            lower.extend(std::iter::repeat_n((ylo - 5.0 * span - z_loc) / z_scale, g.len()));
            upper.extend(std::iter::repeat_n((yhi + 5.0 * span - z_loc) / z_scale, g.len()));
            lower.push(0.0);
            upper.push(1e3);
        }
    }
    let dim = lower.len();
    v_ref.resize(dim, 0.0);

    let constraints = if degradation == Degradation::Ignore {
        Vec::new()
    } else {
        let unc = UncertainModel::Warped(inst.rate_model.clone());
        let alpha = match degradation {
            Degradation::Robust { alpha } => alpha,
            _ => 0.5,
        };
        layout
            .groups
            .iter()
            .map(|g| {
                let bound: MapRef = Affine::constant(&[1.0], dim);
                AggregateUncertainConstraint::new(model.times_map(g.clone()), model.pressure_map(g.clone()), bound, unc.clone(), alpha)
            })
            .collect::<Result<Vec<_>>>()?
    };


    let om = model.clone();
    let (mb, mp) = (inst.maintenance_base, inst.maintenance_per_m);
    let objective = Arc::new(move |v: &[f64]| {
        let mut g = vec![0.0; v.len()];
        let mut f = 0.0;
        for i in 0..om.layout.n_spans() {
            f += om.time(i, v, &mut g);
        }
        for e in 0..om.layout.n_events {
            f += mb + mp * 1e3 * v[om.layout.p(e)];
            g[om.layout.p(e)] += mp * 1e3;
        }
        Ok((f, DVector::from_vec(g)))
    });
    let scale = {
        let (f, _) = objective(&v_ref)?;
        f.max(1.0)
    };
    let mut nlp = NlpProblem::new(lower, upper, objective)?.with_objective_scale(scale);

    // events sharing a segment stay ordered
    for e in 1..ne {
        if assignment[e] == assignment[e - 1] {
            let mut c = DMatrix::zeros(1, dim);
            c[(0, layout.p(e - 1))] = 1.0;
            c[(0, layout.p(e))] = -1.0;
            nlp = nlp.inequality(Affine::new(DVector::zeros(1), c));
        }
    }
    let mut u_scales = Vec::new();
    match degradation {
        Degradation::Ignore => {}
        Degradation::Nominal => {
            for c in &constraints {
                nlp = nlp.inequality(nominal_counterpart(c)?);
            }
        }
        Degradation::Robust { .. } => {
            for (c, a) in constraints.iter().zip(&aux) {
                let Some((z0, k)) = *a else {
                    nlp = nlp.inequality(nominal_counterpart(c)?);
                    u_scales.push(1.0);
                    continue;
                };
                let (s1, s2) = wolfe_scales(c, &v_ref)?;
                let u_ref = match (c.uncertainty_set(&v_ref), c.weights_and_bound(&v_ref)) {
                    (Ok(set), Ok((x, _))) => solve_wolfe_kkt(&set, &x).map(|w| w.u).unwrap_or(1.0),
                    _ => 1.0,
                };
                u_scales.push(if u_ref > 0.0 && u_ref.is_finite() { u_ref } else { 1.0 });
                let mut zc = DMatrix::zeros(k, dim);
                for r in 0..k {
                    zc[(r, z0 + r)] = z_scale;
                }
                let mut uc = DMatrix::zeros(1, dim);
                uc[(0, z0 + k)] = *u_scales.last().unwrap();
                let z: MapRef = Affine::new(DVector::from_element(k, z_loc), zc);
                let u: MapRef = Affine::new(DVector::zeros(1), uc);
                let sys = wolfe_counterpart(c, z, u)?.scaled(s1, s2);
                nlp = nlp.equality(sys.equalities).inequality(sys.inequality);
            }
        }
    }

    let hook_layout = layout.clone();
    let hook_c = constraints.clone();
    let hook_aux = aux.clone();
    nlp = nlp.with_start_hook(Arc::new(move |v: &mut [f64]| {
        let l = &hook_layout;
        let mut e = 0;
        while e < l.n_events {
            let f = (e..l.n_events).find(|k| l.event_seg[*k] != l.event_seg[e]).unwrap_or(l.n_events);
            v[l.p(e)..l.p(f)].sort_by(f64::total_cmp);
            e = f;
        }
        for ((c, a), us) in hook_c.iter().zip(&hook_aux).zip(&u_scales) {
            let Some((z0, k)) = *a else { continue };
            if let (Ok(set), Ok((x, _))) = (c.uncertainty_set(v), c.weights_and_bound(v)) {
                if let Ok(sol) = solve_wolfe_kkt(&set, &x) {
                    for r in 0..k {
                        v[z0 + r] = (sol.z[r] - z_loc) / z_scale;
                    }
                    v[z0 + k] = sol.u / us;
                }
            }
        }
    }));
    Ok(ScheduleProblem { nlp, assignment: assignment.to_vec(), degradation, constraints, layout, model, maintenance: (mb, mp) })
}

/// One span of a solved schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanReport {
    pub start: f64,
    pub end: f64,
    pub rock: String,
    pub weight: f64,
    pub n_top: f64,
    pub rop: f64,
    pub delta_p: f64,
    pub hours: f64,
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub assignment: Vec<usize>,
    /// Maintenance depths, m.
    pub events: Vec<f64>,
    pub spans: Vec<SpanReport>,
    pub drilling_h: f64,
    pub maintenance_h: f64,
    pub total_h: f64,
    /// Degradation indicator of every group at the solution (worst case in robust mode).
    pub degradation: Vec<f64>,
    pub feasible: bool,
    pub status: SolveStatus,
    /// Branch-and-bound check of the robust constraints.
    pub verified: Option<bool>,
}

impl Schedule {
    fn infeasible(assignment: &[usize]) -> Self {
        Self {
            assignment: assignment.to_vec(),
            events: Vec::new(),
            spans: Vec::new(),
            drilling_h: f64::INFINITY,
            maintenance_h: f64::INFINITY,
            total_h: f64::INFINITY,
            degradation: Vec::new(),
            feasible: false,
            status: SolveStatus::NumericalFailure,
            verified: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DrillSolveOptions {
    pub multistart: MultistartOptions,
    pub verify: bool,
    pub verify_tol: f64,
}

impl Default for DrillSolveOptions {
    fn default() -> Self {
        let mut multistart = MultistartOptions::default();
        multistart.solver.inner = InnerMethod::Newton;
        multistart.solver.max_inner = 200;
        Self { multistart, verify: true, verify_tol: 1e-2 }
    }
}

impl ScheduleProblem {
    /// `v` with every zero-length span set to full speed; `None` if nothing changes.
    fn reseed(&self, v: &[f64]) -> Option<Vec<f64>> {
        let l = &self.layout;
        let mut out = v.to_vec();
        let mut changed = false;
        for i in 0..l.n_spans() {
            let len = l.depth(l.spans[i].end, v).0 - l.depth(l.spans[i].start, v).0;
            if len > 1e-3 {
                continue;
            }
            for k in [l.w(i), l.n(i)] {
                if out[k] < self.nlp.upper[k] - 1e-9 {
                    out[k] = self.nlp.upper[k];
                    changed = true;
                }
            }
        }
        changed.then_some(out)
    }

    /// Schedule read off the decision vector `v`.
    pub fn report(&self, v: &[f64]) -> Result<Schedule> {
        let l = &self.layout;
        let mut spans = Vec::new();
        let mut drilling = 0.0;
        let mut g = vec![0.0; v.len()];
        for (i, sp) in l.spans.iter().enumerate() {
            let rg = self.model.response(i, v);
            let hours = self.model.time(i, v, &mut g);
            drilling += hours;
            spans.push(SpanReport {
                start: l.depth(sp.start, v).0,
                end: l.depth(sp.end, v).0,
                rock: l.segments[sp.seg].name.clone(),
                weight: 1e4 * v[l.w(i)],
                n_top: 1e2 * v[l.n(i)],
                rop: rg.r.rop,
                delta_p: rg.r.delta_p,
                hours,
            });
        }
        let events: Vec<f64> = (0..l.n_events).map(|e| 1e3 * v[l.p(e)]).collect();
        let maintenance = events.iter().fold(0.0, |a, x| a + self.maintenance.0 + self.maintenance.1 * x);
        let mut degradation = Vec::new();
        for c in &self.constraints {
            let (x, _) = c.weights_and_bound(v)?;
            let y = c.points.eval(v)?.values;
            degradation.push(group_degradation(c.model.clone(), self.degradation, x.as_slice(), y.as_slice())?);
        }
        Ok(Schedule {
            assignment: self.assignment.clone(),
            events,
            spans,
            drilling_h: drilling,
            maintenance_h: maintenance,
            total_h: drilling + maintenance,
            degradation,
            feasible: true,
            status: SolveStatus::Optimal,
            verified: None,
        })
    }
}

/// Multistart solve; robust schedules are checked by branch-and-bound.
pub fn solve_schedule(inst: &DrillInstance, assignment: &[usize], degradation: Degradation, opts: &DrillSolveOptions) -> Result<Schedule> {
    let p = build_schedule_nlp(inst, assignment, degradation)?;
    let rep = match multistart_with(&p.nlp, &opts.multistart) {
        Ok(r) => r,
        Err(Error::NoSolution(_)) => return Ok(Schedule::infeasible(assignment)),
        Err(e) => return Err(e),
    };
    let tol = opts.multistart.solver.tol;
    let mut best = rep.best;
    // the speed on a zero-length span is arbitrary and can pin an event to its
    // bound; restart with those spans at full speed
    for _ in 0..3 {
        let Some(mut v0) = p.reseed(&best.point) else { break };
        p.nlp.complete_start(&mut v0);
        let cand = solve_local_with(&p.nlp, &v0, &opts.multistart.solver);
        if !(cand.kkt.violation <= tol && cand.value < best.value - 1e-9 * best.value.abs()) {
            break;
        }
        best = cand;
    }
    let v = best.point.clone();
    let mut s = p.report(&v)?;
    s.status = best.status;
    s.feasible = best.kkt.violation <= tol;
    if !s.feasible {
        return Ok(Schedule { status: s.status, ..Schedule::infeasible(assignment) });
    }
    if matches!(degradation, Degradation::Robust { .. }) && opts.verify {
        let mut ok = true;
        for c in &p.constraints {
            let set = c.uncertainty_set(&v)?;
            let (x, b) = c.weights_and_bound(&v)?;
            ok &= verify_robust_feasibility(&set, &x, b, opts.verify_tol)?.is_feasible();
        }
        s.verified = Some(ok);
    }
    Ok(s)
}

/// `sum_j t_j r(delta_p_j)`: nominal value, or its worst case over the uncertainty set.
///
/// Spans with equal pressure drop are merged first, which keeps the covariance nonsingular.
fn group_degradation(model: UncertainModel, degradation: Degradation, times: &[f64], dps: &[f64]) -> Result<f64> {
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (&t, &y) in times.iter().zip(dps) {
        match merged.iter_mut().find(|(yy, _)| *yy == y) {
            Some(m) => m.1 += t,
            None => merged.push((y, t)),
        }
    }
    let test = DMatrix::from_fn(merged.len(), 1, |i, _| merged[i].0);
    let x = DVector::from_fn(merged.len(), |i, _| merged[i].1);
    let wm = match &model {
        UncertainModel::Warped(w) => w.clone(),
        UncertainModel::Gp(g) => WarpedGpModel::from_gp(g.clone()),
    };
    match degradation {
        Degradation::Ignore | Degradation::Nominal => Ok(wm.predict_nominal(&test)?.dot(&x)),
        Degradation::Robust { alpha } if nearly_nominal(alpha, times.len()) => Ok(wm.predict_nominal(&test)?.dot(&x)),
        Degradation::Robust { alpha } => {
            let p = wm.latent_gp().predict_joint(&test)?;
            let set = WarpedSet::new(UncertaintyEllipsoid::new(p.mean, p.cov, alpha)?, wm.warp().clone());
            let (lo, hi) = latent_bounding_box(&set.ellipsoid);
            let zlo = set.to_observed(&lo)?.min();
            let zhi = set.to_observed(&hi)?.max();
            let exact = convexity_certificate(&set.warp, XSign::of(x.as_slice()), (zlo, zhi)) == Certificate::CertifiedUniqueKkt;
            if exact {
                Ok(solve_wolfe_kkt(&set, &x)?.value)
            } else {
                Ok(bnb_inner_max(&set, &x, 1e-4)?.value)
            }
        }
    }
}

/// Upper bounds of the no-degradation heuristic.
#[derive(Debug, Clone)]
pub struct NoDegradationPlan {
    /// Maintenance depths, m, increasing.
    pub events: Vec<f64>,
    /// Segment of each event; per event an upper bound on its segment in an optimal assignment.
    pub caps: Vec<usize>,
    /// Degradation indicator at the target depth without maintenance.
    pub total_degradation: f64,
    /// Full-speed drilling with maintenance at `events`.
    pub schedule: Schedule,
    pub solves: usize,
}

/// Drill at full speed and place maintenance events backwards from the target,
/// each at the shallowest depth that keeps the following group within its limit.
///
/// In robust mode the group worst cases do not add up, so events are inserted
/// until the first group satisfies the limit as well.
pub fn no_degradation_heuristic(inst: &DrillInstance, degradation: Degradation, opts: &DrillSolveOptions) -> Result<NoDegradationPlan> {
    let free = build_schedule_nlp(inst, &[], Degradation::Ignore)?;
    let rep = multistart_with(&free.nlp, &opts.multistart)?;
    let v = rep.best_point().to_vec();
    let segs = inst.segments();
    let speed: Vec<(f64, f64)> = (0..segs.len())
        .map(|i| {
            let r = free.model.response(i, &v).r;
            (r.rop, r.delta_p)
        })
        .collect();
    let model = UncertainModel::Warped(inst.rate_model.clone());
    let deg = if degradation == Degradation::Ignore { Degradation::Nominal } else { degradation };
    let r_between = |a: f64, b: f64| -> Result<f64> {
        let mut t = Vec::new();
        let mut y = Vec::new();
        for (s, seg) in segs.iter().enumerate() {
            let len = seg.hi.min(b) - seg.lo.max(a);
            if len > 0.0 {
                t.push(len / speed[s].0);
                y.push(speed[s].1);
            }
        }
        if t.is_empty() {
            return Ok(0.0);
        }
        group_degradation(model.clone(), deg, &t, &y)
    };
    let x0 = segs[0].lo;
    let xn = inst.target_depth;
    let total = r_between(x0, xn)?;
    let mut events = Vec::new();
    let mut end = xn;
    while r_between(x0, end)? > 1.0 {
        if events.len() >= 50 {
            return Err(Error::NoConvergence("more than 50 maintenance events needed".into()));
        }
        let (mut lo, mut hi) = (x0, end);
        while hi - lo > 1e-6 * (1.0 + end.abs()) {
            let mid = 0.5 * (lo + hi);
            if r_between(mid, end)? <= 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        events.push(hi);
        end = hi;
    }
    events.reverse();
    let caps: Vec<usize> = events.iter().map(|x| inst.segment_of(*x)).collect();

    // full-speed schedule with these events
    let p = build_schedule_nlp(inst, &caps, deg)?;
    let l = &p.layout;
    let mut w = vec![0.0; p.nlp.dim];
    w[..2 * l.n_spans()].copy_from_slice(&p.nlp.upper[..2 * l.n_spans()]);
    for (e, x) in events.iter().enumerate() {
        w[l.p(e)] = x / 1e3;
    }
    let mut schedule = p.report(&w)?;
    schedule.status = SolveStatus::Optimal;
    Ok(NoDegradationPlan { events, caps, total_degradation: total, schedule, solves: 1 })
}

/// Result of a strategy for choosing the maintenance-segment assignment.
#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub schedule: Schedule,
    /// Schedule NLPs solved, including the heuristic's initial one.
    pub solves: usize,
    pub seconds: f64,
}

/// Events within this fraction of the segment length from a boundary sit on it.
const BOUNDARY_TOL: f64 = 1e-6;

/// Start from the no-degradation assignment and move events sitting on a
/// geological boundary into the neighbouring segment until none is left.
/// Events pushed above the first or below the last segment are dropped.
pub fn boundary_heuristic(inst: &DrillInstance, degradation: Degradation, opts: &DrillSolveOptions) -> Result<StrategyResult> {
    let start = Instant::now();
    let plan = no_degradation_heuristic(inst, degradation, opts)?;
    let segs = inst.segments();
    let mut assignment = plan.caps.clone();
    let mut best = solve_schedule(inst, &assignment, degradation, opts)?;
    let mut solves = plan.solves + 1;
    let mut visited = HashSet::new();
    visited.insert(assignment.clone());
    loop {
        let mut next = None;
        for (k, (&s, &x)) in assignment.iter().zip(&best.events).enumerate() {
            let mut a = assignment.clone();
            let tol = BOUNDARY_TOL * (segs[s].hi - segs[s].lo);
            if (x - segs[s].lo).abs() <= tol {
                if s == 0 {
                    a.remove(k);
                } else {
                    a[k] = s - 1;
                }
            } else if (x - segs[s].hi).abs() <= tol {
                if s + 1 == segs.len() {
                    a.remove(k);
                } else {
                    a[k] = s + 1;
                }
            } else {
                continue;
            }
            a.sort_unstable();
            if !visited.contains(&a) {
                next = Some(a);
                break;
            }
        }
        let Some(a) = next else { break };
        visited.insert(a.clone());
        let cand = solve_schedule(inst, &a, degradation, opts)?;
        solves += 1;
        if !(cand.feasible && cand.total_h <= best.total_h * (1.0 + 1e-9)) {
            break;
        }
        assignment = a;
        best = cand;
    }
    Ok(StrategyResult { schedule: best, solves, seconds: start.elapsed().as_secs_f64() })
}

/// Number of nondecreasing sequences `1 <= i_1 <= ... <= i_m` with `i_k <= caps[k]` (1-based caps).
pub fn nested_sum_count(caps: &[usize]) -> usize {
    fn rec(caps: &[usize], from: usize) -> usize {
        match caps {
            [] => 1,
            [last] => (last + 1).saturating_sub(from),
            [c, rest @ ..] => (from..=*c).map(|i| rec(rest, i)).sum(),
        }
    }
    rec(caps, 1)
}

/// `C(events + segments - 1, events)`: assignments without upper bounds.
pub fn stars_and_bars(events: usize, segments: usize) -> usize {
    if segments == 0 {
        return usize::from(events == 0);
    }
    let (n, k) = (events + segments - 1, events);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c as usize
}

/// All nondecreasing 0-based assignments bounded elementwise by `caps`.
pub fn bounded_assignments(caps: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(caps.len());
    fn rec(caps: &[usize], from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let k = cur.len();
        if k == caps.len() {
            out.push(cur.clone());
            return;
        }
        for s in from..=caps[k] {
            cur.push(s);
            rec(caps, s, cur, out);
            cur.pop();
        }
    }
    rec(caps, 0, &mut cur, &mut out);
    out
}

/// Candidate assignments for every event count up to the heuristic's, the
/// i-th last event bounded by the segment of the heuristic's i-th last event.
pub fn candidate_assignments(caps: &[usize]) -> Vec<Vec<usize>> {
    (0..=caps.len()).flat_map(|m| bounded_assignments(&caps[caps.len() - m..])).collect()
}

/// Solve every candidate assignment and keep the cheapest feasible schedule
/// (ties go to the lexicographically smallest assignment).
pub fn enumerate_assignments(inst: &DrillInstance, degradation: Degradation, opts: &DrillSolveOptions) -> Result<StrategyResult> {
    let start = Instant::now();
    let plan = no_degradation_heuristic(inst, degradation, opts)?;
    let cands = candidate_assignments(&plan.caps);
    let solved = map_ordered(opts.multistart.exec, &cands, |_, a| solve_schedule(inst, a, degradation, opts));
    let mut best: Option<Schedule> = None;
    for s in solved {
        let s = s?;
        if s.feasible && best.as_ref().is_none_or(|b| s.total_h < b.total_h * (1.0 - 1e-9)) {
            best = Some(s);
        }
    }
    let schedule = best.ok_or_else(|| Error::NoSolution("no feasible maintenance assignment".into()))?;
    Ok(StrategyResult { schedule, solves: plan.solves + cands.len(), seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    NoDegradation,
    Boundary,
    Enumeration,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoDegradation, Strategy::Boundary, Strategy::Enumeration];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoDegradation => "no_degradation",
            Self::Boundary => "boundary",
            Self::Enumeration => "enumeration",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?} (expected no_degradation, boundary or enumeration)")))
    }
}

pub fn run_strategy(inst: &DrillInstance, strategy: Strategy, degradation: Degradation, opts: &DrillSolveOptions) -> Result<StrategyResult> {
    match strategy {
        Strategy::NoDegradation => {
            let start = Instant::now();
            let p = no_degradation_heuristic(inst, degradation, opts)?;
            Ok(StrategyResult { schedule: p.schedule, solves: p.solves, seconds: start.elapsed().as_secs_f64() })
        }
        Strategy::Boundary => boundary_heuristic(inst, degradation, opts),
        Strategy::Enumeration => enumerate_assignments(inst, degradation, opts),
    }
}

/// One solved (instance, strategy, degradation, depth) point.
#[derive(Debug, Clone)]
pub struct DrillPoint {
    pub instance: String,
    pub strategy: Strategy,
    pub degradation: Degradation,
    pub target_depth: f64,
    pub result: std::result::Result<StrategyResult, String>,
}

pub const DRILL_COLUMNS: [&str; 14] = [
    "instance",
    "strategy",
    "mode",
    "confidence",
    "target_depth_m",
    "total_h",
    "drilling_h",
    "maintenance_h",
    "n_events",
    "events_m",
    "segments",
    "solves",
    "verified",
    "seconds",
];

/// Solves every combination of depth, degradation setting and strategy.
pub fn run_drill_sweep(
    name: &str,
    inst: &DrillInstance,
    depths: &[f64],
    settings: &[Degradation],
    strategies: &[Strategy],
    opts: &DrillSolveOptions,
) -> Vec<DrillPoint> {
    let mut jobs = Vec::new();
    for &d in depths {
        for &deg in settings {
            for &s in strategies {
                jobs.push((d, deg, s));
            }
        }
    }
    // parallelism lives inside the enumeration; points run in order
    let inner = *opts;
    map_ordered(Execution::Sequential, &jobs, |_, &(d, deg, s)| {
        let result = DrillInstance { target_depth: d, ..inst.clone() }
            .validate()
            .and_then(|_| run_strategy(&DrillInstance { target_depth: d, ..inst.clone() }, s, deg, &inner))
            .map_err(|e| e.to_string());
        DrillPoint { instance: name.to_string(), strategy: s, degradation: deg, target_depth: d, result }
    })
}

fn join(v: impl IntoIterator<Item = String>) -> String {
    v.into_iter().collect::<Vec<_>>().join(";")
}

pub fn drill_table(points: &[DrillPoint], record_timing: bool) -> Table {
    let cols: Vec<&str> = DRILL_COLUMNS.iter().copied().filter(|c| record_timing || *c != "seconds").collect();
    let mut t = Table::new(cols);
    for p in points {
        let conf = p.degradation.confidence().map_or(Cell::Text(String::new()), Cell::Float);
        let mut row: Vec<Cell> = vec![p.instance.clone().into(), p.strategy.name().into(), p.degradation.name().into(), conf, p.target_depth.into()];
        match &p.result {
            Ok(r) => {
                let s = &r.schedule;
                row.extend([
                    s.total_h.into(),
                    s.drilling_h.into(),
                    s.maintenance_h.into(),
                    s.events.len().into(),
                    join(s.events.iter().map(|x| format!("{x:.1}"))).into(),
                    join(s.assignment.iter().map(|a| a.to_string())).into(),
                    r.solves.into(),
                    s.verified.map_or("", |v| if v { "true" } else { "false" }).into(),
                ]);
                if record_timing {
                    row.push(r.seconds.into());
                }
            }
            Err(e) => {
                row.extend([f64::NAN.into(), f64::NAN.into(), f64::NAN.into(), 0usize.into(), "".into(), format!("error: {e}").into(), 0usize.into(), "".into()]);
                if record_timing {
                    row.push(f64::NAN.into());
                }
            }
        }
        t.rows.push(row);
    }
    t
}

/// Per-span detail of one schedule.
pub fn schedule_table(s: &Schedule) -> Table {
    let mut t = Table::new(["start_m", "end_m", "rock", "weight_n", "n_top_rpm", "rop_m_h", "delta_p_mpa", "hours"]);
    for sp in &s.spans {
        t.rows.push(vec![
            sp.start.into(),
            sp.end.into(),
            sp.rock.clone().into(),
            sp.weight.into(),
            sp.n_top.into(),
            sp.rop.into(),
            sp.delta_p.into(),
            sp.hours.into(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use wgpro_core::gp::{GpModel, KernelParams};

    fn flat_rate_model(rate: f64) -> WarpedGpModel {
        // constant data: posterior mean stays at the data value
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let data = TrainingData::from_1d(&x, &[rate; 6]).unwrap();
        WarpedGpModel::from_gp(GpModel::new(KernelParams::new(1.0, vec![10.0], 1e-10).unwrap(), data).unwrap())
    }

    #[test]
    fn shale_low_weight_regime() {
        let r = detournay_response(10_000.0, 60.0, &RockParams::SHALE, &BitParams::default(), &PowerCurve::default()).unwrap();
        let w = 10_000.0 / 100.4;
        assert_relative_eq!(r.depth_of_cut, w / 278.0, max_relative = 1e-12);
        assert!((r.depth_of_cut - 0.3583).abs() < 1e-4);
        assert!((r.t - 0.48 * w).abs() < 1e-9);
        assert!((r.t - 47.81).abs() < 1e-2);
    }

    #[test]
    fn response_is_continuous_at_the_switch() {
        let bit = BitParams::default();
        let pc = PowerCurve::default();
        for rock in [RockParams::SHALE, RockParams::SANDSTONE] {
            let w = rock.w_star * bit.radius;
            let a = detournay_response(w * (1.0 - 1e-10), 50.0, &rock, &bit, &pc).unwrap();
            let b = detournay_response(w * (1.0 + 1e-10), 50.0, &rock, &bit, &pc).unwrap();
            assert!((a.rop - b.rop).abs() < 1e-6 && (a.torque - b.torque).abs() < 1e-6);
            // the cutting branch has slope 1/xi above the switch
            let c = detournay_response(w * 1.5, 50.0, &rock, &bit, &pc).unwrap();
            let tf = bit.radius * bit.radius / 2000.0;
            assert_relative_eq!((c.torque - b.torque) / tf, 0.5 * rock.w_star / rock.xi, max_relative = 1e-8);
        }
    }

    #[test]
    fn out_of_range_operation_is_rejected() {
        let (bit, pc) = (BitParams::default(), PowerCurve::default());
        assert!(detournay_response(0.0, 10.0, &RockParams::SHALE, &bit, &pc).is_err());
        assert!(detournay_response(50_000.0, 10.0, &RockParams::SHALE, &bit, &pc).is_err());
        assert!(detournay_response(1e4, 130.0, &RockParams::SHALE, &bit, &pc).is_err());
    }

    #[test]
    fn smoothed_gradients_match_differences() {
        let (bit, pc) = (BitParams::default(), PowerCurve::default());
        for rock in [RockParams::SHALE, RockParams::SANDSTONE] {
            for w in [5_000.0, 20_000.0, 19_980.0, 35_000.0] {
                let g = evaluate(w, 80.0, &rock, &bit, &pc, 1.0);
                let h = 1e-3;
                let fd = (evaluate(w + h, 80.0, &rock, &bit, &pc, 1.0).r.rop - evaluate(w - h, 80.0, &rock, &bit, &pc, 1.0).r.rop) / (2.0 * h);
                assert_relative_eq!(g.drop_dw, fd, max_relative = 1e-5, epsilon = 1e-12);
                let fdp = (evaluate(w + h, 80.0, &rock, &bit, &pc, 1.0).r.delta_p - evaluate(w - h, 80.0, &rock, &bit, &pc, 1.0).r.delta_p) / (2.0 * h);
                assert_relative_eq!(g.ddp_dw, fdp, max_relative = 1e-5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn geology_segments_are_cut_at_the_target() {
        let inst = DrillInstance::new(Geology::six_segment(), 1600.0, flat_rate_model(0.01)).unwrap();
        let s = inst.segments();
        assert_eq!(s.len(), 4);
        assert_eq!(s.last().unwrap().hi, 1600.0);
        assert_eq!(inst.segment_of(900.0), 2);
        assert_eq!(inst.segment_of(0.0), 0);
        assert!(Geology::from_table(&parse_csv("top_m,rock\n0,shale\n0,sandstone\n").unwrap()).is_err());
        assert!(Geology::from_table(&parse_csv("top_m,rock\n0,granite\n").unwrap()).is_err());
    }

    #[test]
    fn single_segment_without_degradation_drills_at_full_speed() {
        let geo = Geology::from_table(&parse_csv("top_m,rock\n0,shale\n").unwrap()).unwrap();
        let inst = DrillInstance::new(geo, 1000.0, flat_rate_model(0.01)).unwrap();
        let mut opts = DrillSolveOptions::default();
        opts.multistart.exec = Execution::Sequential;
        let s = solve_schedule(&inst, &[], Degradation::Ignore, &opts).unwrap();
        let cap = inst.weight_cap(&RockParams::SHALE);
        let vmax = inst.response(cap, inst.bit.n_max, &RockParams::SHALE).r.rop;
        assert_relative_eq!(s.total_h, 1000.0 / vmax, max_relative = 1e-6);
    }

    #[test]
    fn maintenance_count_formula() {
        assert_eq!(nested_sum_count(&[]), 1);
        assert_eq!(nested_sum_count(&[3]), 3);
        assert_eq!(nested_sum_count(&[2, 3]), 3 + 2);
        for caps in [vec![0usize, 1, 1], vec![2, 2, 4], vec![1, 3, 3, 5]] {
            let one_based: Vec<usize> = caps.iter().map(|c| c + 1).collect();
            assert_eq!(bounded_assignments(&caps).len(), nested_sum_count(&one_based));
        }
        // equal caps reduce to stars and bars
        assert_eq!(nested_sum_count(&[4, 4, 4]), stars_and_bars(3, 4));
        assert_eq!(bounded_assignments(&[5, 5]).len(), stars_and_bars(2, 6));
    }

    #[test]
    fn candidates_use_the_last_caps() {
        let c = candidate_assignments(&[0, 1]);
        assert_eq!(c, vec![vec![], vec![0], vec![1], vec![0, 0], vec![0, 1]]);
    }

    #[test]
    fn degradation_constraint_binds() {
        // constant rate 0.05/h: at most 20 h per group
        let geo = Geology::from_table(&parse_csv("top_m,rock\n0,shale\n").unwrap()).unwrap();
        let inst = DrillInstance::new(geo, 1000.0, flat_rate_model(0.05)).unwrap();
        let mut opts = DrillSolveOptions::default();
        opts.multistart.exec = Execution::Sequential;
        let free = solve_schedule(&inst, &[], Degradation::Ignore, &opts).unwrap();
        assert!(free.drilling_h > 20.0);
        let s = solve_schedule(&inst, &[0], Degradation::Nominal, &opts).unwrap();
        assert!(s.feasible);
        for d in &s.degradation {
            assert!(*d <= 1.0 + 1e-5);
        }
        let plan = no_degradation_heuristic(&inst, Degradation::Nominal, &opts).unwrap();
        assert_eq!(plan.events.len(), (free.drilling_h * 0.05).floor() as usize);
        assert_relative_eq!(plan.total_degradation, free.drilling_h * 0.05, max_relative = 1e-6);
    }

    fn shale_instance(depth: f64, rate: f64) -> DrillInstance {
        let geo = Geology::from_table(&parse_csv("top_m,rock\n0,shale\n").unwrap()).unwrap();
        DrillInstance::new(geo, depth, flat_rate_model(rate)).unwrap()
    }

    fn sequential() -> DrillSolveOptions {
        let mut opts = DrillSolveOptions::default();
        opts.multistart.exec = Execution::Sequential;
        opts
    }

    fn full_speed(inst: &DrillInstance) -> f64 {
        let cap = inst.weight_cap(&RockParams::SHALE);
        inst.response(cap, inst.bit.n_max, &RockParams::SHALE).r.rop
    }

    #[test]
    fn constant_per_meter_degradation() {
        // 0.001 per metre at full speed over 2500 m
        let probe = shale_instance(2500.0, 1.0);
        let vmax = full_speed(&probe);
        let inst = shale_instance(2500.0, 1e-3 * vmax);
        let plan = no_degradation_heuristic(&inst, Degradation::Nominal, &sequential()).unwrap();
        assert_relative_eq!(plan.total_degradation, 2.5, max_relative = 1e-6);
        assert_eq!(plan.events.len(), 2);
        assert!((plan.events[0] - 500.0).abs() < 1e-2 && (plan.events[1] - 1500.0).abs() < 1e-2, "{:?}", plan.events);
        assert_eq!(plan.caps, vec![0, 0]);
    }

    #[test]
    fn short_well_needs_no_maintenance() {
        let probe = shale_instance(500.0, 1.0);
        let vmax = full_speed(&probe);
        let inst = shale_instance(500.0, 1e-3 * vmax);
        let opts = sequential();
        let plan = no_degradation_heuristic(&inst, Degradation::Nominal, &opts).unwrap();
        assert!(plan.events.is_empty() && plan.caps.is_empty());
        assert_relative_eq!(plan.schedule.total_h, 500.0 / vmax, max_relative = 1e-9);
        let e = enumerate_assignments(&inst, Degradation::Nominal, &opts).unwrap();
        assert_eq!(e.solves, 2);
        assert!(e.schedule.assignment.is_empty());
    }

    #[test]
    fn one_event_matches_grid_oracle() {
        let depth = 1500.0;
        let probe = shale_instance(depth, 1.0);
        let vmax = full_speed(&probe);
        // full-speed drilling takes 1.5 lifetimes
        let rate = 1.5 * vmax / depth;
        let inst = shale_instance(depth, rate);
        let s = solve_schedule(&inst, &[0], Degradation::Nominal, &sequential()).unwrap();
        assert!(s.feasible);
        for d in &s.degradation {
            assert!(*d <= 1.0 + 1e-6);
        }
        let cap = inst.weight_cap(&RockParams::SHALE);
        let mut best = f64::INFINITY;
        for i in 0..=1500 {
            let x = depth * i as f64 / 1500.0;
            for j in 1..=400 {
                let w = cap * j as f64 / 400.0;
                let v = inst.response(w, inst.bit.n_max, &RockParams::SHALE).r.rop;
                if x / v * rate <= 1.0 && (depth - x) / v * rate <= 1.0 {
                    best = best.min(depth / v + inst.maintenance_time(x));
                }
            }
        }
        assert_relative_eq!(s.total_h, best, max_relative = 1e-3);
    }

    #[test]
    fn counting_examples() {
        assert_eq!(candidate_assignments(&[]), vec![Vec::<usize>::new()]);
        assert_eq!(stars_and_bars(2, 3), 6);
        let listed = bounded_assignments(&[2, 2]);
        assert_eq!(listed, vec![vec![0, 0], vec![0, 1], vec![0, 2], vec![1, 1], vec![1, 2], vec![2, 2]]);
    }

    #[test]
    fn interior_events_stop_the_boundary_heuristic() {
        let depth = 1500.0;
        let vmax = full_speed(&shale_instance(depth, 1.0));
        let inst = shale_instance(depth, 1.5 * vmax / depth);
        let opts = sequential();
        let plan = no_degradation_heuristic(&inst, Degradation::Nominal, &opts).unwrap();
        let r = boundary_heuristic(&inst, Degradation::Nominal, &opts).unwrap();
        assert_eq!(r.solves, plan.solves + 1);
        assert_eq!(r.schedule.assignment, vec![0]);
        let x = r.schedule.events[0];
        assert!(x > 1.0 && x < depth - 1.0);
    }
}
