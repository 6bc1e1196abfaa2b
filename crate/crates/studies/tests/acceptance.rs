//! Acceptance suite. Every check prints one PASS/FAIL line with its measured
//! margin and runtime; run with `--nocapture` to see them all.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use wgpro_core::exec::{map_ordered, stream_rng, Execution};
use wgpro_core::gp::{GpModel, KernelParams, TrainingData};
use wgpro_core::innermax::{bnb_inner_max, bnb_inner_max_with, BnbOptions};
use wgpro_core::nlp::{multistart_with, MultistartOptions, NlpProblem};
use wgpro_core::posterior::PosteriorConfig;
use wgpro_core::reformulate::{convexity_certificate, solve_wolfe_kkt, Certificate, UncertainModel, XSign};
use wgpro_core::uncertainty::{chi2_quantile, normal_quantile, UncertaintyEllipsoid, WarpedSet};
use wgpro_core::warping::{ObservationWarp, WarpParams, WarpTerm};
use wgpro_studies::drilling::{
    fit_degradation_model, nested_sum_count, no_degradation_heuristic, run_strategy, Degradation, DrillInstance, DrillSolveOptions, Geology,
    LifetimeData, Strategy, StrategyResult,
};
use wgpro_studies::planning::{
    fit_models, generate_dataset, run_a_posteriori, run_confidence_sweep, Mode, NoiseKind, PlanningInstance, PlanningModels,
    PlanningSolveOptions, SweepOptions, SweepPoint,
};

const SEED: u64 = 0;

fn verdict(id: u32, name: &str, ok: bool, detail: String, start: Instant, budget_s: f64) {
    verdict_secs(id, name, ok, detail, start.elapsed().as_secs_f64(), budget_s)
}

fn verdict_secs(id: u32, name: &str, ok: bool, detail: String, secs: f64, budget_s: f64) {
    let in_time = secs <= budget_s;
    let pass = ok && in_time;
    println!(
        "[{}] {id:>2} {name}: {detail}; {secs:.1} s (budget {budget_s} s{})",
        if pass { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", exceeded" }
    );
    assert!(pass, "{id} {name} failed: {detail}, {secs:.1} s");
}

// ---------------------------------------------------------------- oracles

fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn bisect(f: impl Fn(f64) -> f64, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if f(m) < p {
            lo = m
        } else {
            hi = m
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn check_01_quantile_oracles() {
    let t = Instant::now();
    // chi2 with 1 dof is the square of a standard normal; with 2 dof it is exponential
    let o1 = bisect(|x| erf_series((x / 2.0).sqrt()), 0.95, 0.0, 50.0);
    let o2 = bisect(|x| 1.0 - (-x / 2.0).exp(), 0.95, 0.0, 50.0);
    let on = bisect(|z| 0.5 * (1.0 + erf_series(z / 2f64.sqrt())), 0.975, -5.0, 5.0);
    let cases = [
        (chi2_quantile(1, 0.95).unwrap(), o1, 3.841459),
        (chi2_quantile(2, 0.95).unwrap(), o2, 5.991465),
        (normal_quantile(0.975).unwrap(), on, 1.959964),
    ];
    let err = cases.iter().map(|(v, o, r)| (v - o).abs().max((v - r).abs())).fold(0.0, f64::max);
    verdict(1, "quantile oracles", err <= 1e-6, format!("max error {err:.2e}"), t, 1.0);
}

// --------------------------------------------------------- inner maximum

fn warped_set(rng: &mut impl Rng, n: usize, warp: ObservationWarp, sigma_scale: f64, alpha: f64) -> WarpedSet {
    let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * sigma_scale);
    let sigma = &l * l.transpose() + DMatrix::identity(n, n) * (0.1 * sigma_scale * sigma_scale);
    WarpedSet::new(UncertaintyEllipsoid::new(mu, sigma, alpha).unwrap(), warp)
}

/// Maximum of `x^T H^{-1}(xi)` over `samples` equally spaced boundary angles,
/// with the largest jump between neighbours as its resolution.
fn boundary_oracle(set: &WarpedSet, x: &DVector<f64>, samples: usize) -> (f64, f64) {
    let e = &set.ellipsoid;
    let l = e.sigma_factor();
    let r = e.radius();
    let value = |k: usize| {
        let t = std::f64::consts::TAU * k as f64 / samples as f64;
        let xi = &e.mu + l * DVector::from_vec(vec![t.cos(), t.sin()]) * r;
        (0..2).map(|i| x[i] * set.warp.inverse(xi[i]).unwrap()).sum::<f64>()
    };
    let mut best = f64::NEG_INFINITY;
    let mut res = 0.0f64;
    let mut prev = value(0);
    for k in 1..=samples {
        let v = value(k);
        best = best.max(v);
        res = res.max((v - prev).abs());
        prev = v;
    }
    (best, res)
}

#[test]
fn check_02_inner_max_against_boundary_sampling() {
    let t = Instant::now();
    let ids: Vec<u64> = (0..50).collect();
    let rows = map_ordered(Execution::Parallel, &ids, |_, &i| {
        let mut rng = stream_rng(SEED, 1000 + i);
        let warp = ObservationWarp::new(
            WarpParams::single(rng.random_range(0.1..1.5), rng.random_range(0.3..3.0), rng.random_range(-1.0..1.0)).unwrap(),
            0.0,
            1.0,
        )
        .unwrap();
        let alpha = rng.random_range(0.01..0.5);
        let set = warped_set(&mut rng, 2, warp, 0.6, alpha);
        let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let bnb = bnb_inner_max(&set, &x, 1e-3).unwrap();
        let (oracle, res) = boundary_oracle(&set, &x, 1_000_000);
        let allowed = (1e-2 * oracle.abs()).max(res);
        ((bnb.value - oracle).abs(), allowed)
    });
    let bad = rows.iter().filter(|(d, a)| d > a).count();
    let worst = rows.iter().map(|(d, a)| d / a).fold(0.0, f64::max);
    verdict(2, "inner max vs boundary sampling", bad == 0, format!("{bad}/50 outside; worst error/allowance {worst:.3}"), t, 120.0);
}

#[test]
fn check_03_wolfe_matches_branch_and_bound_when_certified() {
    let t = Instant::now();
    let mut rng = stream_rng(SEED, 3);
    let mut worst = 0.0f64;
    let mut found = 0;
    let mut tried = 0;
    while found < 25 && tried < 20_000 {
        tried += 1;
        let warp = ObservationWarp::new(
            WarpParams::single(rng.random_range(0.1..1.5), rng.random_range(0.2..1.5), rng.random_range(1.0..5.0)).unwrap(),
            0.0,
            1.0,
        )
        .unwrap();
        let alpha = rng.random_range(0.01..0.5);
        let set = warped_set(&mut rng, 2, warp, 0.3, alpha);
        let x = DVector::from_fn(2, |_, _| rng.random_range(0.05..1.0));
        let e = &set.ellipsoid;
        let r = e.radius();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..2 {
            let s = r * e.sigma[(i, i)].sqrt();
            lo = lo.min(set.warp.inverse(e.mu[i] - s).unwrap());
            hi = hi.max(set.warp.inverse(e.mu[i] + s).unwrap());
        }
        if convexity_certificate(&set.warp, XSign::of(x.as_slice()), (lo, hi)) != Certificate::CertifiedUniqueKkt {
            continue;
        }
        found += 1;
        let w = solve_wolfe_kkt(&set, &x).unwrap();
        let b = bnb_inner_max(&set, &x, 1e-6).unwrap();
        worst = worst.max((w.value - b.value).abs() / b.value.abs().max(1e-12));
    }
    verdict(
        3,
        "Wolfe vs branch-and-bound (certified)",
        found == 25 && worst <= 1e-3,
        format!("{found} certified instances, worst relative gap {worst:.2e}"),
        t,
        120.0,
    );
}

#[test]
fn check_04_identity_warp_closed_form() {
    let t = Instant::now();
    let mut rng = stream_rng(SEED, 4);
    let mut worst = 0.0f64;
    for k in 0..40 {
        let n = 1 + k % 5;
        let alpha = rng.random_range(0.01..0.5);
        let set = warped_set(&mut rng, n, ObservationWarp::identity(), 1.0, alpha);
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let e = &set.ellipsoid;
        let closed = e.mu.dot(&x) + e.radius_sq.sqrt() * (x.transpose() * &e.sigma * &x)[0].sqrt();
        let w = solve_wolfe_kkt(&set, &x).unwrap();
        worst = worst.max((w.value - closed).abs() / closed.abs().max(1.0));
    }
    verdict(4, "identity-warp closed form", worst <= 1e-6, format!("worst error {worst:.2e} over 40 instances, n <= 5"), t, 60.0);
}

// --------------------------------------------------------------- planning

fn planning(periods: usize, noise: NoiseKind) -> (PlanningInstance, PlanningModels) {
    let inst = PlanningInstance::new(periods, noise, 0.01, SEED).unwrap();
    let data = generate_dataset(&inst).unwrap();
    let models = fit_models(&data, 2, 5, SEED, Execution::Parallel).unwrap();
    (inst, models)
}

fn sweep(inst: &PlanningInstance, models: &PlanningModels, modes: &[Mode], confidences: &[f64]) -> Vec<SweepPoint> {
    let mut solve = PlanningSolveOptions::default();
    solve.multistart.seed = SEED;
    let opts = SweepOptions {
        confidences: confidences.to_vec(),
        modes: modes.to_vec(),
        feasibility_samples: 100_000,
        solve,
        exec: Execution::Parallel,
        record_timing: false,
    };
    run_confidence_sweep(inst, models, &opts)
}

#[test]
fn check_05_chance_constraint_tracking() {
    let t = Instant::now();
    let (inst, models) = planning(3, NoiseKind::Uniform);
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let pts = sweep(&inst, &models, &[Mode::Chance], &grid);
    let devs: Vec<f64> = pts.iter().map(|p| p.feasibility - p.confidence).collect();
    let failed = pts.iter().filter(|p| p.solution.is_err()).count();
    let worst = devs.iter().map(|d| d.abs()).fold(0.0, f64::max);
    verdict(
        5,
        "chance-constraint tracking",
        failed == 0 && worst <= 0.07,
        format!("max |feasibility - (1-a)| {worst:.3}; deviations {:?}", devs.iter().map(|d| format!("{d:+.3}")).collect::<Vec<_>>()),
        t,
        180.0,
    );
}

#[test]
fn check_06_robust_conservatism() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for periods in 1..=3 {
        let (inst, models) = planning(periods, NoiseKind::Nonuniform);
        let pts = sweep(&inst, &models, &[Mode::Nominal, Mode::Robust], &[0.6, 0.8, 0.95]);
        for p in &pts {
            let good = p.solution.is_ok()
                && match p.mode {
                    Mode::Robust => p.feasibility >= p.confidence - 0.05,
                    _ => (p.feasibility - 0.5).abs() <= 0.15,
                };
            ok &= good;
            if p.mode == Mode::Robust || p.confidence == 0.6 {
                lines.push(format!("T={periods} {} {}: {:.3}{}", p.mode.name(), p.confidence, p.feasibility, if good { "" } else { " (!)" }));
            }
        }
    }
    verdict(6, "robust conservatism", ok, lines.join(", "), t, 300.0);
}

#[test]
fn check_07_objective_monotonicity() {
    let t = Instant::now();
    let grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999];
    let mut ok = true;
    let mut lines = Vec::new();
    for noise in [NoiseKind::Uniform, NoiseKind::Nonuniform] {
        for periods in 1..=3 {
            let (inst, models) = planning(periods, noise);
            let pts = sweep(&inst, &models, &[Mode::Nominal, Mode::Robust], &grid);
            let nominal = pts[0].solution.as_ref().map(|s| s.objective).unwrap_or(f64::NAN);
            let robust: Vec<f64> = pts.iter().filter(|p| p.mode == Mode::Robust).map(|p| p.solution.as_ref().map_or(f64::NAN, |s| s.objective)).collect();
            let scale = nominal.abs().max(1e-12);
            let worst_rise = robust.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            let mono = robust.iter().all(|v| v.is_finite()) && worst_rise <= 1e-4 * scale;
            let below = robust[robust.len() - 1] < nominal;
            ok &= mono && below;
            lines.push(format!("{} T={periods}: max rise {:.1e}, {:.4} -> {:.4} (nominal {nominal:.4})", noise.name(), worst_rise / scale, robust[0], robust[robust.len() - 1]));
        }
    }
    verdict(7, "objective monotonicity", ok, lines.join("; "), t, 600.0);
}

#[test]
fn check_08_a_posteriori_loop() {
    let t = Instant::now();
    let (inst, models) = planning(2, NoiseKind::Uniform);
    let UncertainModel::Warped(warped) = &models.warped else { unreachable!() };
    let cfg = PosteriorConfig { target: 0.5, tolerance: 0.02, n_samples: 20_000, max_iters: 30, seed: SEED };
    let mut solve = PlanningSolveOptions::default();
    solve.multistart.seed = SEED;
    let pts = run_a_posteriori(&inst, warped, &[0.7, 0.9], &cfg, &solve, 100_000).unwrap();
    let ok = pts.iter().all(|p| (p.estimated_feasibility - p.target).abs() <= 0.02 && p.objective >= p.a_priori_objective - 1e-9);
    let detail = pts
        .iter()
        .map(|p| {
            format!(
                "target {}: confidence {:.4}, feasibility {:.4} (ground truth {:.4}), objective {:.5} vs a priori {:.5}",
                p.target, p.confidence, p.estimated_feasibility, p.true_feasibility, p.objective, p.a_priori_objective
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(8, "a-posteriori loop", ok, detail, t, 300.0);
}

// --------------------------------------------------------------- drilling

const DRILL_GRID: [f64; 9] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.975, 0.99, 0.999];

struct DrillRow {
    instance: &'static str,
    confidence: f64,
    results: [StrategyResult; 3],
    enumeration_count: usize,
}

fn rate_model() -> &'static wgpro_core::warping::WarpedGpModel {
    static M: OnceLock<wgpro_core::warping::WarpedGpModel> = OnceLock::new();
    M.get_or_init(|| fit_degradation_model(&LifetimeData::builtin(), 2, 10, SEED, Execution::Parallel).unwrap())
}

fn drill_opts() -> DrillSolveOptions {
    let mut o = DrillSolveOptions::default();
    o.multistart.seed = SEED;
    o
}

fn expected_count(inst: &DrillInstance, deg: Degradation) -> usize {
    let caps = no_degradation_heuristic(inst, deg, &drill_opts()).unwrap().caps;
    (0..=caps.len()).map(|m| nested_sum_count(&caps[caps.len() - m..].iter().map(|c| c + 1).collect::<Vec<_>>())).sum()
}

/// The robust strategy sweep, shared with the monotonicity check.
fn drill_sweep() -> &'static (Vec<DrillRow>, f64) {
    static S: OnceLock<(Vec<DrillRow>, f64)> = OnceLock::new();
    S.get_or_init(|| {
        let t = Instant::now();
        let mut rows = Vec::new();
        for (name, geo) in [("two_segment", Geology::two_segment()), ("six_segment", Geology::six_segment())] {
            let inst = DrillInstance::new(geo, 2200.0, rate_model().clone()).unwrap();
            for &c in &DRILL_GRID {
                let deg = Degradation::Robust { alpha: 1.0 - c };
                let run = |s| run_strategy(&inst, s, deg, &drill_opts()).unwrap();
                rows.push(DrillRow {
                    instance: name,
                    confidence: c,
                    results: [run(Strategy::NoDegradation), run(Strategy::Boundary), run(Strategy::Enumeration)],
                    enumeration_count: expected_count(&inst, deg),
                });
            }
        }
        (rows, t.elapsed().as_secs_f64())
    })
}

#[test]
fn check_09_drilling_strategy_dominance() {
    let t = Instant::now();
    let (rows, secs) = drill_sweep();
    let mut ok = true;
    let mut worst_gap = 0.0f64;
    let mut lines = Vec::new();
    for r in rows {
        let [nd, b, e] = [&r.results[0].schedule, &r.results[1].schedule, &r.results[2].schedule];
        let gap = (b.total_h - e.total_h).abs() / e.total_h;
        worst_gap = worst_gap.max(gap);
        let good = gap <= 1e-3
            && nd.total_h >= b.total_h * (1.0 - 1e-9)
            && r.results[2].solves == 1 + r.enumeration_count
            && [nd, b, e].iter().all(|s| s.feasible);
        ok &= good;
        if !good || r.confidence == 0.5 || r.confidence == 0.999 {
            lines.push(format!(
                "{} {}: {:.4}/{:.4}/{:.4} h, {} assignments{}",
                r.instance,
                r.confidence,
                nd.total_h,
                b.total_h,
                e.total_h,
                r.enumeration_count,
                if good { "" } else { " (!)" }
            ));
        }
    }
    // the sweep may have been computed by the monotonicity check
    let secs = secs.max(t.elapsed().as_secs_f64());
    verdict_secs(9, "drilling strategy dominance", ok, format!("worst boundary/enumeration gap {worst_gap:.1e}; {}", lines.join("; ")), secs, 600.0);
}

#[test]
fn check_10_drilling_monotonicity() {
    let t = Instant::now();
    let (rows, _) = drill_sweep();
    let mut ok = true;
    let mut lines = Vec::new();
    for name in ["two_segment", "six_segment"] {
        let costs: Vec<f64> = rows.iter().filter(|r| r.instance == name).map(|r| r.results[2].schedule.total_h).collect();
        let worst = costs.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
        ok &= worst <= 1e-4 * costs[0];
        lines.push(format!("{name} confidence: {:.4} -> {:.4} h, max drop {worst:.1e}", costs[0], costs[costs.len() - 1]));
    }
    let depths = [1400.0, 1800.0, 2200.0, 2600.0];
    for deg in [Degradation::Nominal, Degradation::Robust { alpha: 0.1 }] {
        let costs: Vec<f64> = depths
            .iter()
            .map(|d| {
                let inst = DrillInstance::new(Geology::two_segment(), *d, rate_model().clone()).unwrap();
                run_strategy(&inst, Strategy::Enumeration, deg, &drill_opts()).unwrap().schedule.total_h
            })
            .collect();
        let worst = costs.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
        ok &= worst <= 1e-4 * costs[0];
        lines.push(format!("two_segment {} depth: {:?} h", deg.name(), costs.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>()));
    }
    verdict(10, "drilling monotonicity", ok, lines.join("; "), t, 900.0);
}

// ------------------------------------------------------------- properties

fn se(a: &[f64], b: &[f64], k: &KernelParams) -> f64 {
    let d2: f64 = a.iter().zip(b).zip(&k.lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    k.signal_variance * (-0.5 * d2).exp()
}

#[test]
fn check_11_property_suites() {
    let t = Instant::now();
    let mut rng = stream_rng(SEED, 11);
    let mut notes = Vec::new();

    // warp round trip and derivative
    let (mut trip, mut deriv) = (0.0f64, 0.0f64);
    for _ in 0..2000 {
        let terms = (0..rng.random_range(0..4))
            .map(|_| WarpTerm { a: rng.random_range(0.0..2.0), b: rng.random_range(0.0..3.0), c: rng.random_range(-2.0..2.0) })
            .collect();
        let w = ObservationWarp::new(WarpParams::new(terms).unwrap(), rng.random_range(-1.0..1.0), rng.random_range(0.2..3.0)).unwrap();
        let y: f64 = rng.random_range(-5.0..5.0);
        trip = trip.max((w.inverse(w.apply(y)).unwrap() - y).abs() / y.abs().max(1.0));
        let h = 1e-5;
        let fd = (w.apply(y + h) - w.apply(y - h)) / (2.0 * h);
        deriv = deriv.max((fd - w.derivative(y)).abs() / w.derivative(y).abs().max(1.0));
    }
    let mut ok = trip <= 1e-9 && deriv <= 1e-6;
    notes.push(format!("warp round trip {trip:.1e}, derivative {deriv:.1e}"));

    // GP prediction against a dense inverse
    let mut gp_err = 0.0f64;
    for n in 1..=20 {
        let dim = 1 + n % 3;
        let x = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let k = KernelParams::new(rng.random_range(0.5..2.0), (0..dim).map(|_| rng.random_range(0.5..2.0)).collect(), rng.random_range(1e-3..1e-1)).unwrap();
        let gp = GpModel::new(k.clone(), TrainingData::new(x.clone(), y.clone()).unwrap()).unwrap();
        let test = DMatrix::from_fn(5, dim, |_, _| rng.random_range(-3.0..3.0));
        let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<_>>();
        let kxx = DMatrix::from_fn(n, n, |i, j| se(&row(&x, i), &row(&x, j), &k) + if i == j { k.noise_variance } else { 0.0 });
        let ksx = DMatrix::from_fn(5, n, |i, j| se(&row(&test, i), &row(&x, j), &k));
        let kss = DMatrix::from_fn(5, 5, |i, j| se(&row(&test, i), &row(&test, j), &k));
        let inv = kxx.try_inverse().unwrap();
        let p = gp.predict_joint(&test).unwrap();
        gp_err = gp_err.max((p.mean - &ksx * &inv * &y).amax()).max((p.cov - (kss - &ksx * &inv * ksx.transpose())).amax());
    }
    ok &= gp_err <= 1e-8;
    notes.push(format!("GP vs dense inverse {gp_err:.1e}"));

    // branch-and-bound bounds and boundary residual
    let (mut bound_viol, mut resid) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let warp = ObservationWarp::new(
            WarpParams::single(rng.random_range(0.1..1.5), rng.random_range(0.3..3.0), rng.random_range(-1.0..1.0)).unwrap(),
            0.0,
            1.0,
        )
        .unwrap();
        let set = warped_set(&mut rng, 2, warp, 0.6, 0.05);
        let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let r = bnb_inner_max_with(&set, &x, &BnbOptions { eps_rel: 1e-6, ..Default::default() }).unwrap();
        for w in r.bound_history.windows(2) {
            bound_viol = bound_viol.max(w[0].0 - w[1].0).max(w[1].1 - w[0].1);
        }
        let e = &set.ellipsoid;
        resid = resid.max((e.mahalanobis(&r.latent_argpoint) - e.radius_sq).abs() / e.radius_sq);
    }
    ok &= bound_viol <= 0.0 && resid <= 1e-6;
    notes.push(format!("bound monotonicity violation {bound_viol:.1e}, boundary residual {resid:.1e}"));

    // multistart determinism
    let p = NlpProblem::from_values(vec![-2.0; 3], vec![2.0; 3], |v| v.iter().map(|x| (x * x - 1.0).powi(2) + 0.1 * x).sum()).unwrap();
    let run = |exec| multistart_with(&p, &MultistartOptions { seed: SEED, exec, n_starts: 16, ..Default::default() }).unwrap();
    let (a, b, c) = (run(Execution::Sequential), run(Execution::Parallel), run(Execution::Parallel));
    let same = a.best.point == b.best.point && b.best.point == c.best.point && a.n_starts_run == c.n_starts_run;
    ok &= same;
    notes.push(format!("multistart reproducible: {same}"));

    verdict(11, "property suites", ok, notes.join(", "), t, 60.0);
}
