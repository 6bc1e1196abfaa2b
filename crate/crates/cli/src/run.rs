use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use wgpro_core::exec::stream_rng;
use wgpro_core::innermax::bnb_inner_max;
use wgpro_core::nlp::SolveStatus;
use wgpro_core::posterior::{trace_table, PosteriorConfig};
use wgpro_core::reformulate::{convexity_certificate, solve_wolfe_kkt, Certificate, XSign};
use wgpro_core::table::{Cell, Table};
use wgpro_core::uncertainty::{UncertaintyEllipsoid, WarpedSet};
use wgpro_core::warping::{ObservationWarp, WarpParams};
use wgpro_core::Execution;
use wgpro_studies::drilling::{
    degradation_rate, drill_table, fit_degradation_model, run_drill_sweep, schedule_table, Degradation, DrillInstance, DrillPoint,
    DrillSolveOptions, Geology, LifetimeData, Strategy,
};
use wgpro_studies::planning::{
    fit_models, generate_dataset, posterior_table, run_a_posteriori, run_confidence_sweep, sweep_table, Mode, NoiseKind,
    PlanningInstance, PlanningModels, PlanningSolveOptions, SweepOptions,
};

use crate::config::{ConfigError, ExperimentConfig, Study};

/// Command-line values that replace config entries.
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub study: Option<Study>,
    pub points: Option<Vec<f64>>,
}

/// A validated config plus what the manifest needs to reproduce it.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: PathBuf,
    pub sha256: String,
    pub output_dir: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn load_config(path: &Path, ov: Overrides) -> Result<LoadedConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| ConfigError(format!("{} is not UTF-8", path.display())))?;
    let mut config = ExperimentConfig::parse(text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve_paths(&base);
    if let Some(s) = ov.seed {
        config.seed = s;
    }
    if let Some(s) = ov.study {
        config.study = s;
    }
    if let Some(p) = ov.points {
        config.confidences = p;
    }
    let output_dir = match ov.out {
        Some(o) => o,
        None if config.output_dir.is_relative() => base.join(&config.output_dir),
        None => config.output_dir.clone(),
    };
    config.output_dir = output_dir.clone();
    config.validate()?;
    Ok(LoadedConfig { config, source: path.to_path_buf(), sha256: sha256_hex(&bytes), output_dir })
}

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Failed(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) | RunError::Failed(m) => f.write_str(m),
        }
    }
}

impl RunError {
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

fn failed(e: impl std::fmt::Display) -> RunError {
    RunError::Failed(e.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

pub struct Summary {
    pub outputs: Vec<OutputRecord>,
    pub failed_points: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    study: &'static str,
    seed: u64,
    config_file: String,
    config_sha256: &'a str,
    features: Vec<&'static str>,
    failed_points: usize,
    outputs: &'a [OutputRecord],
    /// Effective configuration after overrides; rerun a single point with
    /// `--points <confidence>` and a one-element mode/instance list.
    config: &'a ExperimentConfig,
}

fn features() -> Vec<&'static str> {
    let mut f = Vec::new();
    if cfg!(feature = "parallel") {
        f.push("parallel");
    }
    f
}

/// Collects tables and writes them from one place.
struct Writer {
    dir: PathBuf,
    outputs: Vec<OutputRecord>,
}

impl Writer {
    fn emit(&mut self, name: &str, table: &Table) -> Result<(), RunError> {
        let text = table.to_csv_string().map_err(failed)?;
        let path = self.dir.join(name);
        std::fs::write(&path, &text).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(OutputRecord { file: name.to_string(), rows: table.rows.len(), sha256: sha256_hex(text.as_bytes()) });
        Ok(())
    }
}

pub fn execute(loaded: &LoadedConfig) -> Result<Summary, RunError> {
    let cfg = &loaded.config;
    std::fs::create_dir_all(&loaded.output_dir)
        .map_err(|e| RunError::Config(format!("cannot create {}: {e}", loaded.output_dir.display())))?;
    let mut w = Writer { dir: loaded.output_dir.clone(), outputs: Vec::new() };
    let failed_points = match cfg.study {
        Study::Planning => run_planning(cfg, &mut w)?,
        Study::Drilling => run_drilling(cfg, &mut w)?,
        Study::UnitDemo => run_unit_demo(cfg, &mut w)?,
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        study: cfg.study.name(),
        seed: cfg.seed,
        config_file: loaded.source.display().to_string(),
        config_sha256: &loaded.sha256,
        features: features(),
        failed_points,
        outputs: &w.outputs,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(failed)?;
    let path = loaded.output_dir.join("manifest.toml");
    std::fs::write(&path, text).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))?;
    Ok(Summary { outputs: w.outputs, failed_points })
}

fn planning_solve_options(cfg: &ExperimentConfig) -> PlanningSolveOptions {
    let mut o = PlanningSolveOptions::default();
    o.multistart.n_starts = cfg.solver.starts;
    o.multistart.stop_hits = cfg.solver.stop_hits;
    o.multistart.seed = cfg.seed;
    o
}

fn planning_instance(cfg: &ExperimentConfig, periods: usize, noise: &str, sigma: f64) -> Result<PlanningInstance, RunError> {
    let noise = NoiseKind::parse(noise).map_err(|e| RunError::Config(e.to_string()))?;
    let mut inst = PlanningInstance::new(periods, noise, sigma, cfg.seed).map_err(|e| RunError::Config(e.to_string()))?;
    inst.n_data = cfg.planning.n_data;
    inst.x_max = cfg.planning.x_max;
    inst.envelope = cfg.planning.envelope.reading();
    Ok(inst)
}

fn fit_planning(cfg: &ExperimentConfig, inst: &PlanningInstance) -> Result<PlanningModels, RunError> {
    let data = generate_dataset(inst).map_err(failed)?;
    fit_models(&data, cfg.planning.warp_terms, cfg.planning.fit_restarts, cfg.seed, Execution::Parallel).map_err(failed)
}

fn run_planning(cfg: &ExperimentConfig, w: &mut Writer) -> Result<usize, RunError> {
    let p = &cfg.planning;
    let modes = p.modes.iter().map(|m| Mode::parse(m)).collect::<Result<Vec<_>, _>>().map_err(|e| RunError::Config(e.to_string()))?;
    let solve = planning_solve_options(cfg);
    let mut sweep: Option<Table> = None;
    let mut failures = 0;
    for noise in &p.noise {
        for &sigma in &p.sigma_noise {
            // the dataset does not depend on the horizon, so one fit serves every T
            let base = planning_instance(cfg, p.periods[0], noise, sigma)?;
            let models = fit_planning(cfg, &base)?;
            for &periods in &p.periods {
                let inst = planning_instance(cfg, periods, noise, sigma)?;
                let opts = SweepOptions {
                    confidences: cfg.confidences.clone(),
                    modes: modes.clone(),
                    feasibility_samples: p.feasibility_samples,
                    solve,
                    exec: Execution::Parallel,
                    record_timing: cfg.record_timing,
                };
                let points = run_confidence_sweep(&inst, &models, &opts);
                failures += points
                    .iter()
                    .filter(|pt| pt.solution.as_ref().map_or(true, |s| s.status == SolveStatus::NumericalFailure))
                    .count();
                let t = sweep_table(&inst, &points, cfg.record_timing);
                match &mut sweep {
                    Some(acc) => acc.rows.extend(t.rows),
                    None => sweep = Some(t),
                }
            }
        }
    }
    w.emit("planning_sweep.csv", &sweep.expect("periods, noise and sigma_noise are nonempty"))?;

    if let Some(post) = &p.posterior {
        let inst = planning_instance(cfg, post.periods, &post.noise, post.sigma_noise)?;
        let models = fit_planning(cfg, &inst)?;
        let wgpro_core::reformulate::UncertainModel::Warped(warped) = &models.warped else {
            unreachable!("fit_models returns a warped model")
        };
        let pc = PosteriorConfig { target: 0.5, tolerance: post.tolerance, n_samples: post.samples, max_iters: post.max_iters, seed: cfg.seed };
        let mut summary = posterior_table(&[]);
        let mut trace = Table::new(std::iter::once("target".to_string()).chain(trace_table(&[]).columns));
        for &target in &post.targets {
            match run_a_posteriori(&inst, warped, &[target], &pc, &solve, p.feasibility_samples) {
                Ok(points) => {
                    summary.rows.extend(posterior_table(&points).rows);
                    for pt in &points {
                        failures += usize::from(!pt.converged);
                        for row in trace_table(&pt.trace).rows {
                            trace.rows.push(std::iter::once(Cell::Float(target)).chain(row).collect());
                        }
                    }
                }
                Err(e) => {
                    failures += 1;
                    let mut row = vec![Cell::Float(target)];
                    row.resize(summary.columns.len() - 1, Cell::Float(f64::NAN));
                    row.push(format!("error: {e}").into());
                    summary.rows.push(row);
                }
            }
        }
        w.emit("planning_posterior.csv", &summary)?;
        w.emit("planning_posterior_trace.csv", &trace)?;
    }
    Ok(failures)
}

fn degradation_settings(cfg: &ExperimentConfig) -> Vec<Degradation> {
    let mut out = Vec::new();
    for m in &cfg.drilling.modes {
        match m.as_str() {
            "ignore" => out.push(Degradation::Ignore),
            "nominal" => out.push(Degradation::Nominal),
            _ => out.extend(cfg.confidences.iter().map(|c| Degradation::Robust { alpha: 1.0 - c })),
        }
    }
    out
}

fn run_drilling(cfg: &ExperimentConfig, w: &mut Writer) -> Result<usize, RunError> {
    let d = &cfg.drilling;
    let data = match &d.lifetime_data {
        Some(p) => LifetimeData::load(p).map_err(|e| RunError::Config(e.to_string()))?,
        None => LifetimeData::builtin(),
    };
    let model = fit_degradation_model(&data, d.warp_terms, d.fit_restarts, cfg.seed, Execution::Parallel).map_err(failed)?;

    let mut rates = Table::new(["delta_p_mpa", "rate_per_h", "lifetime_h", "extrapolated", "observed_lifetime_h"]);
    let (lo, hi) = data.delta_p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    for i in 0..=50 {
        let dp = lo + (hi - lo) * i as f64 / 50.0;
        let r = degradation_rate(dp, &model).map_err(failed)?;
        let observed = data.delta_p.iter().position(|x| (x - dp).abs() < 1e-9).map_or(Cell::Text(String::new()), |j| Cell::Float(data.lifetime_h[j]));
        rates.rows.push(vec![dp.into(), r.rate.into(), (1.0 / r.rate).into(), (if r.extrapolated { "true" } else { "false" }).into(), observed]);
    }
    w.emit("drilling_rate_model.csv", &rates)?;

    let strategies = d.strategies.iter().map(|s| Strategy::parse(s)).collect::<Result<Vec<_>, _>>().map_err(|e| RunError::Config(e.to_string()))?;
    let settings = degradation_settings(cfg);
    let mut opts = DrillSolveOptions::default();
    opts.multistart.n_starts = cfg.solver.starts;
    opts.multistart.stop_hits = cfg.solver.stop_hits;
    opts.multistart.seed = cfg.seed;

    let mut points: Vec<DrillPoint> = Vec::new();
    for ic in &d.instances {
        let geology = match ic.geology.as_str() {
            "two_segment" => Geology::two_segment(),
            "six_segment" => Geology::six_segment(),
            path => Geology::load(Path::new(path)).map_err(|e| RunError::Config(e.to_string()))?,
        };
        let mut inst = DrillInstance::new(geology, d.depths[0], model.clone()).map_err(|e| RunError::Config(e.to_string()))?;
        inst.bit = d.bit.params();
        inst.power = d.power.curve();
        inst.maintenance_base = d.maintenance_base;
        inst.maintenance_per_m = d.maintenance_per_m;
        inst.smoothing = d.smoothing;
        inst.validate().map_err(|e| RunError::Config(format!("instance {}: {e}", ic.name)))?;
        points.extend(run_drill_sweep(&ic.name, &inst, &d.depths, &settings, &strategies, &opts));
    }
    let failures = points.iter().filter(|p| p.result.as_ref().map_or(true, |r| !r.schedule.feasible)).count();
    w.emit("drilling_strategies.csv", &drill_table(&points, cfg.record_timing))?;

    let mut spans = Table::new(
        ["instance", "strategy", "mode", "confidence", "target_depth_m"].into_iter().map(String::from).chain(schedule_table_columns()),
    );
    for p in &points {
        if let Ok(r) = &p.result {
            let conf = p.degradation.confidence().map_or(Cell::Text(String::new()), Cell::Float);
            for row in schedule_table(&r.schedule).rows {
                let head = vec![p.instance.clone().into(), p.strategy.name().into(), p.degradation.name().into(), conf.clone(), p.target_depth.into()];
                spans.rows.push(head.into_iter().chain(row).collect());
            }
        }
    }
    w.emit("drilling_schedules.csv", &spans)?;
    Ok(failures)
}

fn schedule_table_columns() -> Vec<String> {
    schedule_table(&wgpro_studies::drilling::Schedule {
        assignment: Vec::new(),
        events: Vec::new(),
        spans: Vec::new(),
        drilling_h: 0.0,
        maintenance_h: 0.0,
        total_h: 0.0,
        degradation: Vec::new(),
        feasible: true,
        status: SolveStatus::Optimal,
        verified: None,
    })
    .columns
}

/// Seeded two-dimensional instance with a single concave-leaning tanh warp.
fn demo_instance(seed: u64, i: usize, alpha: f64) -> Result<(WarpedSet, DVector<f64>), wgpro_core::Error> {
    let mut rng = stream_rng(seed, i as u64);
    let mu = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let l = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.5..0.5));
    let sigma = &l * l.transpose() + DMatrix::identity(2, 2) * 0.05;
    let (a, b, c) = (rng.random_range(0.2..1.0), rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0));
    let warp = ObservationWarp::new(WarpParams::single(a, b, c)?, 0.0, 1.0)?;
    let x = DVector::from_fn(2, |_, _| rng.random_range(0.1..1.0));
    Ok((WarpedSet::new(UncertaintyEllipsoid::new(mu, sigma, alpha)?, warp), x))
}

fn run_unit_demo(cfg: &ExperimentConfig, w: &mut Writer) -> Result<usize, RunError> {
    let mut t = Table::new([
        "instance",
        "confidence",
        "x1",
        "x2",
        "nominal",
        "wolfe_value",
        "wolfe_residual",
        "bnb_value",
        "bnb_upper_bound",
        "rel_gap",
        "certified",
        "status",
    ]);
    let mut failures = 0;
    for i in 0..cfg.unit_demo.instances {
        for &conf in &cfg.confidences {
            let row = (|| -> Result<Vec<Cell>, wgpro_core::Error> {
                let (set, x) = demo_instance(cfg.seed, i, 1.0 - conf)?;
                let e = &set.ellipsoid;
                let z0 = e.mu.map(|m| set.warp.inverse(m).unwrap_or(f64::NAN));
                let r = e.radius();
                let mut zlo = f64::INFINITY;
                let mut zhi = f64::NEG_INFINITY;
                for j in 0..2 {
                    let s = r * e.sigma[(j, j)].sqrt();
                    zlo = zlo.min(set.warp.inverse(e.mu[j] - s)?);
                    zhi = zhi.max(set.warp.inverse(e.mu[j] + s)?);
                }
                let cert = convexity_certificate(&set.warp, XSign::of(x.as_slice()), (zlo, zhi));
                let wolfe = solve_wolfe_kkt(&set, &x)?;
                let bnb = bnb_inner_max(&set, &x, 1e-6)?;
                let gap = (bnb.value - wolfe.value).abs() / bnb.value.abs().max(1e-12);
                Ok(vec![
                    i.into(),
                    conf.into(),
                    x[0].into(),
                    x[1].into(),
                    z0.dot(&x).into(),
                    wolfe.value.into(),
                    wolfe.residual.into(),
                    bnb.value.into(),
                    bnb.upper_bound.into(),
                    gap.into(),
                    (if cert == Certificate::CertifiedUniqueKkt { "true" } else { "false" }).into(),
                    "ok".into(),
                ])
            })();
            t.rows.push(match row {
                Ok(r) => r,
                Err(e) => {
                    failures += 1;
                    let mut r = vec![i.into(), conf.into()];
                    r.resize(t.columns.len() - 2, Cell::Float(f64::NAN));
                    r.extend(["".into(), format!("error: {e}").into()]);
                    r
                }
            });
        }
    }
    w.emit("unit_demo.csv", &t)?;
    Ok(failures)
}
