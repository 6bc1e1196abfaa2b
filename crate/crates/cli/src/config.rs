use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wgpro_studies::drilling::{BitParams, PowerCurve, Strategy};
use wgpro_studies::planning::{EnvelopeReading, Mode, NoiseKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Planning,
    Drilling,
    UnitDemo,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Planning => "planning",
            Study::Drilling => "drilling",
            Study::UnitDemo => "unit-demo",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Study,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Confidence levels 1 - alpha.
    pub confidences: Vec<f64>,
    /// Adds wall-clock columns; outputs are then no longer byte-reproducible.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub planning: PlanningConfig,
    #[serde(default)]
    pub drilling: DrillingConfig,
    #[serde(default)]
    pub unit_demo: UnitDemoConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub starts: usize,
    pub stop_hits: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { starts: 30, stop_hits: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanningConfig {
    pub periods: Vec<usize>,
    pub noise: Vec<String>,
    pub sigma_noise: Vec<f64>,
    /// Reading of the nonuniform envelope `4 sigma exp(-x/2)`.
    pub envelope: Envelope,
    pub n_data: usize,
    pub x_max: f64,
    pub modes: Vec<String>,
    pub feasibility_samples: usize,
    pub warp_terms: usize,
    pub fit_restarts: usize,
    pub posterior: Option<PosteriorBlock>,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            periods: vec![1, 2, 3],
            noise: vec!["uniform".into()],
            sigma_noise: vec![0.01],
            envelope: Envelope::Variance,
            n_data: 50,
            x_max: 3.0,
            modes: vec!["nominal".into(), "chance".into(), "robust".into()],
            feasibility_samples: 100_000,
            warp_terms: 2,
            fit_restarts: 5,
            posterior: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Variance,
    StdDev,
}

impl Envelope {
    pub fn reading(self) -> EnvelopeReading {
        match self {
            Envelope::Variance => EnvelopeReading::Variance,
            Envelope::StdDev => EnvelopeReading::StdDev,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorBlock {
    pub targets: Vec<f64>,
    #[serde(default = "two")]
    pub periods: usize,
    #[serde(default = "default_noise")]
    pub noise: String,
    #[serde(default = "default_sigma")]
    pub sigma_noise: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_model_samples")]
    pub samples: usize,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
}

fn two() -> usize {
    2
}
fn default_noise() -> String {
    "uniform".into()
}
fn default_sigma() -> f64 {
    0.01
}
fn default_tolerance() -> f64 {
    0.02
}
fn default_model_samples() -> usize {
    20_000
}
fn default_iters() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrillingConfig {
    /// CSV `delta_p_mpa,lifetime_h`; the bundled data when absent.
    pub lifetime_data: Option<PathBuf>,
    pub warp_terms: usize,
    pub fit_restarts: usize,
    pub instances: Vec<DrillInstanceConfig>,
    pub depths: Vec<f64>,
    pub modes: Vec<String>,
    pub strategies: Vec<String>,
    pub maintenance_base: f64,
    pub maintenance_per_m: f64,
    pub smoothing: f64,
    pub bit: BitConfig,
    pub power: PowerConfig,
}

impl Default for DrillingConfig {
    fn default() -> Self {
        Self {
            lifetime_data: None,
            warp_terms: 2,
            fit_restarts: 10,
            instances: vec![
                DrillInstanceConfig { name: "two_segment".into(), geology: "two_segment".into() },
                DrillInstanceConfig { name: "six_segment".into(), geology: "six_segment".into() },
            ],
            depths: vec![2200.0],
            modes: vec!["nominal".into(), "robust".into()],
            strategies: Strategy::ALL.iter().map(|s| s.name().to_string()).collect(),
            maintenance_base: 8.0,
            maintenance_per_m: 0.004,
            smoothing: 1.0,
            bit: BitConfig::default(),
            power: PowerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrillInstanceConfig {
    pub name: String,
    /// `two_segment`, `six_segment`, or a CSV path with columns `top_m,rock`.
    pub geology: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BitConfig {
    pub radius_mm: f64,
    pub rho: f64,
    pub w_min_n: f64,
    pub w_max_n: f64,
    pub n_max_rpm: f64,
}

impl Default for BitConfig {
    fn default() -> Self {
        let b = BitParams::default();
        Self { radius_mm: b.radius, rho: b.rho, w_min_n: b.w_min, w_max_n: b.w_max, n_max_rpm: b.n_max }
    }
}

impl BitConfig {
    pub fn params(&self) -> BitParams {
        BitParams { radius: self.radius_mm, rho: self.rho, w_min: self.w_min_n, w_max: self.w_max_n, n_max: self.n_max_rpm }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConfig {
    /// Δp = c0 + c1 T + c2 T² (MPa, T in N·m).
    pub pressure: [f64; 3],
    /// N_motor = d0 + d1 Δp + d2 Δp² (rpm).
    pub motor_speed: [f64; 3],
    pub dp_max_mpa: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        let p = PowerCurve::default();
        Self { pressure: p.pressure, motor_speed: p.motor_speed, dp_max_mpa: p.dp_max }
    }
}

impl PowerConfig {
    pub fn curve(&self) -> PowerCurve {
        PowerCurve { pressure: self.pressure, motor_speed: self.motor_speed, dp_max: self.dp_max_mpa }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnitDemoConfig {
    /// Seeded two-dimensional warped instances.
    pub instances: usize,
}

impl Default for UnitDemoConfig {
    fn default() -> Self {
        Self { instances: 5 }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad(format!("config: {e}")))
    }

    /// Resolve relative data paths against `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.drilling.lifetime_data {
            if p.is_relative() {
                self.drilling.lifetime_data = Some(base.join(p));
            }
        }
        for inst in &mut self.drilling.instances {
            if !matches!(inst.geology.as_str(), "two_segment" | "six_segment") && Path::new(&inst.geology).is_relative() {
                inst.geology = base.join(&inst.geology).display().to_string();
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.confidences.is_empty() {
            return Err(bad("confidences must not be empty"));
        }
        if let Some(c) = self.confidences.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
            return Err(bad(format!("confidence {c} is not in (0,1)")));
        }
        if self.solver.starts == 0 || self.solver.stop_hits == 0 {
            return Err(bad("solver.starts and solver.stop_hits must be positive"));
        }
        match self.study {
            Study::Planning => self.validate_planning(),
            Study::Drilling => self.validate_drilling(),
            Study::UnitDemo => {
                if self.unit_demo.instances == 0 {
                    return Err(bad("unit_demo.instances must be positive"));
                }
                Ok(())
            }
        }
    }

    fn validate_planning(&self) -> Result<(), ConfigError> {
        let p = &self.planning;
        if p.periods.is_empty() || p.periods.iter().any(|t| *t == 0 || *t > 12) {
            return Err(bad("planning.periods must hold values in 1..=12"));
        }
        for n in &p.noise {
            NoiseKind::parse(n).map_err(|e| bad(format!("planning.noise: {e}")))?;
        }
        for m in &p.modes {
            Mode::parse(m).map_err(|e| bad(format!("planning.modes: {e}")))?;
        }
        if p.sigma_noise.is_empty() || p.sigma_noise.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("planning.sigma_noise must hold positive values"));
        }
        if p.n_data < 2 || !(p.x_max > 0.0) || p.warp_terms == 0 || p.fit_restarts == 0 {
            return Err(bad("planning needs n_data >= 2, x_max > 0 and positive warp_terms and fit_restarts"));
        }
        if p.feasibility_samples < 1000 {
            return Err(bad("planning.feasibility_samples must be at least 1000"));
        }
        if let Some(post) = &p.posterior {
            if post.targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                return Err(bad("planning.posterior.targets must lie in (0,1)"));
            }
            NoiseKind::parse(&post.noise).map_err(|e| bad(format!("planning.posterior.noise: {e}")))?;
            if post.periods == 0 || post.periods > 12 || !(post.tolerance > 0.0) || post.samples < 1000 {
                return Err(bad("planning.posterior needs periods in 1..=12, tolerance > 0 and samples >= 1000"));
            }
        }
        Ok(())
    }

    fn validate_drilling(&self) -> Result<(), ConfigError> {
        let d = &self.drilling;
        if let Some(p) = &d.lifetime_data {
            if !p.is_file() {
                return Err(bad(format!("lifetime data {} does not exist", p.display())));
            }
        }
        if d.instances.is_empty() {
            return Err(bad("drilling.instances must not be empty"));
        }
        for i in &d.instances {
            if !matches!(i.geology.as_str(), "two_segment" | "six_segment") && !Path::new(&i.geology).is_file() {
                return Err(bad(format!("geology file {} does not exist", i.geology)));
            }
        }
        if d.depths.is_empty() || d.depths.iter().any(|x| !(*x > 0.0)) {
            return Err(bad("drilling.depths must hold positive depths"));
        }
        for m in &d.modes {
            if !matches!(m.as_str(), "ignore" | "nominal" | "robust") {
                return Err(bad(format!("drilling.modes: unknown mode '{m}'")));
            }
        }
        for s in &d.strategies {
            Strategy::parse(s).map_err(|e| bad(format!("drilling.strategies: {e}")))?;
        }
        if d.warp_terms == 0 || d.fit_restarts == 0 || d.maintenance_base < 0.0 || d.maintenance_per_m < 0.0 || d.smoothing < 0.0 {
            return Err(bad("drilling needs positive warp_terms and fit_restarts and nonnegative maintenance and smoothing"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::parse("study = \"planning\"\nconfidences = [0.5]\n").unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.planning.periods, vec![1, 2, 3]);
        assert_eq!(c.planning.envelope, Envelope::Variance);
        let c = ExperimentConfig::parse("study = \"planning\"\nconfidences = [0.5]\n[planning]\nenvelope = \"std_dev\"\n").unwrap();
        assert_eq!(c.planning.envelope, Envelope::StdDev);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bad_values_are_rejected() {
        let c = ExperimentConfig::parse("study = \"planning\"\nconfidences = [0.5, 1.0]\n").unwrap();
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::parse("study = \"planning\"\nconfidences = [0.5]\nunknown = 1\n").is_err());
        let c = ExperimentConfig::parse("study = \"drilling\"\nconfidences = [0.5]\n[drilling]\nlifetime_data = \"/nonexistent.csv\"\n").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::parse("study = \"unit-demo\"\nconfidences = [0.5]\n[planning]\nmodes = [\"bogus\"]\n").unwrap();
        assert!(c.validate().is_ok(), "only the selected study is checked");
    }
}
