//! Experiment configuration in TOML. Every table rejects unknown keys, so a
//! typo aborts before any compute starts.

use std::path::{Path, PathBuf};

use fbf_core::filtering::FilterOptions;
use fbf_core::flows::FlowConfig;
use fbf_core::latent_ssm::ConditionerConfig;
use fbf_core::metrics::MMD_SIGMA;
use fbf_core::model::{ModelConfig, Variant};
use fbf_core::rng::derive_seed;
use fbf_core::systems::SystemConfig;
use fbf_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub filter: FilterOptions,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Total trajectories generated; the last `evaluation.test_trajectories`
    /// are held out for testing.
    pub trajectories: usize,
    pub steps: usize,
}

/// [`ModelConfig`] without the dimensions, which come from the system.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub state_flow: FlowConfig,
    #[serde(default)]
    pub meas_flow: FlowConfig,
    #[serde(default)]
    pub conditioner: ConditionerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Mmd,
    Crps,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Mmd => "mmd",
            Metric::Crps => "crps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_test")]
    pub test_trajectories: usize,
    /// Particle count for the bootstrap filter.
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_mmd_sigma")]
    pub mmd_sigma: f64,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
}

fn default_samples() -> usize {
    1000
}

fn default_test() -> usize {
    20
}

fn default_particles() -> usize {
    2000
}

fn default_mmd_sigma() -> f64 {
    MMD_SIGMA
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Rmse, Metric::Mmd, Metric::Crps]
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            samples: default_samples(),
            test_trajectories: default_test(),
            particles: default_particles(),
            mmd_sigma: default_mmd_sigma(),
            metrics: default_metrics(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fbf,
    FbfPrime,
    Pf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbf => "fbf",
            Method::FbfPrime => "fbf_prime",
            Method::Pf => "pf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Measurement noise variances to sweep. Empty means the system's own.
    #[serde(default)]
    pub noise_levels: Vec<f64>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Fbf, Method::FbfPrime, Method::Pf]
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            methods: default_methods(),
            noise_levels: Vec::new(),
        }
    }
}

/// Where artifacts live. File names inside `dir` are fixed; command-line
/// flags override individual files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { dir: default_dir() }
    }
}

impl PathsSection {
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.fbfd")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.fbfc")
    }

    pub fn samples(&self, method: &str) -> PathBuf {
        self.dir.join(format!("{method}_samples.fbfs"))
    }

    pub fn metrics_json(&self, method: &str) -> PathBuf {
        self.dir.join(format!("{method}_metrics.json"))
    }

    pub fn compare_csv(&self) -> PathBuf {
        self.dir.join("compare.csv")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.data.trajectories == 0 {
            return bad("data.trajectories must be positive");
        }
        if self.data.steps == 0 {
            return bad("data.steps must be positive");
        }
        let ev = &self.evaluation;
        if ev.test_trajectories == 0 || ev.test_trajectories >= self.data.trajectories {
            return bad("evaluation.test_trajectories must lie in [1, data.trajectories)");
        }
        if ev.samples == 0 {
            return bad("evaluation.samples must be positive");
        }
        if ev.particles < 2 {
            return bad("evaluation.particles must be at least 2");
        }
        if !(ev.mmd_sigma > 0.0) {
            return bad("evaluation.mmd_sigma must be positive");
        }
        if ev.metrics.is_empty() {
            return bad("evaluation.metrics is empty");
        }
        if self.compare.methods.is_empty() {
            return bad("compare.methods is empty");
        }
        if self.compare.noise_levels.iter().any(|v| !(*v > 0.0)) {
            return bad("compare.noise_levels must be positive");
        }
        self.training.validate()?;
        fbf_core::systems::make_ssm_interface(&self.system)?;
        Ok(())
    }

    /// Replaces the root seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data", 0)
    }

    /// Training config with its seed derived from the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train", 0),
            ..self.training.clone()
        }
    }

    pub fn model_config(&self, state_dim: usize, meas_dim: usize) -> ModelConfig {
        ModelConfig {
            state_dim,
            meas_dim,
            variant: self.model.variant,
            state_flow: self.model.state_flow.clone(),
            meas_flow: self.model.meas_flow.clone(),
            conditioner: self.model.conditioner.clone(),
        }
    }

    /// First held-out trajectory.
    pub fn test_start(&self) -> usize {
        self.data.trajectories - self.evaluation.test_trajectories
    }
}

/// The system with its measurement noise variance replaced.
pub fn with_noise(system: &SystemConfig, r2: f64) -> SystemConfig {
    let mut s = system.clone();
    match &mut s {
        SystemConfig::Sinusoidal { r2: v, .. } => *v = r2,
        SystemConfig::Lorenz96 { obs_var, .. } => *obs_var = r2,
        SystemConfig::AdvectionDiffusion(c) => c.r2 = r2,
    }
    s
}

pub fn noise_of(system: &SystemConfig) -> f64 {
    match system {
        SystemConfig::Sinusoidal { r2, .. } => *r2,
        SystemConfig::Lorenz96 { obs_var, .. } => *obs_var,
        SystemConfig::AdvectionDiffusion(c) => c.r2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[system]
id = "sinusoidal"
q2 = 0.1
r2 = 0.05
[data]
trajectories = 30
steps = 10
[evaluation]
test_trajectories = 5
"#;

    #[test]
    fn parses_minimal() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.test_start(), 25);
        assert_eq!(cfg.model.variant, Variant::Fbf);
        assert_ne!(cfg.train_config().seed, cfg.training.seed);
    }

    #[test]
    fn unknown_keys_rejected() {
        for extra in ["bogus = 1\n", "[data]\nextra = 2\n", "[training]\nepochz = 3\n"] {
            let text = format!("{extra}{BASE}");
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{extra}");
        }
        let sys = BASE.replace("r2 = 0.05", "r2 = 0.05\nwidth = 2");
        assert!(ExperimentConfig::from_toml(&sys).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let zero = BASE.replace("trajectories = 30", "trajectories = 0");
        assert!(matches!(ExperimentConfig::from_toml(&zero), Err(CliError::Config(_))));
        let lorenz = BASE.replace("id = \"sinusoidal\"\nq2 = 0.1\nr2 = 0.05", "id = \"lorenz96\"\ndim = 1");
        assert!(ExperimentConfig::from_toml(&lorenz).is_err());
    }

    #[test]
    fn noise_override() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let s = with_noise(&cfg.system, 0.2);
        assert_eq!(noise_of(&s), 0.2);
    }
}
