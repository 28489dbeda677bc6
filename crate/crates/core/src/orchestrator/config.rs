use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::HttpConfig;
use crate::roles::TaskSpec;
use crate::simulator::{builtin_suite, RobotLimits, Scenario, ScenarioError};
use crate::tester::{MetricThresholds, Objective, TuningBudget};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("invalid config: {0}")]
    Format(String),
    #[error("cannot read {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("scenario suite: {0}")]
    Suite(#[from] ScenarioError),
}

fn invalid(field: &str, message: &str) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendBinding {
    pub analyst: BackendKind,
    pub programmer: BackendKind,
    pub tester: BackendKind,
}

impl BackendBinding {
    pub fn all(kind: BackendKind) -> Self {
        BackendBinding { analyst: kind, programmer: kind, tester: kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub base_url: String,
    /// Model id sent to the endpoint; no model is assumed.
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub binding: BackendBinding,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let http = HttpConfig::default();
        BackendConfig {
            base_url: http.base_url,
            model: http.model,
            timeout_ms: http.timeout_ms,
            max_retries: http.max_retries,
            backoff_ms: http.backoff_ms,
            temperature: 0.0,
            max_tokens: 2048,
            binding: BackendBinding::default(),
        }
    }
}

impl BackendConfig {
    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            timeout_ms: self.timeout_ms,
            max_retries: self.max_retries,
            backoff_ms: self.backoff_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub rounds: usize,
    pub evals_per_round: usize,
    /// Immediate step applied to directive-named params, as a fraction of
    /// their range, before tuning starts.
    pub nudge_fraction: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        let b = TuningBudget::default();
        TuningConfig { rounds: b.rounds, evals_per_round: b.evals_per_round, nudge_fraction: 0.1 }
    }
}

impl TuningConfig {
    pub fn budget(&self) -> TuningBudget {
        TuningBudget { rounds: self.rounds, evals_per_round: self.evals_per_round }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Tuning rounds (and draft re-asks) before escalating to the analyst.
    pub k_adjust: u32,
    /// Escalations before the session fails.
    pub k_replan: u32,
    /// Operator adjust requests before escalating.
    pub k_review: u32,
    /// `builtin`, a scenario file, or a directory of scenario files.
    pub scenario_suite: String,
    pub thresholds: MetricThresholds,
    pub objective: Objective,
    pub tuning: TuningConfig,
    pub backend: BackendConfig,
    /// Directory with replacement role templates.
    pub templates_dir: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            k_adjust: 3,
            k_replan: 2,
            k_review: 5,
            scenario_suite: "builtin".into(),
            thresholds: MetricThresholds::default(),
            objective: Objective::default(),
            tuning: TuningConfig::default(),
            backend: BackendConfig::default(),
            templates_dir: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k_adjust < 1 {
            return Err(invalid("k_adjust", "must be >= 1"));
        }
        if self.tuning.rounds < 1 || self.tuning.evals_per_round < 1 {
            return Err(invalid("tuning", "rounds and evals_per_round must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.tuning.nudge_fraction) {
            return Err(invalid("tuning.nudge_fraction", "must be within [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.thresholds.min_band_fraction) {
            return Err(invalid("thresholds.min_band_fraction", "must be within [0, 1]"));
        }
        let o = &self.objective;
        if ![o.w_dist, o.w_coll, o.w_loss].iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(invalid("objective", "weights must be finite and >= 0"));
        }
        if self.backend.max_tokens < 1 {
            return Err(invalid("backend.max_tokens", "must be >= 1"));
        }
        if !(self.backend.temperature.is_finite() && self.backend.temperature >= 0.0) {
            return Err(invalid("backend.temperature", "must be >= 0"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: SessionConfig = toml::from_str(text).map_err(|e| ConfigError::Format(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), detail: e.to_string() })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.scenario_suite != "builtin" && Path::new(&config.scenario_suite).is_relative() {
            config.scenario_suite = base.join(&config.scenario_suite).display().to_string();
        }
        if let Some(dir) = config.templates_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(config)
    }

    /// The configured scenarios as written.
    pub fn load_scenarios(&self) -> Result<Vec<Scenario>, ConfigError> {
        let scenarios = if self.scenario_suite == "builtin" {
            builtin_suite()
        } else {
            let path = Path::new(&self.scenario_suite);
            if path.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                    .map_err(|e| ConfigError::Io { path: path.display().to_string(), detail: e.to_string() })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                    .collect();
                files.sort();
                files.iter().map(|f| Scenario::load(f)).collect::<Result<Vec<_>, _>>()?
            } else {
                vec![Scenario::load(path)?]
            }
        };
        if scenarios.is_empty() {
            return Err(invalid("scenario_suite", "suite has no scenarios"));
        }
        Ok(scenarios)
    }

    /// The configured scenarios with the robot limits of `spec` applied.
    pub fn load_suite(&self, spec: &TaskSpec) -> Result<Vec<Scenario>, ConfigError> {
        let r = &spec.robot_params;
        let limits = RobotLimits { radius: r.robot_radius, v_max: r.max_linear_speed, w_max: r.max_angular_speed };
        Ok(self.load_scenarios()?.iter().map(|s| s.with_robot(limits, r.sensor_range)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = SessionConfig::from_toml("k_adjust = 2\n[tuning]\nrounds = 4\n[backend]\nmodel = \"m\"\n").unwrap();
        assert_eq!(c.k_adjust, 2);
        assert_eq!(c.k_replan, 2);
        assert_eq!(c.tuning.rounds, 4);
        assert_eq!(c.tuning.evals_per_round, 40);
        assert_eq!(c.backend.model, "m");
        assert_eq!(c.backend.temperature, 0.0);
        assert_eq!(c.backend.http().max_retries, 2);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(SessionConfig::from_toml("k_adjust = 0"), Err(ConfigError::Invalid { .. })));
        assert!(matches!(SessionConfig::from_toml("bogus = 1"), Err(ConfigError::Format(_))));
        assert!(SessionConfig::from_toml("[tuning]\nnudge_fraction = 2.0").is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "scenario_suite = \"scen\"\ntemplates_dir = \"tpl\"\n").unwrap();
        let c = SessionConfig::load(&path).unwrap();
        assert_eq!(Path::new(&c.scenario_suite), dir.path().join("scen"));
        assert_eq!(c.templates_dir.unwrap(), dir.path().join("tpl"));
    }
}
