//! Experiment configuration files (TOML, strict).

use std::path::{Path, PathBuf};

use ergodic_core::baselines::HmcConfig;
use ergodic_core::methods::ModelSpec;
use ergodic_core::optimize::TrainConfig;
use ergodic_core::targets::TargetParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Config schema version understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub target: TargetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    #[serde(default)]
    pub baselines: BaselinesConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub name: String,
    #[serde(default)]
    pub params: TargetParams,
}

/// Model section as written; integers are signed so that negative values
/// reach validation and are reported by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: i64,
    pub leaps: i64,
    pub init_step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_log_std: Option<Vec<f64>>,
    pub trainable_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            depth: s.depth as i64,
            leaps: s.leaps as i64,
            init_step: s.init_step,
            init_mean: None,
            init_log_std: None,
            trainable_init: s.trainable_init,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec, CliError> {
        let depth = usize::try_from(self.depth)
            .map_err(|_| CliError::config_key("model.depth", "must be a non-negative integer"))?;
        let leaps = usize::try_from(self.leaps)
            .ok()
            .filter(|&l| l > 0)
            .ok_or_else(|| CliError::config_key("model.leaps", "must be a positive integer"))?;
        if !(self.init_step > 0.0 && self.init_step.is_finite()) {
            return Err(CliError::config_key("model.init_step", "must be positive"));
        }
        Ok(ModelSpec {
            depth,
            leaps,
            init_step: self.init_step,
            init_mean: self.init_mean.clone(),
            init_log_std: self.init_log_std.clone(),
            trainable_init: self.trainable_init,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Samples pushed through the trained model for diagnostics.
    pub n_eval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthConfig>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            n_eval: 10_000,
            ground_truth: None,
        }
    }
}

/// Reference sampler for the MMD comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub method: String,
    #[serde(default = "default_ground_truth_n")]
    pub n: usize,
    #[serde(default)]
    pub params: HmcConfig,
}

fn default_ground_truth_n() -> usize {
    2000
}

/// Acceptance thresholds; each present entry is checked, absent ones are
/// skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_logp_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lag1_autocorr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmd_below_null: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesConfig {
    /// Baselines run alongside `run`: any of `vi`, `hmc`, `amcmc`.
    pub methods: Vec<String>,
    /// Samples drawn from each baseline.
    pub n: usize,
    pub hmc: HmcConfig,
    pub amcmc: AmcmcConfig,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            methods: vec![],
            n: 10_000,
            hmc: HmcConfig::default(),
            amcmc: AmcmcConfig::default(),
        }
    }
}

/// HMC whose step is chosen from `grid` by expected squared jump distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmcmcConfig {
    pub grid: Vec<f64>,
    pub leaps: usize,
    pub n_pilot: usize,
    pub burn_in: usize,
}

impl Default for AmcmcConfig {
    fn default() -> Self {
        Self {
            grid: (1..=12).map(|k| 0.05 * k as f64).collect(),
            leaps: 5,
            n_pilot: 5000,
            burn_in: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config {
            message: e.message().to_string(),
            key: None,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            message: format!("cannot read {}: {e}", path.display()),
            key: None,
        })?;
        Self::parse(&text)
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config_key(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        self.model.spec()?;
        self.train
            .validate()
            .map_err(|e| CliError::from_core_config(e, "train"))?;
        if self.diagnostics.n_eval < 2 {
            return Err(CliError::config_key(
                "diagnostics.n_eval",
                "must be at least 2",
            ));
        }
        if let Some(gt) = &self.diagnostics.ground_truth {
            if gt.n < 2 {
                return Err(CliError::config_key(
                    "diagnostics.ground_truth.n",
                    "must be at least 2",
                ));
            }
        }
        for m in &self.baselines.methods {
            if !["vi", "hmc", "amcmc"].contains(&m.as_str()) {
                return Err(CliError::config_key(
                    "baselines.methods",
                    format!("unknown baseline `{m}` (expected vi, hmc or amcmc)"),
                ));
            }
        }
        if self.baselines.amcmc.grid.is_empty()
            || self.baselines.amcmc.grid.iter().any(|s| !(*s > 0.0))
        {
            return Err(CliError::config_key(
                "baselines.amcmc.grid",
                "must hold positive steps",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("../../../docs/config.md");
        let body = doc
            .split("```toml")
            .nth(1)
            .and_then(|rest| rest.split("```").next())
            .expect("schema document holds a toml block");
        let cfg = ExperimentConfig::parse(body).unwrap();
        assert_eq!(cfg.model.depth, 8);
        assert_eq!(
            cfg.train.schedule,
            ergodic_core::optimize::LrSchedule::Constant
        );
    }

    const MINIMAL: &str = r#"
schema_version = 1
[target]
name = "std_normal"
params = { dim = 2 }
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(cfg.thresholds.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[model]\ndepht = 3\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("depht"), "{err}");
        let text = format!("{MINIMAL}\nextra = 1\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn negative_depth_names_the_key() {
        let text = format!("{MINIMAL}\n[model]\ndepth = -3\n");
        match ExperimentConfig::parse(&text).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key.as_deref(), Some("model.depth")),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn small_batch_names_the_key() {
        let text = format!("{MINIMAL}\n[train]\nbatch_size = 4\n");
        match ExperimentConfig::parse(&text).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key.as_deref(), Some("train.batch_size")),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 2);
    }
}
