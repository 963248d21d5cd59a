//! Versioned JSON run reports.

use std::path::Path;

use ergodic_core::baselines::{ElboRecord, EsjdTuning, MeanFieldQ};
use ergodic_core::checks::CheckOutcome;
use ergodic_core::dein::ModelSnapshot;
use ergodic_core::diagnostics::DiagnosticsReport;
use ergodic_core::loss::PreconditionReport;
use ergodic_core::optimize::{IterRecord, SweepEntry};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Thresholds};
use crate::error::CliError;

/// File layout: everything lives under the top-level `report` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precondition: Option<PreconditionReport>,
    #[serde(default)]
    pub precondition_overridden: bool,
    #[serde(default)]
    pub trace: Vec<IterRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<ModelSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<ThresholdOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<BaselineResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckOutcome>,
    pub environment: Environment,
}

impl RunReport {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            schema_version: crate::config::SCHEMA_VERSION,
            command: command.to_string(),
            config: None,
            precondition: None,
            precondition_overridden: false,
            trace: vec![],
            parameters: None,
            diagnostics: None,
            ground_truth: None,
            thresholds: None,
            baselines: vec![],
            sweep: vec![],
            checks: vec![],
            environment: Environment::stamp(seed),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ReportFile {
            report: self.clone(),
        })
        .expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<ReportFile>(text).map(|f| f.report)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            message: format!("cannot read {}: {e}", path.display()),
            key: None,
        })?;
        Self::from_json(&text).map_err(|e| CliError::Config {
            message: format!("{} is not a run report: {e}", path.display()),
            key: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub tool_version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl Environment {
    pub fn stamp(seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSummary {
    pub method: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOutcome {
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Checks every present threshold; a threshold whose diagnostic was not
/// computed fails.
pub fn evaluate_thresholds(t: &Thresholds, d: &DiagnosticsReport) -> ThresholdOutcome {
    let mut failures = vec![];
    let mut upper = |name: &str, limit: Option<f64>, value: Option<f64>| {
        if let Some(limit) = limit {
            match value {
                Some(v) if v.abs() < limit => {}
                Some(v) => failures.push(format!("{name} = {v:.4} (limit {limit})")),
                None => failures.push(format!("{name} not computed")),
            }
        }
    };
    upper("mean_error", t.mean_error, d.mean_error);
    upper("cov_error", t.cov_error, d.cov_error);
    upper(
        "expected_logp_gap",
        t.expected_logp_gap,
        d.expected_logp_gap,
    );
    upper("lag1_autocorr", t.lag1_autocorr, d.lag1_autocorr);
    if t.mmd_below_null == Some(true) {
        match (d.mmd2, d.mmd2_null_q99) {
            (Some(m), Some(q)) if m < q => {}
            (Some(m), Some(q)) => {
                failures.push(format!("mmd2 = {m:.3e} not below null q99 {q:.3e}"))
            }
            _ => failures.push("mmd2 not computed".into()),
        }
    }
    ThresholdOutcome {
        passed: failures.is_empty(),
        failures,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: String,
    pub diagnostics: DiagnosticsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_acceptance: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<EsjdTuning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<MeanFieldQ>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub elbo_trace: Vec<ElboRecord>,
}
