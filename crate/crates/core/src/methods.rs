//! Inference methods behind a common trait, selected by name at runtime.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baselines::{hmc_sample, meanfield_vi_fit, ElboRecord, HmcConfig, MeanFieldQ};
use crate::dein::{push_forward, sample_noise, DeinModel, InitDist};
use crate::loss::PreconditionReport;
use crate::optimize::{train, IterRecord, TrainConfig};
use crate::targets::Target;
use crate::transforms::LeapfrogLayer;
use crate::{Error, Result};

/// Architecture of a DEIN stack of identical initial layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub depth: usize,
    pub leaps: usize,
    pub init_step: f64,
    /// Initial mean; zeros when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_mean: Option<Vec<f64>>,
    /// Initial log standard deviation; `ln 2` in every coordinate when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_log_std: Option<Vec<f64>>,
    pub trainable_init: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            depth: 8,
            leaps: 5,
            init_step: 0.1,
            init_mean: None,
            init_log_std: None,
            trainable_init: false,
        }
    }
}

impl ModelSpec {
    pub fn init(&self, dim: usize) -> Result<InitDist> {
        let mean = self.init_mean.clone().unwrap_or_else(|| vec![0.0; dim]);
        let log_std = self
            .init_log_std
            .clone()
            .unwrap_or_else(|| vec![2f64.ln(); dim]);
        for (key, v) in [("init_mean", &mean), ("init_log_std", &log_std)] {
            if v.len() != dim {
                return Err(Error::param(
                    key,
                    format!("has length {}, expected {dim}", v.len()),
                ));
            }
        }
        Ok(InitDist::new(mean, log_std, self.trainable_init))
    }

    pub fn build(&self, dim: usize) -> Result<DeinModel> {
        if self.leaps == 0 {
            return Err(Error::param("leaps", "must be at least 1"));
        }
        if !(self.init_step > 0.0 && self.init_step.is_finite()) {
            return Err(Error::param("init_step", "must be positive"));
        }
        DeinModel::new(
            self.init(dim)?,
            vec![LeapfrogLayer::new(dim, self.init_step, self.leaps); self.depth],
        )
    }
}

/// Everything a method may need; each method reads its own part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MethodSpec {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub hmc: HmcConfig,
}

/// Method-specific results accompanying the samples.
#[derive(Debug, Clone)]
pub enum MethodDetails {
    Dein {
        model: DeinModel,
        trace: Vec<IterRecord>,
        precondition: PreconditionReport,
        precondition_overridden: bool,
    },
    Hmc {
        acceptance_rate: f64,
        low_acceptance: bool,
    },
    Vi {
        q: MeanFieldQ,
        trace: Vec<ElboRecord>,
    },
}

#[derive(Debug, Clone)]
pub struct MethodOutput {
    /// One sample per row; NaN rows mark divergent DEIN trajectories.
    pub samples: Array2<f64>,
    pub details: MethodDetails,
}

pub trait InferenceMethod: Send + Sync {
    fn name(&self) -> &str;

    /// Fits (if needed) and draws `n` samples.
    fn run(&self, target: &dyn Target, n: usize, seed: u64) -> Result<MethodOutput>;
}

pub struct Dein {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl InferenceMethod for Dein {
    fn name(&self) -> &str {
        "dein"
    }

    fn run(&self, target: &dyn Target, n: usize, seed: u64) -> Result<MethodOutput> {
        let model = self.model.build(target.dim())?;
        let out = train(&model, target, &self.train)?;
        let noise = sample_noise(&out.model, n, seed);
        let samples = push_forward(&out.model, &noise, target, false)?.samples;
        Ok(MethodOutput {
            samples,
            details: MethodDetails::Dein {
                model: out.model,
                trace: out.trace,
                precondition: out.precondition,
                precondition_overridden: out.precondition_overridden,
            },
        })
    }
}

pub struct Hmc {
    pub config: HmcConfig,
}

impl InferenceMethod for Hmc {
    fn name(&self) -> &str {
        "hmc"
    }

    fn run(&self, target: &dyn Target, n: usize, seed: u64) -> Result<MethodOutput> {
        let cfg = HmcConfig {
            seed,
            ..self.config.clone()
        };
        let chain = hmc_sample(target, n, &cfg)?;
        Ok(MethodOutput {
            samples: chain.states,
            details: MethodDetails::Hmc {
                acceptance_rate: chain.acceptance_rate,
                low_acceptance: chain.low_acceptance,
            },
        })
    }
}

pub struct MeanFieldVi {
    pub init: ModelSpec,
    pub train: TrainConfig,
}

impl InferenceMethod for MeanFieldVi {
    fn name(&self) -> &str {
        "vi"
    }

    fn run(&self, target: &dyn Target, n: usize, seed: u64) -> Result<MethodOutput> {
        let init = self.init.init(target.dim())?;
        let q0 = MeanFieldQ::new(init.mean, init.log_std)?;
        let fit = meanfield_vi_fit(target, &q0, &self.train)?;
        let model = DeinModel::new(
            InitDist::new(fit.q.mean.clone(), fit.q.log_std.clone(), false),
            vec![],
        )?;
        let noise = sample_noise(&model, n, seed);
        let samples = push_forward(&model, &noise, target, false)?.samples;
        Ok(MethodOutput {
            samples,
            details: MethodDetails::Vi {
                q: fit.q,
                trace: fit.trace,
            },
        })
    }
}

pub type MethodFactory = fn(&MethodSpec) -> Box<dyn InferenceMethod>;

/// Name → method factory.
pub struct MethodRegistry {
    factories: BTreeMap<String, MethodFactory>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// `dein`, `hmc` and `vi`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("dein", |s| {
            Box::new(Dein {
                model: s.model.clone(),
                train: s.train.clone(),
            })
        });
        r.register("hmc", |s| {
            Box::new(Hmc {
                config: s.hmc.clone(),
            })
        });
        r.register("vi", |s| {
            Box::new(MeanFieldVi {
                init: s.model.clone(),
                train: s.train.clone(),
            })
        });
        r
    }

    pub fn register(&mut self, name: &str, factory: MethodFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, spec: &MethodSpec) -> Result<Box<dyn InferenceMethod>> {
        self.factories
            .get(name)
            .map(|f| f(spec))
            .ok_or_else(|| Error::Unknown {
                kind: "method",
                name: name.to_string(),
            })
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Gaussian;

    #[test]
    fn builtin_names_and_unknown() {
        let r = MethodRegistry::builtin();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["dein", "hmc", "vi"]);
        assert!(matches!(
            r.build("nuts", &MethodSpec::default()),
            Err(Error::Unknown { .. })
        ));
    }

    #[test]
    fn every_method_returns_requested_rows() {
        let t = Gaussian::std_normal(2);
        let spec = MethodSpec {
            model: ModelSpec {
                depth: 1,
                leaps: 2,
                ..ModelSpec::default()
            },
            train: TrainConfig {
                iterations: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            hmc: HmcConfig {
                burn_in: 10,
                ..HmcConfig::default()
            },
        };
        let r = MethodRegistry::builtin();
        for name in ["dein", "hmc", "vi"] {
            let m = r.build(name, &spec).unwrap();
            assert_eq!(m.name(), name);
            let out = m.run(&t, 20, 1).unwrap();
            assert_eq!(out.samples.dim(), (20, 2));
        }
    }

    #[test]
    fn model_spec_validation_names_the_key() {
        let spec = ModelSpec {
            init_mean: Some(vec![0.0; 3]),
            ..ModelSpec::default()
        };
        assert!(
            matches!(spec.build(2), Err(Error::InvalidParam { key, .. }) if key == "init_mean")
        );
        let spec = ModelSpec {
            leaps: 0,
            ..ModelSpec::default()
        };
        assert!(spec.build(2).is_err());
    }
}
