//! Target distributions.
//!
//! A target is an unnormalized log-density `log π*` with its gradient and,
//! where available, an analytic Hessian-vector product and reference
//! moments. Normalizing constants are never needed downstream.
//!
//! Built-in targets are registered by name in [`TargetRegistry`]:
//!
//! | name                  | keys (defaults)                         |
//! |-----------------------|-----------------------------------------|
//! | `std_normal`          | `dim` (2)                               |
//! | `diag_gaussian`       | `mean` (zeros), `std` (required)        |
//! | `correlated_gaussian` | `dim` (2), `rho` (0.9), `mean` (zeros)  |
//! | `gaussian`            | `mean`, `cov` (row-major, required)     |
//! | `mixture`             | `dim` (2), `offset` (2.0), `std` (1.0)  |
//! | `banana`              | `b` (0.1), `scale` (10.0)               |
//! | `funnel`              | `dim` (2), `scale` (3.0)                |

mod banana;
mod funnel;
mod gaussian;
mod mixture;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use banana::Banana;
pub use funnel::Funnel;
pub use gaussian::Gaussian;
pub use mixture::GaussianMixture;

/// Reference statistics of a target, each optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticStats {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    /// `E_π[log π*]` for the unnormalized form the target evaluates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_logp: Option<f64>,
    /// Differential entropy `H(π)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    /// True when the target is exactly Gaussian with `mean` and `cov`, which
    /// makes every 1D projection's CDF available.
    #[serde(default)]
    pub gaussian: bool,
}

/// An unnormalized target density.
///
/// The unchecked methods are the hot path; callers guarantee `z.len() ==
/// dim()`. Use [`logp_unnorm`], [`grad_logp`] and [`hvp_logp`] for validated
/// access.
pub trait Target: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// `log π*(z)`.
    fn log_density(&self, z: &[f64]) -> f64;

    /// Writes `∇ log π*(z)` into `out`.
    fn grad_log_density(&self, z: &[f64], out: &mut [f64]);

    /// Writes `∇² log π*(z) · v` into `out` and returns true, or returns false
    /// when no analytic form exists.
    fn hvp_log_density(&self, _z: &[f64], _v: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    fn analytic_stats(&self) -> Option<AnalyticStats> {
        None
    }
}

/// Hessian-vector product and whether it came from finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct Hvp {
    pub value: Vec<f64>,
    pub approximate: bool,
}

fn check_point(target: &dyn Target, z: &[f64]) -> Result<()> {
    if z.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: z.len(),
        });
    }
    if let Some(index) = z.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// Validated `log π*(z)`.
pub fn logp_unnorm(target: &dyn Target, z: &[f64]) -> Result<f64> {
    check_point(target, z)?;
    Ok(target.log_density(z))
}

/// Validated `∇ log π*(z)`.
pub fn grad_logp(target: &dyn Target, z: &[f64]) -> Result<Vec<f64>> {
    check_point(target, z)?;
    let mut out = vec![0.0; z.len()];
    target.grad_log_density(z, &mut out);
    Ok(out)
}

/// Validated Hessian-vector product with automatic finite-difference
/// fallback.
pub fn hvp_logp(target: &dyn Target, z: &[f64], v: &[f64]) -> Result<Hvp> {
    check_point(target, z)?;
    check_point(target, v)?;
    let mut out = vec![0.0; z.len()];
    let analytic = hvp_into(target, z, v, &mut out);
    Ok(Hvp {
        value: out,
        approximate: !analytic,
    })
}

/// Unchecked Hessian-vector product; returns false when finite differences
/// were used.
///
/// The fallback is a central difference of the gradient along `v` with step
/// `cbrt(ε_machine)·(1 + ‖z‖∞)`, taken along `v / ‖v‖∞` and rescaled.
pub(crate) fn hvp_into(target: &dyn Target, z: &[f64], v: &[f64], out: &mut [f64]) -> bool {
    if target.hvp_log_density(z, v, out) {
        return true;
    }
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if vmax == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let zmax = z.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let h = f64::EPSILON.cbrt() * (1.0 + zmax);
    let d = z.len();
    let mut plus = z.to_vec();
    let mut minus = z.to_vec();
    for i in 0..d {
        plus[i] += h * v[i] / vmax;
        minus[i] -= h * v[i] / vmax;
    }
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    target.grad_log_density(&plus, &mut gp);
    target.grad_log_density(&minus, &mut gm);
    for i in 0..d {
        out[i] = (gp[i] - gm[i]) / (2.0 * h) * vmax;
    }
    false
}

/// Registered analytic statistics, if any.
pub fn analytic_stats(target: &dyn Target) -> Option<AnalyticStats> {
    target.analytic_stats()
}

/// A scalar or array parameter value as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Array(Vec<f64>),
}

/// Named target parameters, e.g. `{ dim = 2, rho = 0.9 }`.
pub type TargetParams = BTreeMap<String, ParamValue>;

/// Typed access to [`TargetParams`] for target factories.
pub struct ParamReader<'a> {
    params: &'a TargetParams,
}

impl<'a> ParamReader<'a> {
    pub fn new(params: &'a TargetParams) -> Self {
        Self { params }
    }

    pub fn scalar(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(ParamValue::Scalar(x)) if x.is_finite() => Ok(*x),
            Some(ParamValue::Scalar(_)) => Err(Error::param(key, "must be finite")),
            Some(ParamValue::Array(_)) => Err(Error::param(key, "expected a scalar")),
        }
    }

    pub fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let x = self.scalar(key, default)?;
        if x > 0.0 {
            Ok(x)
        } else {
            Err(Error::param(key, "must be positive"))
        }
    }

    pub fn dim(&self, key: &str, default: usize) -> Result<usize> {
        let x = self.scalar(key, default as f64)?;
        if x >= 1.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::param(key, "must be a positive integer"))
        }
    }

    pub fn array(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.params.get(key) {
            None => Ok(None),
            Some(ParamValue::Array(v)) if v.iter().all(|x| x.is_finite()) => Ok(Some(v.clone())),
            Some(ParamValue::Array(_)) => Err(Error::param(key, "entries must be finite")),
            Some(ParamValue::Scalar(x)) => Ok(Some(vec![*x])),
        }
    }
}

/// Builds a target from its parameters.
pub type TargetFactory = fn(&TargetParams) -> Result<Arc<dyn Target>>;

struct Entry {
    keys: &'static [&'static str],
    factory: TargetFactory,
}

/// Name-keyed collection of target constructors.
pub struct TargetRegistry {
    entries: IndexMap<String, Entry>,
}

impl TargetRegistry {
    pub fn empty() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Registry holding the built-in battery.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("std_normal", &["dim"], gaussian::build_std_normal);
        reg.register("diag_gaussian", &["mean", "std"], gaussian::build_diag);
        reg.register(
            "correlated_gaussian",
            &["dim", "rho", "mean"],
            gaussian::build_correlated,
        );
        reg.register("gaussian", &["mean", "cov"], gaussian::build_full);
        reg.register("mixture", &["dim", "offset", "std"], mixture::build);
        reg.register("banana", &["b", "scale"], banana::build);
        reg.register("funnel", &["dim", "scale"], funnel::build);
        reg
    }

    /// Adds or replaces a target constructor. `keys` is the accepted
    /// parameter set; anything else is rejected by [`build`](Self::build).
    pub fn register(&mut self, name: &str, keys: &'static [&'static str], factory: TargetFactory) {
        self.entries
            .insert(name.to_string(), Entry { keys, factory });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn keys(&self, name: &str) -> Option<&'static [&'static str]> {
        self.entries.get(name).map(|e| e.keys)
    }

    pub fn build(&self, name: &str, params: &TargetParams) -> Result<Arc<dyn Target>> {
        let entry = self.entries.get(name).ok_or_else(|| Error::Unknown {
            kind: "target",
            name: name.to_string(),
        })?;
        if let Some(bad) = params.keys().find(|k| !entry.keys.contains(&k.as_str())) {
            return Err(Error::param(
                bad.clone(),
                format!("not a parameter of `{name}` (accepted: {:?})", entry.keys),
            ));
        }
        (entry.factory)(params)
    }
}

impl Default for TargetRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Entropy of a diagonal Gaussian with the given log standard deviations.
pub fn diag_gaussian_entropy(log_std: &[f64]) -> f64 {
    let d = log_std.len() as f64;
    0.5 * d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_std.iter().sum::<f64>()
}
