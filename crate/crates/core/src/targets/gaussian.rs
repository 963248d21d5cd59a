use std::f64::consts::{E, PI};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{AnalyticStats, ParamReader, Target, TargetParams};
use crate::{Error, Result};

/// Multivariate Gaussian, `log π*(z) = −½ (z − μ)ᵀ P (z − μ)` with precision
/// `P = Σ⁻¹`. The log-determinant term is dropped.
#[derive(Debug, Clone)]
pub struct Gaussian {
    name: String,
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det_cov: f64,
}

impl Gaussian {
    pub fn new(name: impl Into<String>, mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::param("cov", format!("must be {d}x{d}")));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::param("cov", "must be symmetric"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::param("cov", "must be positive definite"))?;
        let log_det_cov = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let precision = chol.inverse();
        let precision = 0.5 * (&precision + precision.transpose());
        Ok(Self {
            name: name.into(),
            mean,
            cov,
            precision,
            log_det_cov,
        })
    }

    pub fn std_normal(dim: usize) -> Self {
        Self::new("std_normal", vec![0.0; dim], DMatrix::identity(dim, dim))
            .expect("identity covariance is valid")
    }

    /// Equicorrelated covariance `(1 − ρ) I + ρ 11ᵀ`.
    pub fn correlated(dim: usize, rho: f64, mean: Vec<f64>) -> Result<Self> {
        let cov = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho });
        Self::new("correlated_gaussian", mean, cov)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    fn centered(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(z.len(), z.iter().zip(&self.mean).map(|(a, b)| a - b))
    }
}

impl Target for Gaussian {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let x = self.centered(z);
        -0.5 * x.dot(&(&self.precision * &x))
    }

    fn grad_log_density(&self, z: &[f64], out: &mut [f64]) {
        let g = -(&self.precision * self.centered(z));
        out.copy_from_slice(g.as_slice());
    }

    fn hvp_log_density(&self, _z: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        let hv = -(&self.precision * DVector::from_column_slice(v));
        out.copy_from_slice(hv.as_slice());
        true
    }

    fn analytic_stats(&self) -> Option<AnalyticStats> {
        let d = self.dim();
        Some(AnalyticStats {
            mean: Some(self.mean.clone()),
            cov: Some(
                (0..d)
                    .map(|i| (0..d).map(|j| self.cov[(i, j)]).collect())
                    .collect(),
            ),
            expected_logp: Some(-0.5 * d as f64),
            entropy: Some(0.5 * (d as f64 * (2.0 * PI * E).ln() + self.log_det_cov)),
            gaussian: true,
        })
    }
}

fn mean_or_zeros(r: &ParamReader, dim: usize) -> Result<Vec<f64>> {
    match r.array("mean")? {
        None => Ok(vec![0.0; dim]),
        Some(m) if m.len() == dim => Ok(m),
        Some(m) => Err(Error::param(
            "mean",
            format!("has length {}, expected {dim}", m.len()),
        )),
    }
}

pub(super) fn build_std_normal(p: &TargetParams) -> Result<Arc<dyn Target>> {
    let dim = ParamReader::new(p).dim("dim", 2)?;
    Ok(Arc::new(Gaussian::std_normal(dim)))
}

pub(super) fn build_diag(p: &TargetParams) -> Result<Arc<dyn Target>> {
    let r = ParamReader::new(p);
    let std = r
        .array("std")?
        .ok_or_else(|| Error::param("std", "required"))?;
    if std.iter().any(|s| *s <= 0.0) {
        return Err(Error::param("std", "entries must be positive"));
    }
    let mean = mean_or_zeros(&r, std.len())?;
    let cov = DMatrix::from_diagonal(&DVector::from_iterator(
        std.len(),
        std.iter().map(|s| s * s),
    ));
    Ok(Arc::new(Gaussian::new("diag_gaussian", mean, cov)?))
}

pub(super) fn build_correlated(p: &TargetParams) -> Result<Arc<dyn Target>> {
    let r = ParamReader::new(p);
    let dim = r.dim("dim", 2)?;
    let rho = r.scalar("rho", 0.9)?;
    let lower = -1.0 / (dim as f64 - 1.0).max(1.0);
    if !(rho > lower && rho < 1.0) {
        return Err(Error::param("rho", format!("must lie in ({lower}, 1)")));
    }
    let mean = mean_or_zeros(&r, dim)?;
    Ok(Arc::new(Gaussian::correlated(dim, rho, mean)?))
}

pub(super) fn build_full(p: &TargetParams) -> Result<Arc<dyn Target>> {
    let r = ParamReader::new(p);
    let mean = r
        .array("mean")?
        .ok_or_else(|| Error::param("mean", "required"))?;
    let d = mean.len();
    let cov = r
        .array("cov")?
        .ok_or_else(|| Error::param("cov", "required"))?;
    if cov.len() != d * d {
        return Err(Error::param("cov", format!("needs {} entries", d * d)));
    }
    Ok(Arc::new(Gaussian::new(
        "gaussian",
        mean,
        DMatrix::from_row_slice(d, d, &cov),
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{grad_logp, hvp_logp, logp_unnorm};

    #[test]
    fn std_normal_values() {
        let t = Gaussian::std_normal(2);
        assert_eq!(logp_unnorm(&t, &[0.0, 0.0]).unwrap(), 0.0);
        assert!((logp_unnorm(&t, &[1.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(grad_logp(&t, &[1.0, -2.0]).unwrap(), vec![-1.0, 2.0]);
        let h = hvp_logp(&t, &[0.3, 0.4], &[1.0, 0.0]).unwrap();
        assert_eq!(h.value, vec![-1.0, 0.0]);
        assert_eq!(
            hvp_logp(&t, &[0.3, 0.4], &[0.0, 0.0]).unwrap().value,
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn std_normal_stats() {
        let s = Gaussian::std_normal(2).analytic_stats().unwrap();
        assert_eq!(s.mean.unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.cov.unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(s.expected_logp, Some(-1.0));
        assert!((s.entropy.unwrap() - (2.0 * PI * E).ln()).abs() < 1e-12);
    }

    #[test]
    fn scaled_gaussian_keeps_standardized_expectation() {
        let t = Gaussian::new("g", vec![0.0; 2], DMatrix::identity(2, 2) * 4.0).unwrap();
        assert_eq!(t.analytic_stats().unwrap().expected_logp, Some(-1.0));
    }

    #[test]
    fn correlated_gradient_is_minus_precision_times_z() {
        let t = Gaussian::correlated(2, 0.9, vec![0.0, 0.0]).unwrap();
        // P = 1/(1 − ρ²) [[1, −ρ], [−ρ, 1]]
        let s = 1.0 / (1.0 - 0.81);
        let z = [0.5, -1.5];
        let want = [-s * (z[0] - 0.9 * z[1]), -s * (-0.9 * z[0] + z[1])];
        let g = grad_logp(&t, &z).unwrap();
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Gaussian::new("g", vec![0.0; 2], cov).is_err());
    }
}
