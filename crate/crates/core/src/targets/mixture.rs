use std::sync::Arc;

use super::{AnalyticStats, ParamReader, Target, TargetParams};
use crate::Result;

/// Equal-weight mixture of two isotropic Gaussians centred at `±offset·1`.
///
/// `log π*(z) = log Σ_k exp(−‖z − m_k‖² / 2σ²)`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    modes: [Vec<f64>; 2],
    std: f64,
}

impl GaussianMixture {
    pub fn new(dim: usize, offset: f64, std: f64) -> Self {
        Self {
            modes: [vec![offset; dim], vec![-offset; dim]],
            std,
        }
    }

    /// Component log-weights (unnormalized) and per-component gradients.
    fn components(&self, z: &[f64]) -> ([f64; 2], [Vec<f64>; 2]) {
        let s2 = self.std * self.std;
        let mut logw = [0.0; 2];
        let mut grads: [Vec<f64>; 2] = [vec![0.0; z.len()], vec![0.0; z.len()]];
        for k in 0..2 {
            let mut sq = 0.0;
            for (i, (zi, mi)) in z.iter().zip(&self.modes[k]).enumerate() {
                let d = zi - mi;
                sq += d * d;
                grads[k][i] = -d / s2;
            }
            logw[k] = -0.5 * sq / s2;
        }
        (logw, grads)
    }

    fn responsibilities(logw: [f64; 2]) -> [f64; 2] {
        let m = logw[0].max(logw[1]);
        let a = (logw[0] - m).exp();
        let b = (logw[1] - m).exp();
        [a / (a + b), b / (a + b)]
    }
}

impl Target for GaussianMixture {
    fn name(&self) -> &str {
        "mixture"
    }

    fn dim(&self) -> usize {
        self.modes[0].len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let (logw, _) = self.components(z);
        let m = logw[0].max(logw[1]);
        m + ((logw[0] - m).exp() + (logw[1] - m).exp()).ln()
    }

    fn grad_log_density(&self, z: &[f64], out: &mut [f64]) {
        let (logw, grads) = self.components(z);
        let w = Self::responsibilities(logw);
        for (i, o) in out.iter_mut().enumerate() {
            *o = w[0] * grads[0][i] + w[1] * grads[1][i];
        }
    }

    fn hvp_log_density(&self, z: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        // ∇² = −I/σ² + Σ w_k g_k g_kᵀ − ḡ ḡᵀ
        let (logw, grads) = self.components(z);
        let w = Self::responsibilities(logw);
        let s2 = self.std * self.std;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let gbar: Vec<f64> = (0..z.len())
            .map(|i| w[0] * grads[0][i] + w[1] * grads[1][i])
            .collect();
        let c0 = w[0] * dot(&grads[0], v);
        let c1 = w[1] * dot(&grads[1], v);
        let cbar = dot(&gbar, v);
        for i in 0..z.len() {
            out[i] = -v[i] / s2 + c0 * grads[0][i] + c1 * grads[1][i] - cbar * gbar[i];
        }
        true
    }

    fn analytic_stats(&self) -> Option<AnalyticStats> {
        let d = self.dim();
        let s2 = self.std * self.std;
        let m = &self.modes[0];
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| m[i] * m[j] + if i == j { s2 } else { 0.0 })
                    .collect()
            })
            .collect();
        Some(AnalyticStats {
            mean: Some(vec![0.0; d]),
            cov: Some(cov),
            expected_logp: None,
            entropy: None,
            gaussian: false,
        })
    }
}

pub(super) fn build(p: &TargetParams) -> Result<Arc<dyn Target>> {
    let r = ParamReader::new(p);
    Ok(Arc::new(GaussianMixture::new(
        r.dim("dim", 2)?,
        r.scalar("offset", 2.0)?,
        r.positive("std", 1.0)?,
    )))
}
