use std::f64::consts::{E, PI};
use std::sync::Arc;

use super::{AnalyticStats, ParamReader, Target, TargetParams};
use crate::{Error, Result};

/// Neal's funnel: `v ~ N(0, σ²)`, `x_i | v ~ N(0, e^v)` for the remaining
/// `dim − 1` coordinates, with `v = z₀`.
///
/// `log π*(z) = −v²/2σ² − ½ e^{−v} Σ x_i² − (dim − 1) v / 2`
#[derive(Debug, Clone)]
pub struct Funnel {
    dim: usize,
    scale: f64,
}

impl Funnel {
    pub fn new(dim: usize, scale: f64) -> Self {
        Self { dim, scale }
    }
}

impl Target for Funnel {
    fn name(&self) -> &str {
        "funnel"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let v = z[0];
        let sq: f64 = z[1..].iter().map(|x| x * x).sum();
        let k = (self.dim - 1) as f64;
        -0.5 * v * v / (self.scale * self.scale) - 0.5 * sq * (-v).exp() - 0.5 * k * v
    }

    fn grad_log_density(&self, z: &[f64], out: &mut [f64]) {
        let v = z[0];
        let ev = (-v).exp();
        let sq: f64 = z[1..].iter().map(|x| x * x).sum();
        let k = (self.dim - 1) as f64;
        out[0] = -v / (self.scale * self.scale) + 0.5 * sq * ev - 0.5 * k;
        for i in 1..self.dim {
            out[i] = -z[i] * ev;
        }
    }

    fn hvp_log_density(&self, z: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        let ev = (-z[0]).exp();
        let sq: f64 = z[1..].iter().map(|x| x * x).sum();
        let cross: f64 = z[1..].iter().zip(&v[1..]).map(|(x, w)| x * w).sum();
        out[0] = (-1.0 / (self.scale * self.scale) - 0.5 * sq * ev) * v[0] + ev * cross;
        for i in 1..self.dim {
            out[i] = ev * z[i] * v[0] - ev * v[i];
        }
        true
    }

    fn analytic_stats(&self) -> Option<AnalyticStats> {
        let d = self.dim;
        let s2 = self.scale * self.scale;
        // Var x_i = E[e^v] = e^{σ²/2}
        let vx = (0.5 * s2).exp();
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| match (i, j) {
                        (0, 0) => s2,
                        (a, b) if a == b => vx,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        Some(AnalyticStats {
            mean: Some(vec![0.0; d]),
            cov: Some(cov),
            expected_logp: Some(-0.5 * d as f64),
            entropy: Some(0.5 * d as f64 * (2.0 * PI * E).ln() + 0.5 * s2.ln()),
            gaussian: false,
        })
    }
}

pub(super) fn build(p: &TargetParams) -> Result<Arc<dyn Target>> {
    let r = ParamReader::new(p);
    let dim = r.dim("dim", 2)?;
    if dim < 2 {
        return Err(Error::param("dim", "funnel needs at least 2 dimensions"));
    }
    Ok(Arc::new(Funnel::new(dim, r.positive("scale", 3.0)?)))
}
