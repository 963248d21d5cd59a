use std::f64::consts::{E, PI};
use std::sync::Arc;

use super::{AnalyticStats, ParamReader, Target, TargetParams};
use crate::Result;

/// Twisted Gaussian ("banana").
///
/// With `c = scale²` and `s = z₂ + b (z₁² − c)`:
///
/// `log π*(z) = −z₁² / 2c − s² / 2`
///
/// It is the image of `N(0, diag(c, 1))` under the unit-Jacobian shear
/// `(y₁, y₂) ↦ (y₁, y₂ − b (y₁² − c))`, so its moments and entropy are closed
/// form: mean 0, `Var z₁ = c`, `Var z₂ = 1 + 2 b² c²`, zero covariance.
#[derive(Debug, Clone)]
pub struct Banana {
    b: f64,
    c: f64,
}

impl Banana {
    pub fn new(b: f64, scale: f64) -> Self {
        Self {
            b,
            c: scale * scale,
        }
    }

    fn twist(&self, z: &[f64]) -> f64 {
        z[1] + self.b * (z[0] * z[0] - self.c)
    }
}

impl Target for Banana {
    fn name(&self) -> &str {
        "banana"
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let s = self.twist(z);
        -0.5 * z[0] * z[0] / self.c - 0.5 * s * s
    }

    fn grad_log_density(&self, z: &[f64], out: &mut [f64]) {
        let s = self.twist(z);
        out[0] = -z[0] / self.c - 2.0 * self.b * z[0] * s;
        out[1] = -s;
    }

    fn hvp_log_density(&self, z: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        let s = self.twist(z);
        let bz = 2.0 * self.b * z[0];
        let h00 = -1.0 / self.c - bz * bz - 2.0 * self.b * s;
        let h01 = -bz;
        out[0] = h00 * v[0] + h01 * v[1];
        out[1] = h01 * v[0] - v[1];
        true
    }

    fn analytic_stats(&self) -> Option<AnalyticStats> {
        let var2 = 1.0 + 2.0 * self.b * self.b * self.c * self.c;
        Some(AnalyticStats {
            mean: Some(vec![0.0, 0.0]),
            cov: Some(vec![vec![self.c, 0.0], vec![0.0, var2]]),
            expected_logp: Some(-1.0),
            entropy: Some((2.0 * PI * E).ln() + 0.5 * self.c.ln()),
            gaussian: false,
        })
    }
}

pub(super) fn build(p: &TargetParams) -> Result<Arc<dyn Target>> {
    let r = ParamReader::new(p);
    Ok(Arc::new(Banana::new(
        r.scalar("b", 0.1)?,
        r.positive("scale", 10.0)?,
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_at_origin_by_substitution() {
        // s = 0 + 0.1·(0 − 100) = −10, so log π* = −(−10)²/2
        let t = Banana::new(0.1, 10.0);
        assert_eq!(t.log_density(&[0.0, 0.0]), -50.0);
    }

    #[test]
    fn untwisted_banana_is_gaussian() {
        let t = Banana::new(0.0, 2.0);
        assert_eq!(t.log_density(&[2.0, 1.0]), -1.0);
        assert_eq!(t.analytic_stats().unwrap().cov.unwrap()[1][1], 1.0);
    }
}
