//! Ergodic transformations.
//!
//! A Markov transition is rewritten as an auxiliary draw followed by a
//! deterministic map of the joint state. Two such maps live here:
//!
//! * the leapfrog discretization of Hamiltonian dynamics with potential
//!   `U = −log π*` and kinetic energy `K(r) = ½ Σ rᵢ²/mᵢ`, together with its
//!   exact reverse-mode adjoint ([`leapfrog_vjp`]);
//! * the Metropolis-Hastings map on `(z, r, u)`, which swaps `z` and the
//!   proposal `r` when `u < p` ([`mh_transform`]).
//!
//! [`shear_transform`] and [`numerical_jacobian_logdet`] support the
//! volume-preservation checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::targets::{hvp_into, Target};
use crate::{Error, Result};

/// Parameters of one leapfrog transformation.
///
/// Step sizes and masses are stored as logs so both stay positive under
/// unconstrained updates. `leaps` is fixed. When `mh_correct` is set the
/// layer accepts its endpoint with the Metropolis-Hastings rule; such layers
/// are evaluation-only because the accept indicator has no gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeapfrogLayer {
    pub log_step: Vec<f64>,
    pub log_mass: Vec<f64>,
    pub leaps: usize,
    #[serde(default)]
    pub mh_correct: bool,
}

impl LeapfrogLayer {
    /// Layer with a uniform step size and unit mass.
    pub fn new(dim: usize, step: f64, leaps: usize) -> Self {
        Self {
            log_step: vec![step.ln(); dim],
            log_mass: vec![0.0; dim],
            leaps,
            mh_correct: false,
        }
    }

    pub fn with_mh_correction(mut self) -> Self {
        self.mh_correct = true;
        self
    }

    pub fn dim(&self) -> usize {
        self.log_step.len()
    }

    pub fn step(&self) -> Vec<f64> {
        self.log_step.iter().map(|x| x.exp()).collect()
    }

    pub fn mass(&self) -> Vec<f64> {
        self.log_mass.iter().map(|x| x.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.leaps == 0 {
            return Err(Error::Contract("leapfrog layer needs leaps >= 1".into()));
        }
        if self.log_mass.len() != self.log_step.len() {
            return Err(Error::DimensionMismatch {
                expected: self.log_step.len(),
                got: self.log_mass.len(),
            });
        }
        if self
            .log_step
            .iter()
            .chain(&self.log_mass)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Contract("layer parameters must be finite".into()));
        }
        Ok(())
    }

    /// Kinetic energy `½ Σ rᵢ²/mᵢ`.
    pub fn kinetic(&self, r: &[f64]) -> f64 {
        r.iter()
            .zip(&self.log_mass)
            .map(|(ri, lm)| 0.5 * ri * ri * (-lm).exp())
            .sum()
    }
}

/// Intermediates of one leapfrog trajectory, kept for the adjoint pass.
///
/// `positions[k]` is `z_k` (`k = 0..=L`), `momenta_half[k]` the momentum used
/// by the `k`-th drift, `momenta[k]` the synchronized full-step momentum at
/// `z_k`, and `grads[k] = ∇ log π*(z_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeapfrogTrace {
    pub positions: Vec<Vec<f64>>,
    pub momenta_half: Vec<Vec<f64>>,
    pub momenta: Vec<Vec<f64>>,
    pub grads: Vec<Vec<f64>>,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_dims(layer: &LeapfrogLayer, target: &dyn Target, vs: &[&[f64]]) -> Result<()> {
    layer.validate()?;
    let d = target.dim();
    if layer.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: layer.dim(),
        });
    }
    for v in vs {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Runs `L` leapfrog steps from `(z, r)`.
///
/// ```text
/// p₀      = r + (ε/2)∘∇log π*(z₀)
/// z_{k+1} = z_k + ε∘p_k/m
/// p_{k+1} = p_k + ε∘∇log π*(z_{k+1})        (k < L−1)
/// r'      = p_{L−1} + (ε/2)∘∇log π*(z_L)
/// ```
///
/// Returns `(z', r', trace)`; a non-finite state aborts with
/// [`Error::Divergence`] carrying the step index.
pub fn leapfrog_forward(
    z: &[f64],
    r: &[f64],
    layer: &LeapfrogLayer,
    target: &dyn Target,
) -> Result<(Vec<f64>, Vec<f64>, LeapfrogTrace)> {
    check_dims(layer, target, &[z, r])?;
    let d = z.len();
    let eps = layer.step();
    let inv_mass: Vec<f64> = layer.log_mass.iter().map(|x| (-x).exp()).collect();
    let l = layer.leaps;

    let mut positions = Vec::with_capacity(l + 1);
    let mut momenta_half = Vec::with_capacity(l);
    let mut momenta = Vec::with_capacity(l + 1);
    let mut grads = Vec::with_capacity(l + 1);

    let mut zk = z.to_vec();
    let mut g = vec![0.0; d];
    target.grad_log_density(&zk, &mut g);
    if !all_finite(&g) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut p: Vec<f64> = (0..d).map(|i| r[i] + 0.5 * eps[i] * g[i]).collect();
    positions.push(zk.clone());
    momenta.push(r.to_vec());
    grads.push(g.clone());

    for k in 0..l {
        for i in 0..d {
            zk[i] += eps[i] * p[i] * inv_mass[i];
        }
        momenta_half.push(p.clone());
        target.grad_log_density(&zk, &mut g);
        if !all_finite(&zk) || !all_finite(&g) {
            return Err(Error::Divergence { step: k + 1 });
        }
        let full: Vec<f64> = (0..d).map(|i| p[i] + 0.5 * eps[i] * g[i]).collect();
        if k + 1 < l {
            for i in 0..d {
                p[i] += eps[i] * g[i];
            }
        }
        positions.push(zk.clone());
        momenta.push(full);
        grads.push(g.clone());
    }
    let r_out = momenta[l].clone();
    if !all_finite(&r_out) {
        return Err(Error::Divergence { step: l });
    }
    Ok((
        zk,
        r_out,
        LeapfrogTrace {
            positions,
            momenta_half,
            momenta,
            grads,
        },
    ))
}

/// Sensitivities returned by [`leapfrog_vjp`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeapfrogCotangents {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub log_step: Vec<f64>,
    pub log_mass: Vec<f64>,
}

/// Pulls the output cotangents `(z̄', r̄')` back through a recorded leapfrog
/// trajectory.
///
/// Reverses the kick/drift sequence exactly. Each kick `p ← p + c∘∇log π*(z)`
/// contributes `∇²log π*(z)·(c∘p̄)` to `z̄` through [`crate::targets::hvp_logp`]'s
/// machinery (analytic where the target provides it); each drift
/// `z ← z + ε∘p/m` routes `z̄` into `p̄`, `ε̄` and `m̄`. Step and mass
/// sensitivities are returned with respect to their logs.
pub fn leapfrog_vjp(
    trace: &LeapfrogTrace,
    layer: &LeapfrogLayer,
    target: &dyn Target,
    zbar_out: &[f64],
    rbar_out: &[f64],
) -> Result<LeapfrogCotangents> {
    check_dims(layer, target, &[zbar_out, rbar_out])?;
    let l = layer.leaps;
    let d = target.dim();
    if trace.positions.len() != l + 1
        || trace.momenta_half.len() != l
        || trace.grads.len() != l + 1
        || trace.positions.iter().any(|p| p.len() != d)
    {
        return Err(Error::Contract(format!(
            "trace does not match a {l}-leap layer of dimension {d}"
        )));
    }
    let eps = layer.step();
    let inv_mass: Vec<f64> = layer.log_mass.iter().map(|x| (-x).exp()).collect();

    let mut zb = zbar_out.to_vec();
    let mut pb = rbar_out.to_vec();
    let mut eb = vec![0.0; d];
    let mut mb = vec![0.0; d];
    let mut cv = vec![0.0; d];
    let mut hv = vec![0.0; d];

    // Final half kick at z_L.
    kick_adjoint(
        target,
        &trace.positions[l],
        &trace.grads[l],
        &eps,
        0.5,
        &pb,
        &mut zb,
        &mut eb,
        &mut cv,
        &mut hv,
    );
    for k in (0..l).rev() {
        // Drift z_{k+1} = z_k + ε∘p_k/m.
        let pk = &trace.momenta_half[k];
        for i in 0..d {
            let a = zb[i];
            eb[i] += pk[i] * inv_mass[i] * a;
            mb[i] -= eps[i] * pk[i] * inv_mass[i] * inv_mass[i] * a;
            pb[i] += eps[i] * inv_mass[i] * a;
        }
        // Kick at z_k: full for k > 0, half for the opening kick.
        let frac = if k == 0 { 0.5 } else { 1.0 };
        kick_adjoint(
            target,
            &trace.positions[k],
            &trace.grads[k],
            &eps,
            frac,
            &pb,
            &mut zb,
            &mut eb,
            &mut cv,
            &mut hv,
        );
    }

    let mass = layer.mass();
    Ok(LeapfrogCotangents {
        z: zb,
        r: pb,
        log_step: (0..d).map(|i| eb[i] * eps[i]).collect(),
        log_mass: (0..d).map(|i| mb[i] * mass[i]).collect(),
    })
}

/// Adjoint of `p ← p + frac·ε∘g(z)`.
#[allow(clippy::too_many_arguments)]
fn kick_adjoint(
    target: &dyn Target,
    z: &[f64],
    g: &[f64],
    eps: &[f64],
    frac: f64,
    pb: &[f64],
    zb: &mut [f64],
    eb: &mut [f64],
    cv: &mut [f64],
    hv: &mut [f64],
) {
    for i in 0..z.len() {
        cv[i] = frac * eps[i] * pb[i];
        eb[i] += frac * g[i] * pb[i];
    }
    hvp_into(target, z, cv, hv);
    for i in 0..z.len() {
        zb[i] += hv[i];
    }
}

/// Joint state `(z, r, u)` of the Metropolis-Hastings map.
#[derive(Debug, Clone, PartialEq)]
pub struct MhState {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub u: f64,
}

/// `min{1, π*(r) q(z|r) / (π*(z) q(r|z))}`, evaluated in log space.
///
/// `proposal_logq(from, to)` is `log q(to | from)`.
pub fn mh_accept_prob(
    z: &[f64],
    r: &[f64],
    target: &dyn Target,
    proposal_logq: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    let d = target.dim();
    for v in [z, r] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    let lz = target.log_density(z);
    if !lz.is_finite() {
        return Err(Error::Domain(format!("log π*(z) = {lz} is not finite")));
    }
    let log_ratio = target.log_density(r) + proposal_logq(r, z) - lz - proposal_logq(z, r);
    if log_ratio.is_nan() {
        return Ok(0.0);
    }
    Ok(log_ratio.min(0.0).exp().clamp(0.0, 1.0))
}

/// Deterministic Metropolis-Hastings map: returns `(r, z, u)` when `u < p`
/// and `(z, r, u)` otherwise. A tie `u == p` does not swap.
pub fn mh_transform(s: MhState, p: f64) -> MhState {
    if s.u < p {
        MhState {
            z: s.r,
            r: s.z,
            u: s.u,
        }
    } else {
        s
    }
}

/// Isotropic Gaussian random-walk proposal used to exercise the general MH
/// ratio.
#[derive(Debug, Clone, Copy)]
pub struct GaussianRandomWalk {
    pub scale: f64,
}

impl GaussianRandomWalk {
    /// `log q(to | from)` up to a constant.
    pub fn logq(&self, from: &[f64], to: &[f64]) -> f64 {
        let sq: f64 = from.iter().zip(to).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * sq / (self.scale * self.scale)
    }

    /// Proposal `z + scale·ξ` for standard-normal `ξ`.
    pub fn propose(&self, z: &[f64], xi: &[f64]) -> Vec<f64> {
        z.iter().zip(xi).map(|(a, b)| a + self.scale * b).collect()
    }
}

/// One MH-corrected leapfrog transition from `z` with standard-normal
/// momentum noise `xi` and uniform `u`.
///
/// The momentum is `√m∘ξ`; the endpoint is accepted through [`mh_transform`]
/// with `p = min{1, exp(H_start − H_end)}`. Divergent trajectories are
/// rejected. Returns the new position and the acceptance probability.
pub fn hmc_transition(
    z: &[f64],
    xi: &[f64],
    u: f64,
    layer: &LeapfrogLayer,
    target: &dyn Target,
) -> Result<(Vec<f64>, f64)> {
    check_dims(layer, target, &[z, xi])?;
    let r: Vec<f64> = xi
        .iter()
        .zip(&layer.log_mass)
        .map(|(x, lm)| x * (0.5 * lm).exp())
        .collect();
    let h0 = -target.log_density(z) + layer.kinetic(&r);
    let (proposal, p) = match leapfrog_forward(z, &r, layer, target) {
        Ok((z1, r1, _)) => {
            let h1 = -target.log_density(&z1) + layer.kinetic(&r1);
            let log_ratio = h0 - h1;
            let p = if log_ratio.is_nan() {
                0.0
            } else {
                log_ratio.min(0.0).exp()
            };
            (z1, p)
        }
        Err(Error::Divergence { .. }) => (z.to_vec(), 0.0),
        Err(e) => return Err(e),
    };
    let s = mh_transform(
        MhState {
            z: z.to_vec(),
            r: proposal,
            u,
        },
        p,
    );
    Ok((s.z, p))
}

/// The shear `(x, y) ↦ (x + y, x)`, a unit-Jacobian map of the plane.
pub fn shear_transform(x: f64, y: f64) -> (f64, f64) {
    (x + y, x)
}

/// `log |det J|` of the central-difference Jacobian of `map` at `z`.
///
/// A singular Jacobian yields `-inf`.
pub fn numerical_jacobian_logdet(
    map: impl Fn(&[f64]) -> Vec<f64>,
    z: &[f64],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h = {h} must be positive")));
    }
    let n = z.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let mut plus = z.to_vec();
    let mut minus = z.to_vec();
    for j in 0..n {
        plus[j] = z[j] + h;
        minus[j] = z[j] - h;
        let fp = map(&plus);
        let fm = map(&minus);
        if fp.len() != n || fm.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: fp.len(),
            });
        }
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        plus[j] = z[j];
        minus[j] = z[j];
    }
    let det = jac.lu().determinant();
    Ok(if det == 0.0 {
        f64::NEG_INFINITY
    } else {
        det.abs().ln()
    })
}
