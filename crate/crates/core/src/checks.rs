//! Randomized invariant suites over the leapfrog map, its adjoint and the MH
//! map, plus the fast suite behind the `check` subcommand.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dein::{sample_noise, DeinModel, InitDist};
use crate::diagnostics::{ks_test_1d, normal_cdf, KsResult};
use crate::loss::{ergodic_loss, ergodic_loss_grad, LossMode};
use crate::rng::{derive_seed, seeded};
use crate::targets::{Banana, Gaussian, GaussianMixture, Target};
use crate::transforms::{
    leapfrog_forward, leapfrog_vjp, mh_accept_prob, mh_transform, numerical_jacobian_logdet,
    GaussianRandomWalk, LeapfrogLayer, MhState,
};
use crate::Result;

/// Applied to every analytic gradient before it is compared with finite
/// differences. The identity in normal use; tests inject faults here.
pub type GradientHook = fn(&mut [f64]);

fn no_hook(_: &mut [f64]) {}

/// Worst value of a per-configuration error over a randomized suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub n_configs: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn normals(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// A smooth target of dimension `d` chosen at random from the battery.
fn random_target(rng: &mut ChaCha8Rng, d: usize) -> Arc<dyn Target> {
    let choices = if d == 2 { 4 } else { 3 };
    match rng.random_range(0..choices) {
        0 => Arc::new(Gaussian::std_normal(d)),
        1 => Arc::new(Gaussian::correlated(d, 0.5, vec![0.0; d]).expect("valid equicorrelation")),
        2 => Arc::new(GaussianMixture::new(d, 1.0, 1.0)),
        _ => Arc::new(Banana::new(0.1, 2.0)),
    }
}

fn random_layer(rng: &mut ChaCha8Rng, d: usize, max_leaps: usize) -> LeapfrogLayer {
    LeapfrogLayer {
        log_step: (0..d).map(|_| rng.random_range(-3.0..-1.2)).collect(),
        log_mass: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        leaps: rng.random_range(1..=max_leaps),
        mh_correct: false,
    }
}

struct Config {
    target: Arc<dyn Target>,
    layer: LeapfrogLayer,
    z: Vec<f64>,
    r: Vec<f64>,
}

fn random_config(seed: u64, index: usize) -> Config {
    let mut rng = seeded(derive_seed(seed, index as u64));
    let d = rng.random_range(1..=4);
    let target = random_target(&mut rng, d);
    let d = target.dim();
    Config {
        layer: random_layer(&mut rng, d, 5),
        z: normals(&mut rng, d),
        r: normals(&mut rng, d),
        target,
    }
}

/// Flip-run-flip: running the map from `(z', −r')` must return `(z, −r)`.
/// Reports the worst absolute deviation.
pub fn reversibility_suite(n_configs: usize, seed: u64) -> Result<SuiteResult> {
    let errs: Vec<f64> = (0..n_configs)
        .into_par_iter()
        .map(|i| {
            let c = random_config(seed, i);
            let (z1, r1, _) = leapfrog_forward(&c.z, &c.r, &c.layer, c.target.as_ref())?;
            let flipped: Vec<f64> = r1.iter().map(|x| -x).collect();
            let (z2, r2, _) = leapfrog_forward(&z1, &flipped, &c.layer, c.target.as_ref())?;
            let dz = z2.iter().zip(&c.z).map(|(a, b)| (a - b).abs());
            let dr = r2.iter().zip(&c.r).map(|(a, b)| (a + b).abs());
            Ok(dz.chain(dr).fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(SuiteResult {
        n_configs,
        worst: errs.into_iter().fold(0.0, f64::max),
        tolerance: 1e-10,
    })
}

/// `|log |det J||` of the joint map `(z, r) ↦ (z', r')` by central
/// differences.
pub fn volume_suite(n_configs: usize, seed: u64) -> Result<SuiteResult> {
    let errs: Vec<f64> = (0..n_configs)
        .into_par_iter()
        .map(|i| {
            let c = random_config(seed, i);
            let d = c.z.len();
            let joint: Vec<f64> = c.z.iter().chain(&c.r).copied().collect();
            let map = |x: &[f64]| {
                let (z1, r1, _) = leapfrog_forward(&x[..d], &x[d..], &c.layer, c.target.as_ref())
                    .expect("nearby configuration stays finite");
                z1.into_iter().chain(r1).collect::<Vec<f64>>()
            };
            Ok(numerical_jacobian_logdet(map, &joint, 1e-5)?.abs())
        })
        .collect::<Result<_>>()?;
    Ok(SuiteResult {
        n_configs,
        worst: errs.into_iter().fold(0.0, f64::max),
        tolerance: 1e-6,
    })
}

fn rel_err(fd: &[f64], analytic: &[f64]) -> f64 {
    let diff = fd
        .iter()
        .zip(analytic)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Gradient of `⟨w_z, z'⟩ + ⟨w_r, r'⟩` with respect to
/// `(z, r, log ε, log m)` from [`leapfrog_vjp`], against central
/// differences. Relative error in the Euclidean norm.
fn vjp_error(c: &Config, rng: &mut ChaCha8Rng, hook: GradientHook) -> Result<f64> {
    let d = c.z.len();
    let wz = normals(rng, d);
    let wr = normals(rng, d);
    let target = c.target.as_ref();
    let (_, _, trace) = leapfrog_forward(&c.z, &c.r, &c.layer, target)?;
    let ct = leapfrog_vjp(&trace, &c.layer, target, &wz, &wr)?;
    let mut analytic: Vec<f64> = [ct.z, ct.r, ct.log_step, ct.log_mass].concat();
    hook(&mut analytic);

    let f = |x: &[f64]| -> Result<f64> {
        let layer = LeapfrogLayer {
            log_step: x[2 * d..3 * d].to_vec(),
            log_mass: x[3 * d..].to_vec(),
            ..c.layer.clone()
        };
        let (z1, r1, _) = leapfrog_forward(&x[..d], &x[d..2 * d], &layer, target)?;
        Ok(z1
            .iter()
            .zip(&wz)
            .chain(r1.iter().zip(&wr))
            .map(|(a, b)| a * b)
            .sum())
    };
    let x0: Vec<f64> = [&c.z[..], &c.r, &c.layer.log_step, &c.layer.log_mass].concat();
    let h = 1e-5;
    let mut fd = vec![0.0; x0.len()];
    for (i, g) in fd.iter_mut().enumerate() {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[i] += h;
        xm[i] -= h;
        *g = (f(&xp)? - f(&xm)?) / (2.0 * h);
    }
    Ok(rel_err(&fd, &analytic))
}

/// Frozen-noise gradient of the loss estimator against central differences
/// of [`ergodic_loss`] under the same noise.
fn loss_grad_error(seed: u64, index: usize, n_rows: usize, hook: GradientHook) -> Result<f64> {
    let mut rng = seeded(derive_seed(seed, index as u64));
    let d = rng.random_range(1..=4);
    let target = random_target(&mut rng, d);
    let d = target.dim();
    let depth = rng.random_range(1..=4);
    let trainable = rng.random_bool(0.5);
    let mode = if trainable && rng.random_bool(0.5) {
        LossMode::Total
    } else {
        LossMode::Objective
    };
    let init = InitDist::new(
        normals(&mut rng, d).iter().map(|x| 0.3 * x).collect(),
        (0..d).map(|_| rng.random_range(0.0..0.7)).collect(),
        trainable,
    );
    let layers = (0..depth).map(|_| random_layer(&mut rng, d, 5)).collect();
    let model = DeinModel::new(init, layers)?;
    let noise = sample_noise(&model, n_rows, derive_seed(seed, 1 << 32 | index as u64));
    let target = target.as_ref();
    let g = ergodic_loss_grad(&model, target, &noise, mode)?;
    let mut analytic: Vec<f64> = g.by_name.values().flatten().copied().collect();
    hook(&mut analytic);

    let eval = |m: &DeinModel| -> Result<f64> {
        let l = ergodic_loss(m, target, &noise)?;
        Ok(match mode {
            LossMode::Objective => l.objective.value,
            LossMode::Total => l.total.value,
        })
    };
    let h = 1e-5;
    let mut fd = Vec::with_capacity(analytic.len());
    for (name, values) in &g.by_name {
        for i in 0..values.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.slot_mut(name)?[i] += h;
            minus.slot_mut(name)?[i] -= h;
            fd.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
        }
    }
    Ok(rel_err(&fd, &analytic))
}

/// Worst relative error of [`leapfrog_vjp`] and of [`ergodic_loss_grad`]
/// against frozen-noise central differences over random configurations
/// (`d ≤ 4`, `N ≤ 4`, `L ≤ 5`).
pub fn gradient_suite(
    n_configs: usize,
    seed: u64,
    hook: Option<GradientHook>,
) -> Result<(SuiteResult, SuiteResult)> {
    let hook = hook.unwrap_or(no_hook);
    let errs: Vec<(f64, f64)> = (0..n_configs)
        .into_par_iter()
        .map(|i| {
            let c = random_config(seed, i);
            let mut rng = seeded(derive_seed(seed, 1 << 40 | i as u64));
            let vjp = vjp_error(&c, &mut rng, hook)?;
            let loss = loss_grad_error(seed, i, 32, hook)?;
            Ok((vjp, loss))
        })
        .collect::<Result<_>>()?;
    let worst = |k: fn(&(f64, f64)) -> f64| errs.iter().map(k).fold(0.0, f64::max);
    Ok((
        SuiteResult {
            n_configs,
            worst: worst(|e| e.0),
            tolerance: 1e-4,
        },
        SuiteResult {
            n_configs,
            worst: worst(|e| e.1),
            tolerance: 1e-4,
        },
    ))
}

/// One MH-map application to `z ~ N(0, 1)` with a symmetric random-walk
/// proposal, KS-tested against the standard normal.
pub fn mh_stationarity(n: usize, seed: u64) -> Result<KsResult> {
    let target = Gaussian::std_normal(1);
    let walk = GaussianRandomWalk { scale: 1.5 };
    let out: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::row_stream(seed, i as u64);
            let z = vec![rng.sample::<f64, _>(StandardNormal)];
            let r = walk.propose(&z, &[rng.sample(StandardNormal)]);
            let u: f64 = rng.random();
            let p = mh_accept_prob(&z, &r, &target, |a, b| walk.logq(a, b))?;
            Ok(mh_transform(MhState { z, r, u }, p).z[0])
        })
        .collect::<Result<_>>()?;
    ks_test_1d(&out, |x| normal_cdf(x, 0.0, 1.0))
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn suite_detail(s: &SuiteResult) -> (bool, String) {
    (
        s.passed(),
        format!(
            "worst {:.3e} over {} configs (tolerance {:.0e})",
            s.worst, s.n_configs, s.tolerance
        ),
    )
}

/// The fast invariant suite: reversibility, unit Jacobian, the
/// finite-difference gradient oracle on one seeded configuration and MH
/// stationarity at `n = 10⁴`. Fixed seeds make the output repeatable.
pub fn fast_checks(hook: Option<GradientHook>) -> Vec<CheckOutcome> {
    vec![
        timed("reversibility", || {
            Ok(suite_detail(&reversibility_suite(50, 1)?))
        }),
        timed("unit_jacobian", || Ok(suite_detail(&volume_suite(20, 2)?))),
        timed("gradient", || {
            let (vjp, loss) = gradient_suite(1, 3, hook)?;
            Ok((
                vjp.passed() && loss.passed(),
                format!(
                    "leapfrog adjoint rel err {:.3e}, loss gradient rel err {:.3e} (tolerance 1e-4)",
                    vjp.worst, loss.worst
                ),
            ))
        }),
        timed("mh_stationarity", || {
            let ks = mh_stationarity(10_000, 4)?;
            Ok((
                ks.pass_at_01,
                format!("KS stat {:.4} (critical {:.4})", ks.stat, 1.628 / 100.0),
            ))
        }),
    ]
}
