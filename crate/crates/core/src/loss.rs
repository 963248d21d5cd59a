//! Ergodic loss estimation and its reparameterized gradient.
//!
//! For a stack of `N` layers with marginals `q₀ … q_N` the per-layer gap is
//! `Lⁿ = E_{q_n}[log π*] − E_{q_{n−1}}[log π*]` and the total loss is the
//! telescoped sum `L_N = E_{q_N}[log π*] − E_{q₀}[log π*]`. With `q₀` frozen
//! maximizing `L_N` is the same as maximizing the objective
//! `E_{q_N}[log π*]`. Both expectations are estimated from the same noise
//! (common random numbers), so each row contributes a paired difference.
//!
//! The signed difference is used throughout. Under the precondition
//! `E_{q₀}[log π*] < E_π[log π*]` ([`precondition_check`]) the gap is
//! non-negative, and the signed form is differentiable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dein::{forward_all, forward_row, sample_noise, DeinModel, NoiseBatch};
use crate::params::NamedParams;
use crate::targets::{diag_gaussian_entropy, Target};
use crate::transforms::leapfrog_vjp;
use crate::{Error, Result};

/// Monte Carlo estimate of an expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    /// Sample standard deviation of the integrand over `√n_samples`.
    pub std_error: f64,
    /// Rows that entered the average.
    pub n_samples: usize,
    /// Rows excluded because their trajectory diverged.
    pub n_divergent: usize,
}

impl LossEstimate {
    /// Mean and standard error of `values`.
    pub fn from_values(values: &[f64], n_divergent: usize) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Estimation(format!(
                "need at least 2 valid rows, have {n}"
            )));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            value: mean,
            std_error: (var / n as f64).sqrt(),
            n_samples: n,
            n_divergent,
        })
    }
}

/// `E[log π*]` over the rows of `samples`. Rows with non-finite entries
/// count as divergent and are excluded.
pub fn expected_logp(target: &dyn Target, samples: &ndarray::Array2<f64>) -> Result<LossEstimate> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::Estimation(format!("need at least 2 rows, have {n}")));
    }
    if samples.ncols() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: samples.ncols(),
        });
    }
    let values: Vec<f64> = samples
        .rows()
        .into_iter()
        .filter(|r| r.iter().all(|x| x.is_finite()))
        .map(|r| target.log_density(&r.to_vec()))
        .collect();
    if values.is_empty() {
        return Err(Error::Estimation("every row diverged".into()));
    }
    let divergent = n - values.len();
    if values.len() == 1 {
        return Ok(LossEstimate {
            value: values[0],
            std_error: 0.0,
            n_samples: 1,
            n_divergent: divergent,
        });
    }
    LossEstimate::from_values(&values, divergent)
}

/// Total loss `E_{q_N} − E_{q₀}` and objective `E_{q_N}` of `log π*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErgodicLoss {
    pub total: LossEstimate,
    pub objective: LossEstimate,
}

/// Per-row `log π*(z_n)` for `n = 0..=N`; `None` for divergent rows.
fn row_logps(
    model: &DeinModel,
    target: &dyn Target,
    noise: &NoiseBatch,
) -> Result<Vec<Option<Vec<f64>>>> {
    let rows = forward_all(model, noise, target, false)?;
    Ok(rows
        .into_par_iter()
        .map(|pass| {
            (!pass.diverged).then(|| pass.states.iter().map(|z| target.log_density(z)).collect())
        })
        .collect())
}

pub fn ergodic_loss(
    model: &DeinModel,
    target: &dyn Target,
    noise: &NoiseBatch,
) -> Result<ErgodicLoss> {
    let rows = row_logps(model, target, noise)?;
    let divergent = rows.iter().filter(|r| r.is_none()).count();
    let valid: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    let total: Vec<f64> = valid.iter().map(|l| l[l.len() - 1] - l[0]).collect();
    let objective: Vec<f64> = valid.iter().map(|l| l[l.len() - 1]).collect();
    Ok(ErgodicLoss {
        total: LossEstimate::from_values(&total, divergent)?,
        objective: LossEstimate::from_values(&objective, divergent)?,
    })
}

/// Gaps `Lⁿ` for `n = 1..=N`; they telescope to [`ErgodicLoss::total`].
pub fn per_layer_gap(
    model: &DeinModel,
    target: &dyn Target,
    noise: &NoiseBatch,
) -> Result<Vec<LossEstimate>> {
    if model.depth() == 0 {
        return Err(Error::Contract(
            "per-layer gaps need at least one layer".into(),
        ));
    }
    let rows = row_logps(model, target, noise)?;
    let divergent = rows.iter().filter(|r| r.is_none()).count();
    let valid: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    (1..=model.depth())
        .map(|n| {
            let gaps: Vec<f64> = valid.iter().map(|l| l[n] - l[n - 1]).collect();
            LossEstimate::from_values(&gaps, divergent)
        })
        .collect()
}

/// Which estimator to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `E_{q_N}[log π*]` (with `q₀` frozen this is the total loss up to a
    /// constant).
    #[default]
    Objective,
    /// `E_{q_N}[log π*] − E_{q₀}[log π*]`.
    Total,
}

/// Gradient of a loss estimator with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub by_name: NamedParams,
    /// Monte Carlo standard error of each gradient entry.
    pub std_error: NamedParams,
    /// Estimate of the differentiated quantity.
    pub value: LossEstimate,
    pub objective: LossEstimate,
    pub total: LossEstimate,
}

impl GradEstimate {
    pub fn norm(&self) -> f64 {
        crate::params::global_norm(&self.by_name)
    }
}

/// Reparameterized gradient of the selected estimator.
///
/// Per row the cotangent `∇log π*(z_N)` is pulled back through each layer
/// with [`leapfrog_vjp`] (momentum `√m∘ξ` adds `½ r∘r̄` to the log-mass
/// sensitivity), then through `T₀` into `(μ, log σ)`. In `Total` mode the
/// `q₀` term `∇log π*(z₀)` is subtracted, which only affects a trainable
/// initial distribution. Rows are reduced in row order.
pub fn ergodic_loss_grad(
    model: &DeinModel,
    target: &dyn Target,
    noise: &NoiseBatch,
    mode: LossMode,
) -> Result<GradEstimate> {
    ergodic_loss_grad_with(model, target, noise, mode, true)
}

/// [`ergodic_loss_grad`] with a choice of reduction. With
/// `reproducible = false` row contributions are summed in a parallel tree
/// whose order depends on scheduling.
pub fn ergodic_loss_grad_with(
    model: &DeinModel,
    target: &dyn Target,
    noise: &NoiseBatch,
    mode: LossMode,
    reproducible: bool,
) -> Result<GradEstimate> {
    model.validate()?;
    if model.layers.iter().any(|l| l.mh_correct) {
        return Err(Error::Contract(
            "MH-corrected layers are evaluation-only and cannot be differentiated".into(),
        ));
    }
    let names = model.trainable_params();
    if names.is_empty() {
        return Err(Error::Contract("model has no trainable parameters".into()));
    }
    let n = noise.n_samples();
    let width: usize = names.values().map(Vec::len).sum();

    // Each valid row yields [objective, total, grad...].
    let rows: Vec<Option<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| row_gradient(model, target, noise, i, mode, width))
        .collect::<Result<_>>()?;
    let divergent = rows.iter().filter(|r| r.is_none()).count();
    if divergent * 100 > n {
        return Err(Error::TooManyDivergent {
            divergent,
            total: n,
        });
    }
    let valid: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    let objective: Vec<f64> = valid.iter().map(|r| r[0]).collect();
    let total: Vec<f64> = valid.iter().map(|r| r[1]).collect();
    let objective = LossEstimate::from_values(&objective, divergent)?;
    let total = LossEstimate::from_values(&total, divergent)?;

    let (mean, se) = column_mean_and_se(&valid, 2, width, reproducible);
    let mut by_name = NamedParams::new();
    let mut std_error = NamedParams::new();
    let mut offset = 0;
    for (name, values) in &names {
        let k = values.len();
        by_name.insert(name.clone(), mean[offset..offset + k].to_vec());
        std_error.insert(name.clone(), se[offset..offset + k].to_vec());
        offset += k;
    }
    if let Some(bad) = crate::params::first_non_finite(&by_name) {
        return Err(Error::NonFiniteGradient(bad.to_string()));
    }
    Ok(GradEstimate {
        by_name,
        std_error,
        value: match mode {
            LossMode::Objective => objective,
            LossMode::Total => total,
        },
        objective,
        total,
    })
}

fn column_mean_and_se(
    rows: &[&Vec<f64>],
    skip: usize,
    width: usize,
    reproducible: bool,
) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let add = |mut acc: Vec<f64>, r: &Vec<f64>, sq: bool| {
        for (a, x) in acc.iter_mut().zip(&r[skip..]) {
            *a += if sq { x * x } else { *x };
        }
        acc
    };
    let sum = |sq: bool| -> Vec<f64> {
        if reproducible {
            rows.iter().fold(vec![0.0; width], |acc, r| add(acc, r, sq))
        } else {
            rows.par_iter()
                .fold(|| vec![0.0; width], |acc, r| add(acc, r, sq))
                .reduce(
                    || vec![0.0; width],
                    |mut a, b| {
                        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                        a
                    },
                )
        }
    };
    let s1 = sum(false);
    let s2 = sum(true);
    let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
    let se = s2
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = ((s - n * m * m) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    (mean, se)
}

fn row_gradient(
    model: &DeinModel,
    target: &dyn Target,
    noise: &NoiseBatch,
    row: usize,
    mode: LossMode,
    width: usize,
) -> Result<Option<Vec<f64>>> {
    let pass = forward_row(model, noise, row, target, true)?;
    if pass.diverged {
        return Ok(None);
    }
    let d = model.dim();
    let depth = model.depth();
    let z0 = &pass.states[0];
    let zn = &pass.states[depth];
    let logp_n = target.log_density(zn);
    let logp_0 = target.log_density(z0);

    let mut out = Vec::with_capacity(width + 2);
    out.push(logp_n);
    out.push(logp_n - logp_0);

    let mut zbar = vec![0.0; d];
    target.grad_log_density(zn, &mut zbar);
    let zero = vec![0.0; d];
    let mut layer_grads = vec![(Vec::new(), Vec::new()); depth];
    for n in (0..depth).rev() {
        let layer = &model.layers[n];
        let trace = &pass.traces[n];
        let c = leapfrog_vjp(trace, layer, target, &zbar, &zero)?;
        let r_in = &trace.momenta[0];
        let log_mass: Vec<f64> = (0..d)
            .map(|i| c.log_mass[i] + 0.5 * r_in[i] * c.r[i])
            .collect();
        layer_grads[n] = (c.log_step, log_mass);
        zbar = c.z;
    }
    if model.init.trainable {
        if mode == LossMode::Total {
            let mut g0 = vec![0.0; d];
            target.grad_log_density(z0, &mut g0);
            for i in 0..d {
                zbar[i] -= g0[i];
            }
        }
        let r0 = noise.r0.row(row);
        out.extend_from_slice(&zbar);
        out.extend((0..d).map(|i| zbar[i] * model.init.log_std[i].exp() * r0[i]));
    }
    for (ls, lm) in layer_grads {
        out.extend(ls);
        out.extend(lm);
    }
    Ok(Some(out))
}

/// Outcome of [`precondition_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionStatus {
    Passed,
    Failed,
    /// The target has no analytic `E_π[log π*]`.
    Unverified,
}

/// Report of the over-dispersion precondition together with the entropy
/// monitor `H(q₀)` vs `H(π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionReport {
    pub status: PreconditionStatus,
    pub q0_expected_logp: LossEstimate,
    #[serde(default)]
    pub target_expected_logp: Option<f64>,
    pub q0_entropy: f64,
    #[serde(default)]
    pub target_entropy: Option<f64>,
}

impl PreconditionReport {
    pub fn passed(&self) -> bool {
        self.status == PreconditionStatus::Passed
    }
}

/// Checks `E_{q₀}[log π*] < E_π[log π*] − 3·SE` from `n` draws of `q₀`.
pub fn precondition_check(
    model: &DeinModel,
    target: &dyn Target,
    n: usize,
    seed: u64,
) -> Result<PreconditionReport> {
    let bare = model.initial_only();
    let noise = sample_noise(&bare, n.max(2), seed);
    let samples = crate::dein::push_forward(&bare, &noise, target, false)?.samples;
    let q0 = expected_logp(target, &samples)?;
    let stats = target.analytic_stats();
    let target_expected_logp = stats.as_ref().and_then(|s| s.expected_logp);
    let status = match target_expected_logp {
        None => PreconditionStatus::Unverified,
        Some(e) if q0.value < e - 3.0 * q0.std_error => PreconditionStatus::Passed,
        Some(_) => PreconditionStatus::Failed,
    };
    Ok(PreconditionReport {
        status,
        q0_expected_logp: q0,
        target_expected_logp,
        q0_entropy: diag_gaussian_entropy(&model.init.log_std),
        target_entropy: stats.and_then(|s| s.entropy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dein::InitDist;
    use crate::targets::Gaussian;
    use crate::transforms::LeapfrogLayer;
    use ndarray::Array2;

    fn model(d: usize, depth: usize, log_std: f64, step: f64) -> DeinModel {
        DeinModel::new(
            InitDist::new(vec![0.0; d], vec![log_std; d], false),
            vec![LeapfrogLayer::new(d, step, 3); depth],
        )
        .unwrap()
    }

    #[test]
    fn expected_logp_of_gaussian_draws() {
        let t = Gaussian::std_normal(2);
        for (log_std, want) in [(0.0, -1.0), (2f64.ln(), -4.0)] {
            let m = model(2, 0, log_std, 0.1);
            let noise = sample_noise(&m, 1_000_000, 21);
            let s = crate::dein::push_forward(&m, &noise, &t, false)
                .unwrap()
                .samples;
            let e = expected_logp(&t, &s).unwrap();
            assert!(
                (e.value - want).abs() < 3.0 * e.std_error,
                "{e:?} vs {want}"
            );
        }
    }

    #[test]
    fn expected_logp_of_repeated_row_has_zero_error() {
        let t = Gaussian::std_normal(2);
        let s = Array2::from_shape_fn((10, 2), |(_, j)| [0.5, -1.0][j]);
        let e = expected_logp(&t, &s).unwrap();
        assert!((e.value + 0.625).abs() < 1e-15);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn expected_logp_excludes_divergent_rows() {
        let t = Gaussian::std_normal(1);
        let s = Array2::from_shape_vec((4, 1), vec![0.0, f64::NAN, 0.0, 2.0]).unwrap();
        let e = expected_logp(&t, &s).unwrap();
        assert_eq!((e.n_samples, e.n_divergent), (3, 1));
        let all_bad = Array2::from_elem((3, 1), f64::NAN);
        assert!(matches!(
            expected_logp(&t, &all_bad),
            Err(Error::Estimation(_))
        ));
        assert!(expected_logp(&t, &Array2::zeros((1, 1))).is_err());
    }

    #[test]
    fn empty_stack_has_zero_total() {
        let m = model(2, 0, 0.5, 0.1);
        let noise = sample_noise(&m, 100, 1);
        let l = ergodic_loss(&m, &Gaussian::std_normal(2), &noise).unwrap();
        assert_eq!(l.total.value, 0.0);
        assert_eq!(l.total.std_error, 0.0);
    }

    #[test]
    fn identity_limit_layers_have_zero_gaps() {
        let mut m = model(2, 3, 0.5, 0.1);
        for layer in &mut m.layers {
            layer.log_step = vec![-30.0; 2];
        }
        let noise = sample_noise(&m, 200, 2);
        let t = Gaussian::correlated(2, 0.9, vec![0.0; 2]).unwrap();
        let l = ergodic_loss(&m, &t, &noise).unwrap();
        assert!(l.total.value.abs() < 1e-10);
        for g in per_layer_gap(&m, &t, &noise).unwrap() {
            assert!(g.value.abs() < 1e-10);
        }
    }

    #[test]
    fn single_layer_gap_equals_total() {
        let m = model(2, 1, 2f64.ln(), 0.3);
        let noise = sample_noise(&m, 500, 3);
        let t = Gaussian::std_normal(2);
        let l = ergodic_loss(&m, &t, &noise).unwrap();
        let g = per_layer_gap(&m, &t, &noise).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g[0].value - l.total.value).abs() <= 1e-14 * l.total.value.abs());
        assert!(per_layer_gap(&model(2, 0, 0.0, 0.1), &t, &noise).is_err());
    }

    #[test]
    fn mh_corrected_transition_raises_expected_logp() {
        let m = DeinModel::new(
            InitDist::new(vec![0.0; 2], vec![2f64.ln(); 2], false),
            vec![LeapfrogLayer::new(2, 0.5, 3).with_mh_correction()],
        )
        .unwrap();
        let noise = sample_noise(&m, 100_000, 8);
        let l = ergodic_loss(&m, &Gaussian::std_normal(2), &noise).unwrap();
        assert!(l.total.value > 3.0 * l.total.std_error, "{:?}", l.total);
        assert!(
            ergodic_loss_grad(&m, &Gaussian::std_normal(2), &noise, LossMode::Objective).is_err()
        );
    }

    #[test]
    fn precondition_cases() {
        let t = Gaussian::std_normal(2);
        let wide = precondition_check(&model(2, 0, 2f64.ln(), 0.1), &t, 20_000, 1).unwrap();
        assert!(wide.passed());
        assert!((wide.q0_expected_logp.value + 4.0).abs() < 0.1);
        let same = precondition_check(&model(2, 0, 0.0, 0.1), &t, 20_000, 1).unwrap();
        assert_eq!(same.status, PreconditionStatus::Failed);
        let narrow = precondition_check(&model(2, 0, 0.5f64.ln(), 0.1), &t, 20_000, 1).unwrap();
        assert_eq!(narrow.status, PreconditionStatus::Failed);
        assert!((narrow.q0_expected_logp.value + 0.25).abs() < 0.02);
        let mix = crate::targets::GaussianMixture::new(2, 2.0, 1.0);
        let unk = precondition_check(&model(2, 0, 0.0, 0.1), &mix, 100, 1).unwrap();
        assert_eq!(unk.status, PreconditionStatus::Unverified);
    }

    #[test]
    fn gradient_needs_trainable_parameters() {
        let m = model(2, 0, 0.0, 0.1);
        let noise = sample_noise(&m, 16, 0);
        assert!(
            ergodic_loss_grad(&m, &Gaussian::std_normal(2), &noise, LossMode::Objective).is_err()
        );
    }

    #[test]
    fn parallel_reduction_agrees_with_ordered_reduction() {
        let m = model(2, 2, 2f64.ln(), 0.2);
        let noise = sample_noise(&m, 512, 5);
        let t = Gaussian::correlated(2, 0.9, vec![0.0; 2]).unwrap();
        let a = ergodic_loss_grad_with(&m, &t, &noise, LossMode::Objective, true).unwrap();
        let b = ergodic_loss_grad_with(&m, &t, &noise, LossMode::Objective, false).unwrap();
        for (x, y) in a
            .by_name
            .values()
            .flatten()
            .zip(b.by_name.values().flatten())
        {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    fn fd_check(model: &DeinModel, target: &dyn Target, mode: LossMode) {
        let noise = sample_noise(model, 64, 17);
        let g = ergodic_loss_grad(model, target, &noise, mode).unwrap();
        let eval = |m: &DeinModel| {
            let l = ergodic_loss(m, target, &noise).unwrap();
            match mode {
                LossMode::Objective => l.objective.value,
                LossMode::Total => l.total.value,
            }
        };
        let h = 1e-6;
        for (name, values) in &g.by_name {
            for (i, analytic) in values.iter().enumerate() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.slot_mut(name).unwrap()[i] += h;
                minus.slot_mut(name).unwrap()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{name}[{i}]: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = Gaussian::correlated(2, 0.9, vec![0.0; 2]).unwrap();
        let mut m = model(2, 2, 2f64.ln(), 0.2);
        m.layers[1].log_mass = vec![0.3, -0.2];
        fd_check(&m, &t, LossMode::Objective);
        m.init.trainable = true;
        m.init.mean = vec![0.1, -0.3];
        fd_check(&m, &t, LossMode::Objective);
        fd_check(&m, &t, LossMode::Total);
        let banana = crate::targets::Banana::new(0.1, 2.0);
        fd_check(&m, &banana, LossMode::Total);
    }
}
