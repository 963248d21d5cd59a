//! Sample-based measurements: moment errors, kernel MMD, autocorrelation,
//! Kolmogorov–Smirnov tests and leapfrog energy-error scaling.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::loss::expected_logp;
use crate::rng::{derive_seed, seeded};
use crate::targets::{AnalyticStats, Target};
use crate::transforms::{leapfrog_forward, LeapfrogLayer};
use crate::{Error, Result};

fn finite_rows(samples: ArrayView2<f64>) -> Vec<Vec<f64>> {
    samples
        .rows()
        .into_iter()
        .filter(|r| r.iter().all(|x| x.is_finite()))
        .map(|r| r.to_vec())
        .collect()
}

/// Empirical mean and (n−1)-normalized covariance of the finite rows.
pub fn sample_moments(samples: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let rows = finite_rows(samples);
    let n = rows.len();
    if n < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 finite rows, have {n}"
        )));
    }
    let d = samples.ncols();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in &rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for c in row.iter_mut() {
            *c /= (n - 1) as f64;
        }
    }
    Ok((mean, cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    pub mean_error: f64,
    pub cov_error: f64,
}

/// Max-abs deviation of the empirical mean and covariance from `stats`.
pub fn moment_error(samples: ArrayView2<f64>, stats: &AnalyticStats) -> Result<MomentError> {
    let (Some(mean), Some(cov)) = (&stats.mean, &stats.cov) else {
        return Err(Error::Contract(
            "analytic stats lack mean or covariance".into(),
        ));
    };
    if mean.len() != samples.ncols() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            got: samples.ncols(),
        });
    }
    let (m, c) = sample_moments(samples)?;
    let mean_error = m
        .iter()
        .zip(mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cov_error = c
        .iter()
        .flatten()
        .zip(cov.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(MomentError {
        mean_error,
        cov_error,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Estimation(
            "both samples need at least 2 rows".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    Ok(())
}

/// Row-major Gaussian-kernel Gram matrix of `points`.
fn gram(points: &[Vec<f64>], bandwidth: f64) -> Vec<f64> {
    let c = -0.5 / (bandwidth * bandwidth);
    points
        .par_iter()
        .flat_map_iter(|p| points.iter().map(move |q| (c * sq_dist(p, q)).exp()))
        .collect()
}

/// Unbiased MMD² from a pooled Gram matrix `k` (`N × N`, unit diagonal),
/// the first `n` entries of `idx` forming sample A and the rest sample B.
///
/// With `S_AA`, `S_BB` the within-sample sums off the diagonal and `S_AB`
/// the full cross sum, equal sizes use the paired U-statistic
/// `(S_AA + S_BB − 2 S_AB + 2 Σᵢ k(xᵢ, yᵢ)) / n(n−1)`, which excludes the
/// pairs `(xᵢ, yᵢ)`; unequal sizes use
/// `S_AA/n(n−1) + S_BB/m(m−1) − 2 S_AB/nm`.
fn mmd2_from_gram(k: &[f64], total: f64, idx: &[usize], n: usize) -> f64 {
    let big = idx.len();
    let m = big - n;
    let mut in_a = vec![0.0; big];
    for &i in &idx[..n] {
        in_a[i] = 1.0;
    }
    // v = K·1_A
    let v: Vec<f64> = k
        .par_chunks(big)
        .map(|row| row.iter().zip(&in_a).map(|(x, l)| x * l).sum())
        .collect();
    let aa_full: f64 = idx[..n].iter().map(|&i| v[i]).sum();
    let ab: f64 = idx[n..].iter().map(|&i| v[i]).sum();
    let aa = aa_full - n as f64;
    let bb = total - aa_full - 2.0 * ab - m as f64;
    if n == m {
        let paired: f64 = (0..n).map(|i| k[idx[i] * big + idx[n + i]]).sum();
        (aa + bb - 2.0 * ab + 2.0 * paired) / (n * (n - 1)) as f64
    } else {
        aa / (n * (n - 1)) as f64 + bb / (m * (m - 1)) as f64 - 2.0 * ab / (n * m) as f64
    }
}

fn pooled(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<Vec<f64>> {
    a.rows()
        .into_iter()
        .chain(b.rows())
        .map(|r| r.to_vec())
        .collect()
}

/// Unbiased squared MMD with kernel `exp(−‖x−y‖²/2h²)`.
pub fn mmd2_unbiased(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Contract(format!(
            "bandwidth {bandwidth} must be positive"
        )));
    }
    let pts = pooled(a, b);
    let k = gram(&pts, bandwidth);
    let total = k.iter().sum();
    let idx: Vec<usize> = (0..pts.len()).collect();
    Ok(mmd2_from_gram(&k, total, &idx, a.nrows()))
}

/// Median pairwise distance of the pooled sample (first 1000 rows of each).
pub fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let take = |x: ArrayView2<f64>| {
        x.rows()
            .into_iter()
            .take(1000)
            .map(|r| r.to_vec())
            .collect::<Vec<_>>()
    };
    let mut pts = take(a);
    pts.extend(take(b));
    let mut d: Vec<f64> = (0..pts.len())
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(&pts[i], &pts[j]).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::Estimation("median pairwise distance is zero".into()))
    }
}

/// MMD² with its permutation null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdTest {
    pub mmd2: f64,
    pub bandwidth: f64,
    pub null_quantile: f64,
    pub quantile: f64,
    pub n_permutations: usize,
}

impl MmdTest {
    pub fn below_null(&self) -> bool {
        self.mmd2 < self.null_quantile
    }
}

/// MMD² of `a` vs `b` and the `quantile` of its distribution under random
/// relabelling of the pooled sample.
pub fn mmd_permutation_test(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    bandwidth: Option<f64>,
    n_permutations: usize,
    quantile: f64,
    seed: u64,
) -> Result<MmdTest> {
    check_pair(a, b)?;
    if n_permutations == 0 || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Contract(
            "need ≥1 permutation and a quantile in [0, 1]".into(),
        ));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::Contract(format!("bandwidth {h} must be positive"))),
        None => median_bandwidth(a, b)?,
    };
    let pts = pooled(a, b);
    let k = gram(&pts, h);
    let total = k.iter().sum();
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let mmd2 = mmd2_from_gram(&k, total, &idx, n);
    let mut rng = seeded(seed);
    let mut null: Vec<f64> = (0..n_permutations)
        .map(|_| {
            idx.shuffle(&mut rng);
            mmd2_from_gram(&k, total, &idx, n)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    let pos = ((quantile * n_permutations as f64).ceil() as usize).clamp(1, n_permutations) - 1;
    Ok(MmdTest {
        mmd2,
        bandwidth: h,
        null_quantile: null[pos],
        quantile,
        n_permutations,
    })
}

/// Normalized sample autocorrelation at `lag`.
pub fn lag_autocorr(series: &[f64], lag: usize) -> Result<f64> {
    let n = series.len();
    if lag == 0 || n <= lag + 1 {
        return Err(Error::Contract(format!(
            "need lag ≥ 1 and n > lag + 1 (n = {n}, lag = {lag})"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum();
    if !(var > 0.0) {
        return Err(Error::Estimation("series has zero variance".into()));
    }
    let cov: f64 = (0..n - lag)
        .map(|t| (series[t] - mean) * (series[t + lag] - mean))
        .sum();
    Ok(cov / var)
}

/// Lag-1 autocorrelation of the coordinate where it is largest in
/// magnitude (sign kept). Non-finite rows are dropped.
pub fn lag1_autocorr_max(samples: ArrayView2<f64>) -> Result<f64> {
    let rows = finite_rows(samples);
    let mut best: f64 = 0.0;
    for j in 0..samples.ncols() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let r = lag_autocorr(&col, 1)?;
        if r.abs() > best.abs() {
            best = r;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub stat: f64,
    pub pass_at_01: bool,
}

/// Two-sided one-sample KS statistic; passes at level 0.01 when below the
/// asymptotic critical value `1.628/√n`.
pub fn ks_test_1d(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::Contract(format!("KS test needs n ≥ 100, have {n}")));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let stat = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            ((i + 1) as f64 / nf - f).max(f - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        stat,
        pass_at_01: stat < 1.628 / nf.sqrt(),
    })
}

pub fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (std * std::f64::consts::SQRT_2))
}

/// KS tests against a Gaussian with the given moments: one per coordinate,
/// plus five seeded unit-vector projections when `d > 1`.
pub fn ks_gaussian_battery(
    samples: ArrayView2<f64>,
    mean: &[f64],
    cov: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<(String, KsResult)>> {
    let rows = finite_rows(samples);
    let d = samples.ncols();
    let mut dirs: Vec<(String, Vec<f64>)> = (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            (format!("z{j}"), e)
        })
        .collect();
    if d > 1 {
        let mut rng = seeded(seed);
        for k in 0..5 {
            let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            dirs.push((format!("projection{k}"), u));
        }
    }
    dirs.into_iter()
        .map(|(label, u)| {
            let proj: Vec<f64> = rows
                .iter()
                .map(|r| r.iter().zip(&u).map(|(a, b)| a * b).sum())
                .collect();
            let m: f64 = mean.iter().zip(&u).map(|(a, b)| a * b).sum();
            let var: f64 = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| u[i] * cov[i][j] * u[j])
                .sum();
            let res = ks_test_1d(&proj, |x| normal_cdf(x, m, var.sqrt()))?;
            Ok((label, res))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyScaling {
    pub err_at_eps: f64,
    pub err_at_half_eps: f64,
    pub ratio: f64,
    /// Trials dropped because either run diverged.
    pub n_excluded: usize,
}

/// `max_k |H(z_k, r_k) − H(z_0, r_0)|` along a leapfrog trajectory.
fn max_energy_error(
    z: &[f64],
    r: &[f64],
    layer: &LeapfrogLayer,
    target: &dyn Target,
) -> Result<f64> {
    let single = LeapfrogLayer {
        leaps: 1,
        ..layer.clone()
    };
    let h = |z: &[f64], r: &[f64]| -target.log_density(z) + layer.kinetic(r);
    let h0 = h(z, r);
    let (mut z, mut r) = (z.to_vec(), r.to_vec());
    let mut worst: f64 = 0.0;
    for _ in 0..layer.leaps {
        let (z1, r1, _) = leapfrog_forward(&z, &r, &single, target)?;
        z = z1;
        r = r1;
        worst = worst.max((h(&z, &r) - h0).abs());
    }
    Ok(worst)
}

/// Mean max energy error at the layer's step and at half the step with
/// twice the leaps (same integration time), over `n_trials` random starts.
pub fn energy_error_scaling(
    target: &dyn Target,
    layer: &LeapfrogLayer,
    n_trials: usize,
    seed: u64,
) -> Result<EnergyScaling> {
    if n_trials < 10 {
        return Err(Error::Contract(format!(
            "need at least 10 trials, have {n_trials}"
        )));
    }
    layer.validate()?;
    let d = target.dim();
    let half = LeapfrogLayer {
        log_step: layer.log_step.iter().map(|l| l - 2f64.ln()).collect(),
        leaps: 2 * layer.leaps,
        ..layer.clone()
    };
    let mass = layer.mass();
    let trials: Vec<Option<(f64, f64)>> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded(derive_seed(seed, t as u64));
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let r: Vec<f64> = (0..d)
                .map(|i| mass[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let full = max_energy_error(&z, &r, layer, target);
            let halved = max_energy_error(&z, &r, &half, target);
            match (full, halved) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => Ok(Some((a, b))),
                (Err(Error::Divergence { .. }), _) | (_, Err(Error::Divergence { .. })) => Ok(None),
                (Err(e), _) | (_, Err(e)) => Err(e),
                _ => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, f64)> = trials.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Estimation("every trial diverged".into()));
    }
    let k = kept.len() as f64;
    let err_at_eps = kept.iter().map(|p| p.0).sum::<f64>() / k;
    let err_at_half_eps = kept.iter().map(|p| p.1).sum::<f64>() / k;
    Ok(EnergyScaling {
        err_at_eps,
        err_at_half_eps,
        ratio: err_at_eps / err_at_half_eps,
        n_excluded: n_trials - kept.len(),
    })
}

/// Measured convergence proxies. Fields that were not computed are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd2_null_q99: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag1_autocorr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_stat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_pass: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_logp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_logp_gap: Option<f64>,
    pub n_samples: usize,
    pub n_divergent: usize,
}

/// Computes every diagnostic available for `samples`: moments, KS and the
/// log-density gap need analytic stats, MMD needs `reference` samples.
pub fn diagnose(
    samples: ArrayView2<f64>,
    target: &dyn Target,
    reference: Option<ArrayView2<f64>>,
    seed: u64,
) -> Result<DiagnosticsReport> {
    let total = samples.nrows();
    let finite: Array2<f64> = {
        let rows = finite_rows(samples);
        let d = samples.ncols();
        Array2::from_shape_vec((rows.len(), d), rows.concat())
            .map_err(|e| Error::Contract(e.to_string()))?
    };
    let mut report = DiagnosticsReport {
        n_samples: finite.nrows(),
        n_divergent: total - finite.nrows(),
        ..Default::default()
    };
    let logp = expected_logp(target, &finite)?;
    report.expected_logp = Some(logp.value);
    report.lag1_autocorr = Some(lag1_autocorr_max(finite.view())?);
    if let Some(stats) = target.analytic_stats() {
        if let (Some(mean), Some(cov)) = (&stats.mean, &stats.cov) {
            let me = moment_error(finite.view(), &stats)?;
            report.mean_error = Some(me.mean_error);
            report.cov_error = Some(me.cov_error);
            if stats.gaussian && finite.nrows() >= 100 {
                let ks = ks_gaussian_battery(finite.view(), mean, cov, derive_seed(seed, 1))?;
                report.ks_stat = ks.iter().map(|(_, r)| r.stat).reduce(f64::max);
                report.ks_pass = Some(ks.iter().all(|(_, r)| r.pass_at_01));
            }
        }
        report.expected_logp_gap = stats.expected_logp.map(|e| logp.value - e);
    }
    if let Some(reference) = reference {
        let n = finite.nrows().min(reference.nrows()).min(2000);
        let test = mmd_permutation_test(
            finite.slice(ndarray::s![..n, ..]),
            reference.slice(ndarray::s![..n, ..]),
            None,
            200,
            0.99,
            derive_seed(seed, 2),
        )?;
        report.mmd2 = Some(test.mmd2);
        report.mmd2_null_q99 = Some(test.null_quantile);
        report.mmd_bandwidth = Some(test.bandwidth);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Gaussian;

    fn normal_matrix(n: usize, d: usize, seed: u64, shift: f64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((n, d), |_| shift + rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn moment_error_cases() {
        let stats = Gaussian::std_normal(2).analytic_stats().unwrap();
        let s = normal_matrix(1_000_000, 2, 1, 0.0);
        let e = moment_error(s.view(), &stats).unwrap();
        assert!(e.mean_error < 0.01 && e.cov_error < 0.02, "{e:?}");
        let zeros = Array2::zeros((10, 2));
        let e = moment_error(zeros.view(), &stats).unwrap();
        assert_eq!((e.mean_error, e.cov_error), (0.0, 1.0));
        let shifted = normal_matrix(100_000, 2, 2, 1.0);
        let e = moment_error(shifted.view(), &stats).unwrap();
        assert!((e.mean_error - 1.0).abs() < 0.02);
        assert!(moment_error(Array2::zeros((1, 2)).view(), &stats).is_err());
    }

    #[test]
    fn mmd_null_and_separation() {
        let n = 2000;
        let a = normal_matrix(n, 2, 3, 0.0);
        let b = normal_matrix(n, 2, 4, 0.0);
        let same = mmd2_unbiased(a.view(), b.view(), 1.0).unwrap();
        let threshold = 4.0 / (n as f64).sqrt();
        assert!(same.abs() < threshold, "{same}");
        // Null scale from the permutation distribution at the same bandwidth.
        let null = mmd_permutation_test(a.view(), b.view(), Some(1.0), 100, 0.99, 0).unwrap();
        assert!(null.below_null() && null.null_quantile < threshold);
        let far = normal_matrix(n, 2, 5, 3.0);
        let sep = mmd2_unbiased(a.view(), far.view(), 1.0).unwrap();
        assert!(sep > 10.0 * null.null_quantile, "{sep}");
        let test = mmd_permutation_test(a.view(), far.view(), None, 100, 0.99, 0).unwrap();
        assert!(!test.below_null());
    }

    #[test]
    fn mmd_identical_sets_is_zero() {
        let a = normal_matrix(300, 3, 6, 0.0);
        assert!(mmd2_unbiased(a.view(), a.view(), 0.7).unwrap().abs() < 1e-12);
        assert!(mmd2_unbiased(a.view(), a.view(), 0.0).is_err());
    }

    #[test]
    fn mmd_is_symmetric() {
        let a = normal_matrix(200, 2, 11, 0.0);
        let b = normal_matrix(150, 2, 12, 0.5);
        let ab = mmd2_unbiased(a.view(), b.view(), 0.8).unwrap();
        let ba = mmd2_unbiased(b.view(), a.view(), 0.8).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn autocorr_cases() {
        let iid: Vec<f64> = normal_matrix(100_000, 1, 7, 0.0).into_iter().collect();
        assert!(lag_autocorr(&iid, 1).unwrap().abs() < 0.02);
        let n = 1000;
        let alt: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert!((lag_autocorr(&alt, 1).unwrap() + 1.0).abs() <= 1.0 / n as f64 + 1e-12);
        let ramp: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let r = lag_autocorr(&ramp, 1).unwrap();
        assert!(r < 1.0 && 1.0 - r < 5.0 / n as f64);
        assert!(lag_autocorr(&[1.0; 10], 1).is_err());
        assert!(lag_autocorr(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn ks_cases() {
        let cdf = |x| normal_cdf(x, 0.0, 1.0);
        let shifted: Vec<f64> = normal_matrix(10_000, 1, 8, 1.0).into_iter().collect();
        assert!(!ks_test_1d(&shifted, cdf).unwrap().pass_at_01);
        let point = ks_test_1d(&[0.0; 100], cdf).unwrap();
        assert!((point.stat - 0.5).abs() < 1e-15);
        assert!(ks_test_1d(&[0.0; 99], cdf).is_err());
    }

    #[test]
    fn ks_calibration() {
        let cdf = |x| normal_cdf(x, 0.0, 1.0);
        let passes = (0..100)
            .into_par_iter()
            .filter(|&k| {
                let x: Vec<f64> = normal_matrix(100_000, 1, 1000 + k, 0.0)
                    .into_iter()
                    .collect();
                ks_test_1d(&x, cdf).unwrap().pass_at_01
            })
            .count();
        assert!(passes >= 98, "{passes}/100");
    }

    #[test]
    fn gaussian_battery_has_projections() {
        let t = Gaussian::correlated(2, 0.9, vec![0.0; 2]).unwrap();
        let s = t.analytic_stats().unwrap();
        let l = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0])
            .cholesky()
            .unwrap()
            .l();
        let raw = normal_matrix(20_000, 2, 9, 0.0);
        let x = Array2::from_shape_fn((20_000, 2), |(i, j)| {
            (0..2).map(|k| l[(j, k)] * raw[[i, k]]).sum()
        });
        let res = ks_gaussian_battery(
            x.view(),
            s.mean.as_ref().unwrap(),
            s.cov.as_ref().unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(res.len(), 7);
        assert!(res.iter().all(|(_, r)| r.pass_at_01), "{res:?}");
    }

    #[test]
    fn energy_error_is_second_order() {
        let t = Gaussian::std_normal(2);
        let layer = LeapfrogLayer::new(2, 0.2, 20);
        let s = energy_error_scaling(&t, &layer, 100, 0).unwrap();
        assert!((3.0..=5.0).contains(&s.ratio), "{s:?}");
        let tiny = LeapfrogLayer::new(2, (-30f64).exp(), 20);
        let s = energy_error_scaling(&t, &tiny, 10, 0).unwrap();
        assert!(s.err_at_eps < 1e-12);
        assert!(energy_error_scaling(&t, &layer, 5, 0).is_err());
    }

    #[test]
    fn exact_harmonic_flow_conserves_energy() {
        let h = |z: f64, r: f64| 0.5 * (z * z + r * r);
        for (z, r) in [(1.0, 0.0), (-0.3, 2.1), (4.0, -1.5)] {
            for t in [0.1, 1.0, 7.3] {
                let (c, s) = (f64::cos(t), f64::sin(t));
                let (zt, rt) = (z * c + r * s, -z * s + r * c);
                assert!((h(zt, rt) - h(z, r)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagnose_reports_only_what_it_can() {
        let t = Gaussian::std_normal(2);
        let s = normal_matrix(5000, 2, 10, 0.0);
        let r = diagnose(s.view(), &t, None, 0).unwrap();
        assert!(r.mmd2.is_none());
        assert!(r.mean_error.unwrap() < 0.05 && r.ks_pass == Some(true));
        assert!(r.expected_logp_gap.unwrap().abs() < 0.1);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("mmd2"));
        let mix = crate::targets::GaussianMixture::new(2, 2.0, 1.0);
        let r = diagnose(s.view(), &mix, Some(s.view()), 0).unwrap();
        assert!(r.expected_logp_gap.is_none() && r.ks_stat.is_none());
        assert!(r.mmd2.is_some());
    }
}
