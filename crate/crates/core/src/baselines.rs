//! Reference methods: an MH-corrected HMC sampler (ground truth and the
//! auto-tuned MCMC comparator) and mean-field Gaussian VI.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dein::{sample_noise, DeinModel, InitDist};
use crate::loss::LossEstimate;
use crate::optimize::{adam_step, OptimizerState, TrainConfig};
use crate::params::{first_non_finite, global_norm, scale, NamedParams};
use crate::rng::{derive_seed, seeded};
use crate::targets::{diag_gaussian_entropy, Target};
use crate::transforms::{hmc_transition, LeapfrogLayer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub step: f64,
    pub leaps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Starting point; the origin when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step: 0.2,
            leaps: 10,
            burn_in: 1000,
            thin: 1,
            seed: 0,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcChain {
    pub states: Array2<f64>,
    /// Accepted / proposed after burn-in.
    pub acceptance_rate: f64,
    pub config: HmcConfig,
    /// Acceptance below 0.1: the chain is badly tuned.
    pub low_acceptance: bool,
}

/// Runs one HMC chain with unit mass and keeps `n_kept` states.
pub fn hmc_sample(target: &dyn Target, n_kept: usize, config: &HmcConfig) -> Result<HmcChain> {
    let d = target.dim();
    if n_kept == 0 {
        return Err(Error::param("n_kept", "must be at least 1"));
    }
    if !(config.step > 0.0 && config.step.is_finite()) {
        return Err(Error::param("step", "must be positive"));
    }
    if config.leaps == 0 || config.thin == 0 {
        return Err(Error::param(
            if config.leaps == 0 { "leaps" } else { "thin" },
            "must be at least 1",
        ));
    }
    let mut z = config.init.clone().unwrap_or_else(|| vec![0.0; d]);
    if z.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: z.len(),
        });
    }
    let layer = LeapfrogLayer::new(d, config.step, config.leaps);
    let mut rng = seeded(config.seed);
    let mut xi = vec![0.0; d];
    let mut states = Array2::zeros((n_kept, d));
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let total = config.burn_in + n_kept * config.thin;
    for t in 0..total {
        for x in xi.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let u: f64 = rng.random();
        let (next, p) = hmc_transition(&z, &xi, u, &layer, target)?;
        z = next;
        if t >= config.burn_in {
            proposed += 1;
            if u < p {
                accepted += 1;
            }
            let k = t - config.burn_in;
            if (k + 1).is_multiple_of(config.thin) {
                states
                    .row_mut(k / config.thin)
                    .assign(&ndarray::ArrayView1::from(&z));
            }
        }
    }
    let acceptance_rate = accepted as f64 / proposed as f64;
    Ok(HmcChain {
        states,
        acceptance_rate,
        config: config.clone(),
        low_acceptance: acceptance_rate < 0.1,
    })
}

/// Step-size tuning by expected squared jump distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsjdTuning {
    pub criterion: String,
    pub grid: Vec<f64>,
    pub esjd: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub best_step: f64,
}

/// Runs a pilot chain per grid step and picks the step with the largest
/// mean `‖z_{t+1} − z_t‖²`.
pub fn tune_step_esjd(
    target: &dyn Target,
    grid: &[f64],
    base: &HmcConfig,
    n_pilot: usize,
) -> Result<EsjdTuning> {
    if grid.is_empty() {
        return Err(Error::param("grid", "must not be empty"));
    }
    if n_pilot < 2 {
        return Err(Error::param("n_pilot", "must be at least 2"));
    }
    let mut esjd = Vec::with_capacity(grid.len());
    let mut acceptance = Vec::with_capacity(grid.len());
    for (i, &step) in grid.iter().enumerate() {
        let cfg = HmcConfig {
            step,
            thin: 1,
            seed: derive_seed(base.seed, i as u64),
            ..base.clone()
        };
        let chain = hmc_sample(target, n_pilot, &cfg)?;
        let s = &chain.states;
        let jumps: f64 = (1..s.nrows())
            .map(|t| {
                s.row(t)
                    .iter()
                    .zip(s.row(t - 1))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        esjd.push(jumps / (s.nrows() - 1) as f64);
        acceptance.push(chain.acceptance_rate);
    }
    let best = esjd
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is non-empty");
    Ok(EsjdTuning {
        criterion: "expected squared jump distance".into(),
        grid: grid.to_vec(),
        esjd,
        acceptance,
        best_step: grid[best],
    })
}

/// Diagonal Gaussian variational family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldQ {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl MeanFieldQ {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        Ok(Self { mean, log_std })
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn entropy(&self) -> f64 {
        diag_gaussian_entropy(&self.log_std)
    }

    fn as_model(&self) -> DeinModel {
        DeinModel {
            init: InitDist::new(self.mean.clone(), self.log_std.clone(), true),
            layers: vec![],
        }
    }

    fn params(&self) -> NamedParams {
        self.as_model().trainable_params()
    }
}

/// Monte Carlo `E_q[log π*] + H(q)` with the entropy in closed form.
pub fn elbo_estimate(
    q: &MeanFieldQ,
    target: &dyn Target,
    n: usize,
    seed: u64,
) -> Result<LossEstimate> {
    if n < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 draws, have {n}"
        )));
    }
    let noise = sample_noise(&q.as_model(), n, seed);
    let values: Vec<f64> = noise
        .r0
        .rows()
        .into_iter()
        .map(|r| target.log_density(&q.as_model().init.transform(&r.to_vec())))
        .collect();
    let mut est = LossEstimate::from_values(&values, 0)?;
    est.value += q.entropy();
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboRecord {
    pub iter: usize,
    pub elbo: Option<f64>,
    pub std_error: Option<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VIFit {
    pub q: MeanFieldQ,
    pub trace: Vec<ElboRecord>,
}

/// Maximizes the ELBO with reparameterized gradients and the same Adam
/// ascent, clipping and noise protocol as [`crate::optimize::train`].
pub fn meanfield_vi_fit(
    target: &dyn Target,
    init: &MeanFieldQ,
    cfg: &TrainConfig,
) -> Result<VIFit> {
    cfg.validate()?;
    let d = target.dim();
    if init.mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init.mean.len(),
        });
    }
    let mut q = init.clone();
    let mut params = q.params();
    let mut state = OptimizerState::new(&params, cfg.hyper());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut rejected_run = 0;
    for iter in 0..cfg.iterations {
        let model = q.as_model();
        let noise = sample_noise(&model, cfg.batch_size, derive_seed(cfg.seed, iter as u64));
        let n = cfg.batch_size as f64;
        let std = q.std();
        let mut g_mean = vec![0.0; d];
        let mut g_log_std = vec![1.0; d];
        let mut logps = Vec::with_capacity(cfg.batch_size);
        let mut g = vec![0.0; d];
        for r in noise.r0.rows() {
            let r = r.to_vec();
            let z = model.init.transform(&r);
            logps.push(target.log_density(&z));
            target.grad_log_density(&z, &mut g);
            for i in 0..d {
                g_mean[i] += g[i] / n;
                g_log_std[i] += g[i] * std[i] * r[i] / n;
            }
        }
        let mut grad: NamedParams = [
            ("init.mean".to_string(), g_mean),
            ("init.log_std".to_string(), g_log_std),
        ]
        .into_iter()
        .collect();
        if first_non_finite(&grad).is_some() || logps.iter().any(|l| !l.is_finite()) {
            rejected_run += 1;
            if rejected_run > 5 {
                return Err(Error::Training(format!(
                    "{rejected_run} consecutive non-finite ELBO gradients ending at iteration {iter}"
                )));
            }
            trace.push(ElboRecord {
                iter,
                elbo: None,
                std_error: None,
                grad_norm: None,
            });
            continue;
        }
        rejected_run = 0;
        let est = LossEstimate::from_values(&logps, 0)?;
        let norm = global_norm(&grad);
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                scale(&mut grad, clip / norm);
            }
        }
        trace.push(ElboRecord {
            iter,
            elbo: Some(est.value + q.entropy()),
            std_error: Some(est.std_error),
            grad_norm: Some(norm),
        });
        let factor = cfg.schedule.factor(iter, cfg.iterations);
        let (p, s) = adam_step(&params, &grad, &state, factor)?;
        params = p;
        state = s;
        q = MeanFieldQ::new(params["init.mean"].clone(), params["init.log_std"].clone())?;
    }
    Ok(VIFit { q, trace })
}
