//! Adam ascent and the fixed-budget training loop.

use serde::{Deserialize, Serialize};

use crate::dein::{sample_noise, DeinModel, InitDist};
use crate::loss::{
    ergodic_loss, ergodic_loss_grad_with, precondition_check, LossEstimate, LossMode,
    PreconditionReport, PreconditionStatus,
};
use crate::params::{check_same_layout, first_non_finite, scale, NamedParams};
use crate::rng::derive_seed;
use crate::targets::Target;
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(key, "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: NamedParams,
    pub second_moment: NamedParams,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &NamedParams, hyper: AdamHyper) -> Self {
        let zeros: NamedParams = params
            .iter()
            .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam step that *adds* `lr · m̂ / (√v̂ + ε)`.
///
/// `lr_factor` scales the learning rate for this step (schedules).
pub fn adam_step(
    params: &NamedParams,
    grad: &NamedParams,
    state: &OptimizerState,
    lr_factor: f64,
) -> Result<(NamedParams, OptimizerState)> {
    check_same_layout(params, grad)?;
    check_same_layout(params, &state.first_moment)?;
    if let Some(bad) = first_non_finite(grad) {
        return Err(Error::NonFiniteGradient(bad.to_string()));
    }
    let h = state.hyper;
    let t = state.step_count + 1;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    let lr = h.learning_rate * lr_factor;
    let mut next = state.clone();
    next.step_count = t;
    let mut out = params.clone();
    for (name, p) in out.iter_mut() {
        let g = &grad[name];
        let m = next.first_moment.get_mut(name).expect("layout checked");
        let v = next.second_moment.get_mut(name).expect("layout checked");
        for i in 0..p.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            p[i] += lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + h.epsilon);
        }
    }
    Ok((out, next))
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from 1 to `floor` over the iteration budget.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn factor(&self, iter: usize, iterations: usize) -> f64 {
        match *self {
            Self::Constant => 1.0,
            Self::Cosine { floor } => {
                let frac = iter as f64 / iterations.max(1) as f64;
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub mode: LossMode,
    pub reproducible_reduction: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
    /// Train even when the over-dispersion precondition fails.
    pub allow_failed_precondition: bool,
    /// Draws used by the precondition check.
    pub precondition_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        Self {
            iterations: 500,
            batch_size: 512,
            seed: 0,
            grad_clip: Some(10.0),
            mode: LossMode::Objective,
            reproducible_reduction: true,
            learning_rate: h.learning_rate,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.epsilon,
            schedule: LrSchedule::Constant,
            allow_failed_precondition: false,
            precondition_samples: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 16 {
            return Err(Error::param("batch_size", "must be at least 16"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::param("grad_clip", "must be positive"));
            }
        }
        if let LrSchedule::Cosine { floor } = self.schedule {
            if !(0.0..=1.0).contains(&floor) {
                return Err(Error::param("schedule.floor", "must lie in [0, 1]"));
            }
        }
        if self.precondition_samples < 2 {
            return Err(Error::param("precondition_samples", "must be at least 2"));
        }
        self.hyper().validate()
    }
}

/// Per-iteration training record. Rejected steps carry the reason and no
/// estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: Option<f64>,
    pub total: Option<f64>,
    pub std_error: Option<f64>,
    pub n_divergent: usize,
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DeinModel,
    pub trace: Vec<IterRecord>,
    pub precondition: PreconditionReport,
    /// The precondition failed and `allow_failed_precondition` was set.
    pub precondition_overridden: bool,
}

const MAX_CONSECUTIVE_REJECTIONS: usize = 5;

/// Maximizes the selected estimator for `cfg.iterations` steps, drawing
/// fresh noise from `derive_seed(cfg.seed, iter)` each iteration.
pub fn train(model: &DeinModel, target: &dyn Target, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let precondition = precondition_check(
        model,
        target,
        cfg.precondition_samples,
        derive_seed(cfg.seed, u64::MAX),
    )?;
    let failed = precondition.status == PreconditionStatus::Failed;
    if failed && !cfg.allow_failed_precondition {
        return Err(Error::Precondition(format!(
            "E_q0[log π*] = {:.4} is not below E_π[log π*] = {:.4}",
            precondition.q0_expected_logp.value,
            precondition.target_expected_logp.unwrap_or(f64::NAN)
        )));
    }
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    if cfg.iterations > 0 {
        let mut params = model.trainable_params();
        let mut state = OptimizerState::new(&params, cfg.hyper());
        let mut rejected_run = 0;
        for iter in 0..cfg.iterations {
            let noise = sample_noise(&model, cfg.batch_size, derive_seed(cfg.seed, iter as u64));
            let record = match ergodic_loss_grad_with(
                &model,
                target,
                &noise,
                cfg.mode,
                cfg.reproducible_reduction,
            ) {
                Ok(g) => {
                    let norm = g.norm();
                    let mut step = g.by_name;
                    if let Some(clip) = cfg.grad_clip {
                        if norm > clip {
                            scale(&mut step, clip / norm);
                        }
                    }
                    let factor = cfg.schedule.factor(iter, cfg.iterations);
                    let (p, s) = adam_step(&params, &step, &state, factor)?;
                    params = p;
                    state = s;
                    model.set_params(&params)?;
                    rejected_run = 0;
                    IterRecord {
                        iter,
                        objective: Some(g.objective.value),
                        total: Some(g.total.value),
                        std_error: Some(g.value.std_error),
                        n_divergent: g.value.n_divergent,
                        grad_norm: Some(norm),
                        rejected: None,
                    }
                }
                Err(e @ (Error::TooManyDivergent { .. } | Error::NonFiniteGradient(_))) => {
                    rejected_run += 1;
                    if rejected_run > MAX_CONSECUTIVE_REJECTIONS {
                        return Err(Error::Training(format!(
                            "{rejected_run} consecutive rejected steps ending at iteration {iter}: {e}"
                        )));
                    }
                    IterRecord {
                        iter,
                        objective: None,
                        total: None,
                        std_error: None,
                        n_divergent: match e {
                            Error::TooManyDivergent { divergent, .. } => divergent,
                            _ => 0,
                        },
                        grad_norm: None,
                        rejected: Some(e.to_string()),
                    }
                }
                Err(e) => return Err(e),
            };
            trace.push(record);
        }
    }
    Ok(TrainOutcome {
        model,
        trace,
        precondition,
        precondition_overridden: failed,
    })
}

/// Evaluation of one depth in [`depth_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub depth: usize,
    pub objective: LossEstimate,
}

/// Layer template shared by every depth of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTemplate {
    pub init_step: f64,
    pub leaps: usize,
}

/// Trains one model per depth from the same `q₀` and seed, then evaluates
/// each final objective on `n_eval` rows of common noise.
pub fn depth_sweep(
    init: &InitDist,
    layer: LayerTemplate,
    target: &dyn Target,
    depths: &[usize],
    cfg: &TrainConfig,
    n_eval: usize,
) -> Result<Vec<SweepEntry>> {
    if depths.is_empty() {
        return Err(Error::Contract(
            "depth sweep needs at least one depth".into(),
        ));
    }
    if depths.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract("depths must be non-decreasing".into()));
    }
    let eval_seed = derive_seed(cfg.seed, u64::MAX - 1);
    depths
        .iter()
        .map(|&depth| {
            let model = DeinModel::stack(init.clone(), depth, layer.init_step, layer.leaps)?;
            let trained = train(&model, target, cfg)?.model;
            let noise = sample_noise(&trained, n_eval, eval_seed);
            Ok(SweepEntry {
                depth,
                objective: ergodic_loss(&trained, target, &noise)?.objective,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Gaussian;

    fn one(name: &str, v: f64) -> NamedParams {
        [(name.to_string(), vec![v])].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = one("x", 1.5);
        let s = OptimizerState::new(&p, AdamHyper::default());
        let (q, s2) = adam_step(&p, &one("x", 0.0), &s, 1.0).unwrap();
        assert_eq!(q, p);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let hyper = AdamHyper {
            learning_rate: 0.01,
            ..AdamHyper::default()
        };
        for g in [3.7, -0.002, 250.0] {
            let p = one("x", 0.0);
            let (q, _) = adam_step(&p, &one("x", g), &OptimizerState::new(&p, hyper), 1.0).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let want = 0.01 * g / (g.abs() + 1e-8);
            assert!((q["x"][0] - want).abs() < 1e-12);
            assert!((q["x"][0] - 0.01 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn repeated_gradient_does_not_grow_step() {
        let p = one("x", 0.0);
        let s = OptimizerState::new(&p, AdamHyper::default());
        let g = one("x", 2.0);
        let (p1, s1) = adam_step(&p, &g, &s, 1.0).unwrap();
        let (p2, _) = adam_step(&p1, &g, &s1, 1.0).unwrap();
        let first = p1["x"][0] - p["x"][0];
        let second = p2["x"][0] - p1["x"][0];
        assert!(second.abs() <= first.abs() + 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let p = one("x", 0.0);
        let s = OptimizerState::new(&p, AdamHyper::default());
        assert!(matches!(
            adam_step(&p, &one("x", f64::NAN), &s, 1.0),
            Err(Error::NonFiniteGradient(_))
        ));
        assert!(adam_step(&p, &one("y", 1.0), &s, 1.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { floor: 0.1 };
        assert!((s.factor(0, 100) - 1.0).abs() < 1e-15);
        assert!((s.factor(50, 100) - 0.55).abs() < 1e-12);
        assert!((s.factor(100, 100) - 0.1).abs() < 1e-12);
    }

    fn small_model() -> DeinModel {
        DeinModel::stack(
            InitDist::new(vec![0.0; 2], vec![2f64.ln(); 2], false),
            2,
            0.2,
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_return_model_unchanged() {
        let m = small_model();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(&m, &Gaussian::std_normal(2), &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_improves_objective() {
        let t = Gaussian::correlated(2, 0.9, vec![0.0; 2]).unwrap();
        let cfg = TrainConfig {
            iterations: 60,
            batch_size: 128,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&small_model(), &t, &cfg).unwrap();
        let b = train(&small_model(), &t, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
        let obj: Vec<f64> = a.trace.iter().map(|r| r.objective.unwrap()).collect();
        let head = obj[..10].iter().sum::<f64>() / 10.0;
        let tail = obj[obj.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail >= head, "{head} -> {tail}");
    }

    #[test]
    fn failed_precondition_needs_override() {
        let m = DeinModel::stack(
            InitDist::new(vec![0.0; 2], vec![0.5f64.ln(); 2], false),
            1,
            0.2,
            3,
        )
        .unwrap();
        let t = Gaussian::std_normal(2);
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&m, &t, &cfg), Err(Error::Precondition(_))));
        let out = train(
            &m,
            &t,
            &TrainConfig {
                allow_failed_precondition: true,
                ..cfg
            },
        )
        .unwrap();
        assert!(out.precondition_overridden);
    }

    #[test]
    fn batch_size_below_sixteen_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        assert!(train(&small_model(), &Gaussian::std_normal(2), &cfg).is_err());
    }

    #[test]
    fn repeated_depths_give_identical_objectives() {
        let t = Gaussian::std_normal(2);
        let init = InitDist::new(vec![0.0; 2], vec![2f64.ln(); 2], false);
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let tpl = LayerTemplate {
            init_step: 0.2,
            leaps: 2,
        };
        let s = depth_sweep(&init, tpl, &t, &[1, 1], &cfg, 200).unwrap();
        assert_eq!(s[0], s[1]);
        assert!(depth_sweep(&init, tpl, &t, &[2, 1], &cfg, 200).is_err());
    }
}
