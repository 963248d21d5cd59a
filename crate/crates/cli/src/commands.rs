//! Subcommand pipelines.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ergodic_core::baselines::{hmc_sample, tune_step_esjd, HmcConfig};
use ergodic_core::checks::{fast_checks, CheckOutcome, GradientHook};
use ergodic_core::dein::{push_forward, sample_noise, ModelSnapshot};
use ergodic_core::diagnostics::{diagnose, DiagnosticsReport};
use ergodic_core::methods::{MethodDetails, MethodRegistry, MethodSpec, ModelSpec};
use ergodic_core::optimize::{depth_sweep, train, LayerTemplate};
use ergodic_core::rng::derive_seed;
use ergodic_core::targets::{Target, TargetRegistry};
use ndarray::{Array2, ArrayView2};

use crate::config::ExperimentConfig;
use crate::csv::write_samples;
use crate::error::CliError;
use crate::report::{evaluate_thresholds, BaselineResult, GroundTruthSummary, RunReport};

/// Global flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub strict: bool,
    pub out: Option<PathBuf>,
}

// Child-seed indices under the run's master seed.
const EVAL: u64 = 101;
const GROUND_TRUTH: u64 = 102;
const DIAGNOSTICS: u64 = 103;
const BASELINES: u64 = 110;

struct Prepared {
    cfg: ExperimentConfig,
    target: Arc<dyn Target>,
    spec: ModelSpec,
    seed: u64,
}

fn prepare(mut cfg: ExperimentConfig, opts: &Options) -> Result<Prepared, CliError> {
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    let registry = TargetRegistry::builtin();
    let target = registry
        .build(&cfg.target.name, &cfg.target.params)
        .map_err(|e| match e {
            ergodic_core::Error::Unknown { .. } => {
                CliError::config_key("target.name", e.to_string())
            }
            e => CliError::from_core_config(e, "target.params"),
        })?;
    let spec = cfg.model.spec()?;
    spec.build(target.dim())
        .map_err(|e| CliError::from_core_config(e, "model"))?;
    Ok(Prepared {
        seed: cfg.train.seed,
        cfg,
        target,
        spec,
    })
}

fn runtime(e: ergodic_core::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn method_spec(p: &Prepared, hmc: HmcConfig) -> MethodSpec {
    MethodSpec {
        model: p.spec.clone(),
        train: p.cfg.train.clone(),
        hmc,
    }
}

fn ground_truth(p: &Prepared) -> Result<Option<(Array2<f64>, GroundTruthSummary)>, CliError> {
    let Some(gt) = &p.cfg.diagnostics.ground_truth else {
        return Ok(None);
    };
    let method = MethodRegistry::builtin()
        .build(&gt.method, &method_spec(p, gt.params.clone()))
        .map_err(|e| CliError::config_key("diagnostics.ground_truth.method", e.to_string()))?;
    let out = method
        .run(p.target.as_ref(), gt.n, derive_seed(p.seed, GROUND_TRUTH))
        .map_err(runtime)?;
    let acceptance_rate = match out.details {
        MethodDetails::Hmc {
            acceptance_rate, ..
        } => Some(acceptance_rate),
        _ => None,
    };
    Ok(Some((
        out.samples,
        GroundTruthSummary {
            method: gt.method.clone(),
            n: gt.n,
            acceptance_rate,
        },
    )))
}

fn run_baseline(
    name: &str,
    p: &Prepared,
    reference: Option<ArrayView2<f64>>,
    index: u64,
) -> Result<BaselineResult, CliError> {
    let b = &p.cfg.baselines;
    let seed = derive_seed(p.seed, BASELINES + index);
    let target = p.target.as_ref();
    let mut result = BaselineResult {
        method: name.to_string(),
        diagnostics: DiagnosticsReport::default(),
        acceptance_rate: None,
        low_acceptance: None,
        tuning: None,
        q: None,
        elbo_trace: vec![],
    };
    let samples = if name == "amcmc" {
        let base = HmcConfig {
            leaps: b.amcmc.leaps,
            burn_in: b.amcmc.burn_in,
            thin: 1,
            seed,
            init: None,
            ..HmcConfig::default()
        };
        let tuning =
            tune_step_esjd(target, &b.amcmc.grid, &base, b.amcmc.n_pilot).map_err(runtime)?;
        let chain = hmc_sample(
            target,
            b.n,
            &HmcConfig {
                step: tuning.best_step,
                seed: derive_seed(seed, 1),
                ..base
            },
        )
        .map_err(runtime)?;
        result.acceptance_rate = Some(chain.acceptance_rate);
        result.low_acceptance = Some(chain.low_acceptance);
        result.tuning = Some(tuning);
        chain.states
    } else {
        let method = MethodRegistry::builtin()
            .build(name, &method_spec(p, b.hmc.clone()))
            .map_err(|e| CliError::config_key("baselines.methods", e.to_string()))?;
        let out = method.run(target, b.n, seed).map_err(|e| match e {
            e @ ergodic_core::Error::Training(_) => CliError::training(e),
            e => runtime(e),
        })?;
        match out.details {
            MethodDetails::Hmc {
                acceptance_rate,
                low_acceptance,
            } => {
                result.acceptance_rate = Some(acceptance_rate);
                result.low_acceptance = Some(low_acceptance);
            }
            MethodDetails::Vi { q, trace } => {
                result.q = Some(q);
                result.elbo_trace = trace;
            }
            MethodDetails::Dein { .. } => {}
        }
        out.samples
    };
    result.diagnostics = diagnose(
        samples.view(),
        target,
        reference,
        derive_seed(seed, DIAGNOSTICS),
    )
    .map_err(runtime)?;
    Ok(result)
}

fn finish(
    mut report: RunReport,
    p: &Prepared,
    opts: &Options,
    samples: Option<&Array2<f64>>,
) -> Result<RunReport, CliError> {
    if let (Some(t), Some(d)) = (&p.cfg.thresholds, &report.diagnostics) {
        report.thresholds = Some(evaluate_thresholds(t, d));
    }
    if let (Some(path), Some(s)) = (&p.cfg.output.samples_path, samples) {
        write_samples(path, s)?;
    }
    let path = opts
        .out
        .clone()
        .or_else(|| p.cfg.output.report_path.clone());
    match &path {
        Some(path) => report.write(path)?,
        None => println!("{}", report.to_json()),
    }
    if opts.strict {
        if let Some(t) = report.thresholds.as_ref().filter(|t| !t.passed) {
            return Err(CliError::Thresholds(t.failures.clone()));
        }
    }
    Ok(report)
}

/// precondition → train → push forward → diagnostics → report.
pub fn run(cfg: ExperimentConfig, opts: &Options) -> Result<RunReport, CliError> {
    let p = prepare(cfg, opts)?;
    let target = p.target.as_ref();
    let model = p.spec.build(target.dim()).map_err(runtime)?;
    let trained = train(&model, target, &p.cfg.train).map_err(CliError::training)?;
    let noise = sample_noise(
        &trained.model,
        p.cfg.diagnostics.n_eval,
        derive_seed(p.seed, EVAL),
    );
    let samples = push_forward(&trained.model, &noise, target, false)
        .map_err(runtime)?
        .samples;
    let reference = ground_truth(&p)?;
    let ref_view = reference.as_ref().map(|(s, _)| s.view());
    let diagnostics = diagnose(
        samples.view(),
        target,
        ref_view,
        derive_seed(p.seed, DIAGNOSTICS),
    )
    .map_err(runtime)?;

    let mut report = RunReport::new("run", p.seed);
    report.precondition = Some(trained.precondition);
    report.precondition_overridden = trained.precondition_overridden;
    report.trace = trained.trace;
    report.parameters = Some(ModelSnapshot::from(&trained.model));
    report.diagnostics = Some(diagnostics);
    report.ground_truth = reference.as_ref().map(|(_, s)| s.clone());
    for (i, name) in p.cfg.baselines.methods.iter().enumerate() {
        report
            .baselines
            .push(run_baseline(name, &p, ref_view, i as u64)?);
    }
    report.config = Some(p.cfg.clone());
    finish(report, &p, opts, Some(&samples))
}

/// Runs one baseline and reports it with the same schema as `run`.
pub fn baseline(
    method: &str,
    cfg: ExperimentConfig,
    opts: &Options,
) -> Result<RunReport, CliError> {
    let p = prepare(cfg, opts)?;
    let reference = ground_truth(&p)?;
    let result = run_baseline(method, &p, reference.as_ref().map(|(s, _)| s.view()), 0)?;
    let mut report = RunReport::new(&format!("baseline {method}"), p.seed);
    report.diagnostics = Some(result.diagnostics.clone());
    report.ground_truth = reference.map(|(_, s)| s);
    report.baselines.push(result);
    report.config = Some(p.cfg.clone());
    finish(report, &p, opts, None)
}

/// Trains one model per depth and reports each final objective.
pub fn sweep(
    cfg: ExperimentConfig,
    depths: &[usize],
    opts: &Options,
) -> Result<RunReport, CliError> {
    let p = prepare(cfg, opts)?;
    let init = p
        .spec
        .init(p.target.dim())
        .map_err(|e| CliError::from_core_config(e, "model"))?;
    let tpl = LayerTemplate {
        init_step: p.spec.init_step,
        leaps: p.spec.leaps,
    };
    let entries = depth_sweep(
        &init,
        tpl,
        p.target.as_ref(),
        depths,
        &p.cfg.train,
        p.cfg.diagnostics.n_eval,
    )
    .map_err(|e| match e {
        ergodic_core::Error::Contract(m) => CliError::Usage(m),
        e => CliError::training(e),
    })?;
    for e in &entries {
        println!(
            "depth {:>3}  objective {:.5} ± {:.5}",
            e.depth, e.objective.value, e.objective.std_error
        );
    }
    let mut report = RunReport::new("sweep", p.seed);
    report.sweep = entries;
    report.config = Some(p.cfg.clone());
    finish(report, &p, opts, None)
}

/// Draws `n` samples from the model stored in a run report and writes them
/// as CSV.
pub fn sample(report_path: &Path, n: usize, opts: &Options) -> Result<(), CliError> {
    let out = opts
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("`sample` needs --out <path>".into()))?;
    let report = RunReport::read(report_path)?;
    let (Some(cfg), Some(snapshot)) = (&report.config, &report.parameters) else {
        return Err(CliError::Config {
            message: format!("{} holds no trained model", report_path.display()),
            key: None,
        });
    };
    let target = TargetRegistry::builtin()
        .build(&cfg.target.name, &cfg.target.params)
        .map_err(|e| CliError::from_core_config(e, "target.params"))?;
    let model = snapshot
        .to_model()
        .map_err(|e| CliError::from_core_config(e, "parameters"))?;
    if model.dim() != target.dim() {
        return Err(CliError::config_key(
            "parameters",
            "dimension does not match the target",
        ));
    }
    let noise = sample_noise(&model, n, opts.seed.unwrap_or(0));
    let samples = push_forward(&model, &noise, target.as_ref(), false)
        .map_err(runtime)?
        .samples;
    write_samples(out, &samples)
}

/// Prints the pass/fail table of the fast invariant suite.
pub fn check(opts: &Options, hook: Option<GradientHook>) -> Result<Vec<CheckOutcome>, CliError> {
    let outcomes = fast_checks(hook);
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    for o in &outcomes {
        println!(
            "{:<width$}  {}  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if let Some(path) = &opts.out {
        let mut report = RunReport::new("check", 0);
        report.checks = outcomes.clone();
        report.write(path)?;
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(outcomes)
    } else {
        Err(CliError::CheckFailed(failed))
    }
}
