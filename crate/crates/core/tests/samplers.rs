use ergodic_core::baselines::{hmc_sample, meanfield_vi_fit, HmcConfig, MeanFieldQ};
use ergodic_core::dein::{sample_noise, DeinModel, InitDist};
use ergodic_core::diagnostics::{ks_test_1d, normal_cdf};
use ergodic_core::loss::{ergodic_loss_grad, LossMode};
use ergodic_core::methods::{MethodDetails, MethodRegistry, MethodSpec};
use ergodic_core::optimize::{depth_sweep, LayerTemplate, TrainConfig};
use ergodic_core::targets::Gaussian;

#[test]
fn hmc_chain_is_stationary_on_a_standard_normal() {
    let target = Gaussian::std_normal(2);
    let chain = hmc_sample(
        &target,
        20_000,
        &HmcConfig {
            step: 0.3,
            leaps: 5,
            burn_in: 500,
            thin: 5,
            seed: 3,
            init: None,
        },
    )
    .unwrap();
    assert!(chain.acceptance_rate > 0.9);
    for col in chain.states.columns() {
        let xs: Vec<f64> = col.to_vec();
        assert!(
            ks_test_1d(&xs, |x| normal_cdf(x, 0.0, 1.0))
                .unwrap()
                .pass_at_01
        );
    }
}

#[test]
fn vi_recovers_a_shifted_isotropic_gaussian() {
    let target = Gaussian::new(
        "shifted",
        vec![2.0, -1.0],
        nalgebra::DMatrix::from_diagonal_element(2, 2, 0.25),
    )
    .unwrap();
    let q0 = MeanFieldQ::new(vec![0.0; 2], vec![0.0; 2]).unwrap();
    let fit = meanfield_vi_fit(&target, &q0, &TrainConfig::default()).unwrap();
    assert!((fit.q.mean[0] - 2.0).abs() < 0.05 && (fit.q.mean[1] + 1.0).abs() < 0.05);
    for s in fit.q.std() {
        assert!((s - 0.5).abs() < 0.05);
    }
    let first = fit.trace.first().unwrap().elbo;
    let last = fit.trace.last().unwrap().elbo;
    assert!(last > first);
}

#[test]
fn gradient_estimates_agree_across_batch_sizes() {
    let target = Gaussian::correlated(2, 0.9, vec![0.0; 2]).unwrap();
    let model = DeinModel::stack(
        InitDist::new(vec![0.0; 2], vec![2f64.ln(); 2], true),
        2,
        0.1,
        3,
    )
    .unwrap();
    let small = ergodic_loss_grad(
        &model,
        &target,
        &sample_noise(&model, 4096, 1),
        LossMode::Objective,
    )
    .unwrap();
    let large = ergodic_loss_grad(
        &model,
        &target,
        &sample_noise(&model, 8192, 2),
        LossMode::Objective,
    )
    .unwrap();
    for (name, a) in &small.by_name {
        let b = &large.by_name[name];
        for i in 0..a.len() {
            let se = (small.std_error[name][i].powi(2) + large.std_error[name][i].powi(2)).sqrt();
            assert!(
                (a[i] - b[i]).abs() < 5.0 * se + 1e-12,
                "{name}[{i}]: {} vs {}",
                a[i],
                b[i]
            );
        }
    }
}

#[test]
fn depth_sweep_rejects_decreasing_depths() {
    let target = Gaussian::std_normal(2);
    let init = InitDist::new(vec![0.0; 2], vec![0.0; 2], false);
    let tpl = LayerTemplate {
        init_step: 0.1,
        leaps: 2,
    };
    let cfg = TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    };
    assert!(depth_sweep(&init, tpl, &target, &[2, 1], &cfg, 100).is_err());
}

#[test]
fn registry_methods_run_behind_the_trait() {
    let target = Gaussian::std_normal(2);
    let mut spec = MethodSpec::default();
    spec.train.iterations = 5;
    spec.model.depth = 2;
    let reg = MethodRegistry::builtin();
    for name in ["dein", "hmc", "vi"] {
        let out = reg.build(name, &spec).unwrap().run(&target, 50, 4).unwrap();
        assert_eq!(out.samples.dim(), (50, 2));
        let matches = matches!(
            (name, &out.details),
            ("dein", MethodDetails::Dein { .. })
                | ("hmc", MethodDetails::Hmc { .. })
                | ("vi", MethodDetails::Vi { .. })
        );
        assert!(matches, "{name}");
    }
}
