use approx::assert_relative_eq;
use ergodic_core::dein::{sample_noise, DeinModel, InitDist};
use ergodic_core::diagnostics::mmd2_unbiased;
use ergodic_core::loss::{ergodic_loss, per_layer_gap, LossEstimate};
use ergodic_core::optimize::{adam_step, AdamHyper, LrSchedule, OptimizerState};
use ergodic_core::targets::{Banana, Gaussian, Target};
use ergodic_core::transforms::{leapfrog_forward, mh_transform, LeapfrogLayer, MhState};
use ergodic_core::NamedParams;
use ndarray::Array2;
use proptest::prelude::*;

fn vec_in(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, d)
}

fn layer(d: usize, log_step: Vec<f64>, log_mass: Vec<f64>, leaps: usize) -> LeapfrogLayer {
    LeapfrogLayer {
        log_step: log_step[..d].to_vec(),
        log_mass: log_mass[..d].to_vec(),
        leaps,
        mh_correct: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_run_flip_is_identity(
        z in vec_in(2, -2.0, 2.0),
        r in vec_in(2, -2.0, 2.0),
        log_step in vec_in(2, -4.0, -1.5),
        log_mass in vec_in(2, -0.5, 0.5),
        leaps in 1usize..8,
        banana in any::<bool>(),
    ) {
        let target: Box<dyn Target> = if banana {
            Box::new(Banana::new(0.1, 2.0))
        } else {
            Box::new(Gaussian::correlated(2, 0.9, vec![0.0; 2]).unwrap())
        };
        let l = layer(2, log_step, log_mass, leaps);
        let (z1, r1, _) = leapfrog_forward(&z, &r, &l, target.as_ref()).unwrap();
        let neg: Vec<f64> = r1.iter().map(|x| -x).collect();
        let (z2, r2, _) = leapfrog_forward(&z1, &neg, &l, target.as_ref()).unwrap();
        for i in 0..2 {
            prop_assert!((z2[i] - z[i]).abs() < 1e-10);
            prop_assert!((r2[i] + r[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_gaps_telescope(
        depth in 1usize..5,
        step in 0.02f64..0.4,
        leaps in 1usize..6,
        seed in any::<u64>(),
    ) {
        let target = Gaussian::correlated(2, 0.5, vec![0.5, -0.5]).unwrap();
        let init = InitDist::new(vec![0.0; 2], vec![0.5; 2], false);
        let model = DeinModel::stack(init, depth, step, leaps).unwrap();
        let noise = sample_noise(&model, 64, seed);
        let total = ergodic_loss(&model, &target, &noise).unwrap().total.value;
        let sum: f64 = per_layer_gap(&model, &target, &noise).unwrap().iter().map(|g| g.value).sum();
        prop_assert!((sum - total).abs() <= 1e-12 * total.abs().max(1.0));
    }

    #[test]
    fn mmd_is_symmetric_and_zero_on_itself(
        a in prop::collection::vec(-3.0f64..3.0, 20..60),
        b in prop::collection::vec(-3.0f64..3.0, 20..60),
        h in 0.2f64..3.0,
    ) {
        let a = Array2::from_shape_vec((a.len() / 2, 2), a[..a.len() / 2 * 2].to_vec()).unwrap();
        let b = Array2::from_shape_vec((b.len() / 2, 2), b[..b.len() / 2 * 2].to_vec()).unwrap();
        let ab = mmd2_unbiased(a.view(), b.view(), h).unwrap();
        let ba = mmd2_unbiased(b.view(), a.view(), h).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(mmd2_unbiased(a.view(), a.view(), h).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mh_map_is_an_involution(
        z in vec_in(3, -5.0, 5.0),
        r in vec_in(3, -5.0, 5.0),
        u in 0.0f64..1.0,
        p in 0.0f64..1.0,
    ) {
        let s = MhState { z, r, u };
        prop_assert_eq!(mh_transform(mh_transform(s.clone(), p), p), s);
    }

    #[test]
    fn first_adam_step_moves_each_entry_by_the_learning_rate(
        params in vec_in(5, -3.0, 3.0),
        grad in vec_in(5, -10.0, 10.0),
        lr in 1e-4f64..0.5,
    ) {
        prop_assume!(grad.iter().all(|g| g.abs() > 1e-3));
        let p: NamedParams = [("w".to_string(), params.clone())].into_iter().collect();
        let g: NamedParams = [("w".to_string(), grad.clone())].into_iter().collect();
        let hyper = AdamHyper { learning_rate: lr, ..AdamHyper::default() };
        let (next, state) = adam_step(&p, &g, &OptimizerState::new(&p, hyper), 1.0).unwrap();
        prop_assert_eq!(state.step_count, 1);
        for i in 0..5 {
            let moved = next["w"][i] - params[i];
            prop_assert!((moved - lr * grad[i].signum()).abs() <= 1e-5 * lr);
        }
    }

    #[test]
    fn cosine_factor_decays_within_bounds(floor in 0.0f64..1.0, iterations in 1usize..2000) {
        let s = LrSchedule::Cosine { floor };
        let mut prev = s.factor(0, iterations);
        prop_assert!((prev - 1.0).abs() < 1e-12);
        for i in 1..=iterations {
            let f = s.factor(i, iterations);
            prop_assert!(f <= prev + 1e-15 && f >= floor - 1e-15);
            prev = f;
        }
        prop_assert!((prev - floor).abs() < 1e-12);
    }

    #[test]
    fn loss_estimate_matches_sum_of_squares_formula(values in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        let n = values.len() as f64;
        let est = LossEstimate::from_values(&values, 0).unwrap();
        let mean = values.iter().sum::<f64>() / n;
        let sum_sq: f64 = values.iter().map(|v| v * v).sum();
        let var = (sum_sq - n * mean * mean) / (n - 1.0);
        assert_relative_eq!(est.value, mean, epsilon = 1e-9);
        assert_relative_eq!(est.std_error, (var.max(0.0) / n).sqrt(), epsilon = 1e-6, max_relative = 1e-6);
    }
}
