use deqgp::dual::hermite_coefficients;
use deqgp::gp::{gp_predict, Dataset, JitterSchedule, Split};
use deqgp::inputs::random_unit_inputs;
use deqgp::kernel::{
    bivariate_expectation, closed_form_expectation, kernel_recursion, limit_kernel,
    BivariateGaussianSpec, KernelMatrix, KernelOptions,
};
use deqgp::model::{contraction_gamma, ActivationKind, ModelConfig};
use deqgp::simulator::{
    empirical_kernel, finite_depth_forward, forward_fixed_point, init_params, EmpiricalMode,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn activation() -> impl Strategy<Value = ActivationKind> {
    prop_oneof![
        Just(ActivationKind::Tanh),
        Just(ActivationKind::Relu),
        Just(ActivationKind::Erf),
        Just(ActivationKind::Identity),
        prop::collection::vec(-2.0..2.0f64, 1..5)
            .prop_map(|coefficients| ActivationKind::Polynomial { coefficients }),
    ]
}

fn spec(max_var: f64) -> impl Strategy<Value = BivariateGaussianSpec> {
    (0.05..max_var, 0.05..max_var, -1.0..1.0f64)
        .prop_map(|(a, b, r)| BivariateGaussianSpec::new(a, b, r * (a * b).sqrt()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contraction_flag_matches_gamma(sigma_w in 0.0..1.0f64) {
        let cfg = ModelConfig::new(3, 1, 4).with_sigma_w(sigma_w);
        prop_assert_eq!(cfg.contraction_ok(), contraction_gamma(&cfg) < 1.0);
    }

    #[test]
    fn activations_are_pure(act in activation(), x in -50.0..50.0f64) {
        prop_assert_eq!(act.eval(x).to_bits(), act.eval(x).to_bits());
    }

    #[test]
    fn fixed_point_is_deterministic(seed in any::<u64>(), width in 4usize..64) {
        let cfg = ModelConfig::new(5, 2, width);
        let x = random_unit_inputs(5, 1, seed ^ 1)[0].clone();
        let a = forward_fixed_point(&init_params(&cfg, seed).unwrap(), &x).unwrap();
        let b = forward_fixed_point(&init_params(&cfg, seed).unwrap(), &x).unwrap();
        prop_assert_eq!(a.h_star, b.h_star);
        prop_assert_eq!(a.residual_trace, b.residual_trace);
    }

    #[test]
    fn trajectory_obeys_contraction_bound(seed in any::<u64>(), sigma_w in 0.02..0.34f64) {
        let cfg = ModelConfig::new(5, 1, 128).with_sigma_w(sigma_w);
        let gamma = contraction_gamma(&cfg);
        let p = init_params(&cfg, seed).unwrap();
        let x = random_unit_inputs(5, 1, seed.wrapping_add(9))[0].clone();
        let traj: Vec<DVector<f64>> = (2..=15).map(|d| finite_depth_forward(&p, &x, d).unwrap()).collect();
        let h1 = traj[0].norm();
        for l in 0..traj.len() {
            let lf = (l + 1) as i32;
            prop_assert!(traj[l].norm() <= (1.0 - gamma.powi(lf)) / (1.0 - gamma) * h1 + 1e-9);
            for k in l..traj.len() {
                let bound = gamma.powi(lf) * (1.0 - gamma.powi((k - l) as i32)) / (1.0 - gamma) * h1;
                prop_assert!((&traj[l] - &traj[k]).norm() <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn empirical_kernel_symmetric_nonnegative_diagonal(seed in any::<u64>(), depth in 1usize..12) {
        let cfg = ModelConfig::new(4, 1, 32);
        let p = init_params(&cfg, seed).unwrap();
        let xs = random_unit_inputs(4, 5, seed ^ 7);
        for mode in [EmpiricalMode::Depth(depth), EmpiricalMode::FixedPoint] {
            let k = empirical_kernel(&p, &xs, mode).unwrap().to_dmatrix();
            prop_assert_eq!(&k, &k.transpose());
            prop_assert!(k.diagonal().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn kernel_json_round_trip(seed in any::<u64>(), count in 1usize..6) {
        let xs = random_unit_inputs(3, count, seed);
        let k = deqgp::kernel::sigma1(&xs, 3f64.sqrt()).unwrap();
        let back: KernelMatrix = serde_json::from_str(&serde_json::to_string(&k).unwrap()).unwrap();
        prop_assert_eq!(back, k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn smooth_quadrature_is_converged(s in spec(4.0), tanh in any::<bool>()) {
        let act = if tanh { ActivationKind::Tanh } else { ActivationKind::Erf };
        let lo = bivariate_expectation(&act, &s, 64).unwrap();
        let hi = bivariate_expectation(&act, &s, 128).unwrap();
        prop_assert!((lo - hi).abs() <= 1e-9, "{:?}: {} vs {}", s, lo, hi);
    }

    #[test]
    fn smooth_quadrature_converges_at_larger_variance(s in spec(100.0), tanh in any::<bool>()) {
        let act = if tanh { ActivationKind::Tanh } else { ActivationKind::Erf };
        let lo = bivariate_expectation(&act, &s, 128).unwrap();
        let hi = bivariate_expectation(&act, &s, 256).unwrap();
        prop_assert!((lo - hi).abs() <= 1e-9, "{:?}: {} vs {}", s, lo, hi);
    }

    #[test]
    fn closed_forms_agree_with_quadrature(s in spec(4.0), relu in any::<bool>()) {
        let act = if relu { ActivationKind::Relu } else { ActivationKind::Identity };
        let q = bivariate_expectation(&act, &s, 64).unwrap();
        let c = closed_form_expectation(&act, &s).unwrap();
        prop_assert!((q - c).abs() <= 1e-8, "{:?}: {} vs {}", s, q, c);
    }

    #[test]
    fn erf_closed_form_agrees_with_quadrature(s in spec(25.0)) {
        let q = bivariate_expectation(&ActivationKind::Erf, &s, 64).unwrap();
        let c = closed_form_expectation(&ActivationKind::Erf, &s).unwrap();
        prop_assert!((q - c).abs() <= 1e-8, "{:?}: {} vs {}", s, q, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn recursion_levels_share_the_diagonal(seed in any::<u64>(), act in activation()) {
        let xs = random_unit_inputs(6, 5, seed);
        let mut cfg = ModelConfig::new(6, 1, 8).with_activation(act);
        cfg.sigma_w = 0.2;
        for level in kernel_recursion(&xs, &cfg, &KernelOptions::default(), 8).unwrap() {
            let d = level.diagonal();
            let spread = d.iter().fold(0.0f64, |m, v| m.max((v - d[0]).abs()));
            prop_assert!(spread <= 1e-12 * d[0].abs().max(1.0));
        }
    }

    #[test]
    fn bessel_inequality(c in 0.0..3.0f64, act in activation()) {
        let e = hermite_coefficients(&act, c, 30, 76).unwrap();
        // parseval_defect is |E mu^2 - sum a_n^2|; Bessel says the sum is the smaller.
        let rule = deqgp::quadrature::NormalRule::split(act.kinks(), 40.0, 24);
        let scale = (c + 1.0).sqrt();
        let second = rule.expect(|z| act.eval(scale * z).powi(2));
        prop_assert!(e.total_mass() <= second + 1e-8, "{} > {}", e.total_mass(), second);
    }

    #[test]
    fn limit_kernel_is_strictly_positive_definite(seed in any::<u64>()) {
        let xs = random_unit_inputs(10, 10, seed);
        let k = limit_kernel(&xs, &ModelConfig::new(10, 1, 8), &KernelOptions::default()).unwrap().kernel;
        prop_assert!(k.min_eigenvalue() > 0.0);
    }

    #[test]
    fn argmax_invariant_under_kernel_scale(seed in any::<u64>(), scale in 0.01..100.0f64) {
        let xs = random_unit_inputs(6, 12, seed);
        let m = DMatrix::from_fn(12, 6, |i, j| xs[i][j]);
        let k = (&m * m.transpose()).map(|v| (2.0 * v).exp());
        let train = k.view((0, 0), (8, 8)).into_owned();
        let cross = k.view((8, 0), (4, 8)).into_owned();
        let y = deqgp::gp::one_hot(&[0, 1, 2, 0, 1, 2, 0, 1], 3, true).unwrap();
        let a = gp_predict(&train, &cross, &y, &JitterSchedule(vec![1e-6])).unwrap();
        let b = gp_predict(&(&train * scale), &(&cross * scale), &y, &JitterSchedule(vec![1e-6 * scale])).unwrap();
        prop_assert_eq!(a.predicted_classes(), b.predicted_classes());
    }

    #[test]
    fn dedup_is_idempotent(labels in prop::collection::vec(0usize..3, 6), pick in prop::collection::vec(0usize..3, 6)) {
        let base = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let rows = DMatrix::from_fn(6, 2, |i, j| base[pick[i]][j] * (1 + i) as f64);
        let mut d = Dataset::new(rows, labels, Split::Train).unwrap();
        d.dedup_majority();
        let n = d.len();
        prop_assert_eq!(d.dedup_majority(), 0);
        prop_assert_eq!(d.len(), n);
    }
}
