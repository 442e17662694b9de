use proptest::prelude::*;

use riskgrad::benchmarks;
use riskgrad::linalg::{self, Mat, Vector};
use riskgrad::lti::{self, LinearGaussianPolicy, LtiSystem};
use riskgrad::risk::{self, ChanceSpec};
use riskgrad::sample_pg::{self, Batch};

/// Symmetric positive definite matrix `M Mᵀ / n + shift·I`.
fn spd(entries: &[f64], n: usize, shift: f64) -> Mat {
    let m = Mat::from_row_slice(n, n, &entries[..n * n]);
    (&m * m.transpose()) / n as f64 + Mat::identity(n, n) * shift
}

fn random_system() -> impl Strategy<Value = LtiSystem> {
    (1usize..=6, 1usize..=3)
        .prop_flat_map(|(n, p)| {
            let p = p.min(n);
            (
                Just((n, p)),
                prop::collection::vec(-1.0..1.0f64, n * n),
                prop::collection::vec(-1.0..1.0f64, n * p),
                prop::collection::vec(-1.0..1.0f64, 3 * n * n),
                prop::collection::vec(-1.0..1.0f64, p * p),
                0.3..1.3f64,
            )
        })
        .prop_map(|((n, p), a, b, w, r, radius)| {
            let mut a = Mat::from_row_slice(n, n, &a);
            let rho = lti::spectral_radius(&a).unwrap();
            if rho > 0.0 {
                a *= radius / rho;
            }
            let b = Mat::from_row_slice(n, p, &b) + Mat::identity(n, p);
            let q = spd(&w[..n * n], n, 0.5);
            let sw = spd(&w[n * n..2 * n * n], n, 0.1);
            let r = spd(&r, p, 0.5);
            LtiSystem::new(a, b, q, r, sw).unwrap()
        })
}

fn uav_perturbed_gain() -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0..1.0f64, 8).prop_map(|z| {
        let k = lti::lqr_gain(&benchmarks::uav_system()).unwrap();
        &k + Mat::from_row_slice(2, 4, &z) * (0.3 * k.norm())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn dare_and_lyapunov_residuals(sys in random_system()) {
        let s = lti::solve_dare(&sys).unwrap();
        prop_assert!(lti::dare_residual(&sys, &s).unwrap() <= 1e-9 * s.norm().max(1.0));
        prop_assert!(linalg::min_sym_eigenvalue(&s) >= -1e-9);
        let k = lti::lqr_gain(&sys).unwrap();
        prop_assert!(lti::is_stabilizing(&sys, &k).unwrap());
        let acl = sys.closed_loop(&k).unwrap();
        let x = lti::solve_lyapunov(&acl, sys.sigma_w()).unwrap();
        prop_assert!(lti::lyapunov_residual(&acl, sys.sigma_w(), &x) <= 1e-10 * x.norm().max(1.0));
        prop_assert!(linalg::is_symmetric(&x, 1e-10 * x.norm().max(1.0)));
        prop_assert!(linalg::min_sym_eigenvalue(&x) >= -1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cost_forms_agree_and_stationary_matrices_are_psd(k in uav_perturbed_gain()) {
        let sys = benchmarks::uav_system();
        prop_assume!(lti::is_stabilizing(&sys, &k).unwrap());
        let policy = benchmarks::uav_policy(k.clone());
        let (a, b) = risk::cost_j_forms(&k, &sys, &policy).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs());
        let st = risk::Stationary::new(&k, &sys, &policy).unwrap();
        prop_assert!(linalg::min_sym_eigenvalue(&st.sigma_k) >= -1e-9 * st.sigma_k.norm());
        prop_assert!(linalg::min_sym_eigenvalue(&st.p_k) >= -1e-9 * st.p_k.norm());
    }

    #[test]
    fn violation_probability_is_a_monotone_probability(k in uav_perturbed_gain()) {
        let sys = benchmarks::uav_system();
        prop_assume!(lti::is_stabilizing(&sys, &k).unwrap());
        let policy = benchmarks::uav_policy(k.clone());
        let chance = benchmarks::uav_chance(0.0);
        let mut prev = 1.0;
        for i in 0..40 {
            let eps = 0.25 * i as f64;
            let jc = risk::cost_jc(&k, &sys, &chance.with_eps(eps), &policy).unwrap();
            prop_assert!((0.0..=1.0).contains(&jc));
            prop_assert!(jc <= prev);
            prev = jc;
        }
    }

    #[test]
    fn fisher_and_gauss_newton_estimates_are_psd(
        xs in prop::collection::vec(-3.0..3.0f64, 4 * 12),
        us in prop::collection::vec(-3.0..3.0f64, 2 * 12),
        adv in prop::collection::vec(-50.0..50.0f64, 12),
        len in 1usize..=12,
    ) {
        let policy = benchmarks::uav_policy(benchmarks::uav_initial_gain());
        let batch = Batch {
            xs: (0..len).map(|i| Vector::from_column_slice(&xs[4 * i..4 * i + 4])).collect(),
            us: (0..len).map(|i| Vector::from_column_slice(&us[2 * i..2 * i + 2])).collect(),
            advantages: adv[..len].to_vec(),
        };
        for m in [sample_pg::estimate_f(&batch, &policy).unwrap(), sample_pg::estimate_ha(&batch, &policy).unwrap()] {
            prop_assert!(linalg::is_symmetric(&m, 1e-12 * m.norm().max(1.0)));
            prop_assert!(linalg::min_sym_eigenvalue(&m) >= -1e-10 * m.norm().max(1.0));
        }
    }

    #[test]
    fn critic_gauss_newton_is_psd(xs in prop::collection::vec(-5.0..5.0f64, 4 * 8), seed in 0u64..1000) {
        let critic = sample_pg::CriticNet::new(4, seed);
        let states: Vec<Vector> = xs.chunks(4).map(Vector::from_column_slice).collect();
        let h = sample_pg::critic_gauss_newton(&critic, &states).unwrap();
        prop_assert!(linalg::is_symmetric(&h, 1e-12 * h.norm().max(1.0)));
        prop_assert!(linalg::min_sym_eigenvalue(&h) >= -1e-10 * h.norm().max(1.0));
    }

    #[test]
    fn gae_recursion_equals_direct_sum(
        rewards in prop::collection::vec(-10.0..10.0f64, 1..40),
        values in prop::collection::vec(-10.0..10.0f64, 41),
        gamma in 0.0..1.0f64,
        eta in 0.0..1.0f64,
    ) {
        let t = rewards.len();
        let v = &values[..t + 1];
        let fast = sample_pg::gae_from_values(&rewards, v, gamma, eta).unwrap();
        for k in 0..t {
            let mut direct = 0.0;
            for l in 0..t - k {
                let delta = -v[k + l] + rewards[k + l] + eta * v[k + l + 1];
                direct += (gamma * eta).powi(l as i32) * delta;
            }
            prop_assert!((fast[k] - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }
}

#[test]
fn lagrangian_blows_up_toward_the_instability_boundary() {
    let sys = benchmarks::scalar_system();
    let chance = ChanceSpec::new(vec![1.0], 2.0, 0.1, 10.0).unwrap();
    let policy = LinearGaussianPolicy::deterministic(Mat::zeros(1, 1));
    // closed loop 0.5 − K reaches −1 at K = 1.5
    let (ka, kb) = (0.5, 1.5);
    let at = |t: f64| {
        let k = Mat::from_element(1, 1, (1.0 - t) * ka + t * kb);
        risk::lagrangian(&k, &sys, &chance, &policy).unwrap()
    };
    let base = at(0.0);
    let vals: Vec<f64> = [0.9, 0.99, 0.999].iter().map(|t| at(*t)).collect();
    assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
    assert!(vals[2] > 1e3 * base, "{} vs {}", vals[2], base);
}

#[test]
fn monte_carlo_violation_gradient_is_unbiased() {
    let sys = benchmarks::uav_system();
    let chance = benchmarks::uav_chance(0.0);
    let k = benchmarks::uav_initial_gain();
    let policy = benchmarks::uav_policy(k.clone());
    let seeds = 20;
    let mut mean = Mat::zeros(2, 4);
    let mut var = Mat::zeros(2, 4);
    for s in 0..seeds {
        let g = risk::grad_analytic(&k, &sys, &chance, &policy, 50_000, 1000 + s).unwrap();
        let se = g.grad_jc_stderr.clone().unwrap();
        mean += &g.grad_jc / seeds as f64;
        var += se.component_mul(&se) / (seeds * seeds) as f64;
    }
    let h = 1e-6;
    for i in 0..2 {
        for j in 0..4 {
            let mut kp = k.clone();
            kp[(i, j)] += h;
            let mut km = k.clone();
            km[(i, j)] -= h;
            let fd = (risk::cost_jc(&kp, &sys, &chance, &policy).unwrap()
                - risk::cost_jc(&km, &sys, &chance, &policy).unwrap())
                / (2.0 * h);
            let sigma = var[(i, j)].sqrt();
            assert!((mean[(i, j)] - fd).abs() <= 3.0 * sigma + 1e-8, "entry ({i},{j}): {} vs {fd} (σ {sigma})", mean[(i, j)]);
        }
    }
}
