//! The fourth-order UAV benchmark (two decoupled double integrators) and the
//! scalar plants used throughout the tests.

use crate::linalg::Mat;
use crate::lti::{LinearGaussianPolicy, LtiSystem};
use crate::risk::ChanceSpec;

pub const UAV_EPS: f64 = 5.0;
pub const UAV_Q_DIRECTION: [f64; 4] = [1.0, 0.1, 2.0, 0.2];
/// Input-channel noise variances; enter the state through `B`.
pub const UAV_INPUT_NOISE: [f64; 2] = [80.0, 0.01];
pub const UAV_DEFAULT_DELTA: f64 = 0.1;
pub const UAV_LAMBDA_GRID: [f64; 7] = [1.0, 5.0, 10.0, 15.0, 20.0, 50.0, 100.0];
pub const UAV_DELTA_GRID: [f64; 4] = [0.150, 0.135, 0.125, 0.100];

pub fn uav_a() -> Mat {
    Mat::from_row_slice(
        4,
        4,
        &[
            1.0, 0.5, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.5, //
            0.0, 0.0, 0.0, 1.0,
        ],
    )
}

pub fn uav_b() -> Mat {
    Mat::from_row_slice(4, 2, &[0.125, 0.0, 0.5, 0.0, 0.0, 0.125, 0.0, 0.5])
}

pub fn uav_system() -> LtiSystem {
    let b = uav_b();
    let input_noise = Mat::from_diagonal(&nalgebra::DVector::from_row_slice(&UAV_INPUT_NOISE));
    let sigma_w = &b * input_noise * b.transpose();
    LtiSystem::new(
        uav_a(),
        b,
        Mat::from_diagonal(&nalgebra::DVector::from_row_slice(&[1.0, 0.1, 2.0, 0.2])),
        Mat::identity(2, 2),
        crate::linalg::symmetrize(&sigma_w),
    )
    .expect("UAV benchmark is well formed")
}

/// Exploration covariance `Σσ = I` of the benchmark.
pub fn uav_policy(k: Mat) -> LinearGaussianPolicy {
    LinearGaussianPolicy::new(k, Mat::identity(2, 2)).expect("valid policy")
}

pub fn uav_chance(lambda: f64) -> ChanceSpec {
    ChanceSpec::new(UAV_Q_DIRECTION.to_vec(), UAV_EPS, UAV_DEFAULT_DELTA, lambda)
        .expect("valid chance spec")
}

/// Stabilizing but deliberately conservative starting gain: the LQR gain
/// of the benchmark with the input weight inflated a hundredfold.
pub fn uav_initial_gain() -> Mat {
    let sys = uav_system();
    let heavy = LtiSystem::new(sys.a().clone(), sys.b().clone(), sys.q().clone(), sys.r() * 100.0, sys.sigma_w().clone())
        .expect("UAV benchmark is well formed");
    crate::lti::lqr_gain(&heavy).expect("UAV plant is stabilizable")
}

/// `x⁺ = 0.5 x + u + w`, `w ~ N(0, 1)`, unit weights.
pub fn scalar_system() -> LtiSystem {
    LtiSystem::scalar(0.5, 1.0, 1.0, 1.0, 1.0).expect("valid scalar plant")
}

/// Scalar plant with an expensive input, deterministic policy class, and a
/// chance constraint violated by the LQR gain (`J_c ≈ 0.078 > δ = 0.05`) yet
/// strictly feasible (`J_c → 0.023` as `K → A`).
pub fn scalar_binding() -> (LtiSystem, ChanceSpec, LinearGaussianPolicy) {
    let sys = LtiSystem::scalar(0.9, 1.0, 1.0, 10.0, 1.0).expect("valid scalar plant");
    let chance = ChanceSpec::new(vec![1.0], 2.0, 0.05, 0.0).expect("valid chance spec");
    let policy = LinearGaussianPolicy::deterministic(Mat::zeros(1, 1));
    (sys, chance, policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_gain_is_stabilizing_and_suboptimal() {
        let sys = uav_system();
        let k0 = uav_initial_gain();
        assert!(crate::lti::is_stabilizing(&sys, &k0).unwrap());
        let klqr = crate::lti::lqr_gain(&sys).unwrap();
        assert!((&k0 - klqr).norm() > 0.1);
    }

    #[test]
    fn uav_noise_enters_through_inputs() {
        let sys = uav_system();
        let s = sys.sigma_w();
        assert!((s[(0, 0)] - 80.0 * 0.125 * 0.125).abs() < 1e-12);
        assert!((s[(1, 1)] - 80.0 * 0.25).abs() < 1e-12);
        assert!((s[(3, 3)] - 0.01 * 0.25).abs() < 1e-12);
    }
}
