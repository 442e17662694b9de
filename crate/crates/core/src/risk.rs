//! Chance-constrained cost functional for linear-Gaussian policies.
//!
//! For a stabilizing gain `K` the closed loop `x⁺ = (A − BK)x + w̄` has the
//! stationary law `N(0, Σ_K)` where `Σ_K = Σ_w̄ + Acl Σ_K Aclᵀ`. Everything
//! here is evaluated against that law:
//!
//! * `J(K) = tr((Q + KᵀRK) Σ_K) + tr(R Σσ) = tr(P_K Σ_w̄) + tr(R Σσ)`
//! * `J_c(K) = E[Φc(a(x, K))]` with `a = (ε − qᵀ Acl x) / √(qᵀ Σ_w̄ q)`,
//!   which integrates to `Φc(ε / √(qᵀ Σ_K q))`
//! * `L(K, λ) = J(K) + λ (J_c(K) − δ)`

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{self, LinearGaussianPolicy, LtiSystem};
use crate::rng;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Chance constraint `lim (1/T) Σ P{qᵀx_{k+1} ≥ ε} ≤ δ` with multiplier `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceSpec {
    pub q: Vec<f64>,
    pub eps: f64,
    pub delta: f64,
    pub lambda: f64,
}

impl ChanceSpec {
    pub fn new(q: Vec<f64>, eps: f64, delta: f64, lambda: f64) -> Result<Self> {
        let spec = Self { q, eps, delta, lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::arg("eps must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::arg("delta must lie in (0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg("lambda must be nonnegative"));
        }
        if self.q.is_empty() || self.q.iter().all(|v| *v == 0.0) {
            return Err(Error::arg("q must be nonzero"));
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("q".into()));
        }
        Ok(())
    }

    pub fn direction(&self) -> Vector {
        Vector::from_column_slice(&self.q)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self { delta, ..self.clone() }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    /// Linear constraint function `f_c(x) = qᵀx`.
    pub fn constraint_value(&self, x: &Vector) -> f64 {
        self.q.iter().zip(x.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn violated(&self, x_next: &Vector) -> bool {
        self.constraint_value(x_next) >= self.eps
    }
}

/// Standard normal upper tail `Φc(z) = ½ erfc(z/√2)`.
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

pub fn normal_density(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    let mut z = Normal::standard().inverse_cdf(p);
    if !z.is_finite() {
        return z;
    }
    // polish against the accurate tail
    for _ in 0..2 {
        let d = normal_density(z);
        if d <= 0.0 {
            break;
        }
        z += (normal_upper_tail(z) - (1.0 - p)) / d;
    }
    z
}

pub fn stage_cost(x: &Vector, u: &Vector, sys: &LtiSystem) -> Result<f64> {
    if x.len() != sys.n_states() || u.len() != sys.n_inputs() {
        return Err(Error::dim("stage cost operands"));
    }
    Ok(x.dot(&(sys.q() * x)) + u.dot(&(sys.r() * u)))
}

/// `r = −f(x,u) − λ(1{qᵀx⁺ ≥ ε} − δ)`.
pub fn reward(
    x: &Vector,
    u: &Vector,
    x_next: &Vector,
    sys: &LtiSystem,
    chance: &ChanceSpec,
) -> Result<f64> {
    if chance.q.len() != x_next.len() {
        return Err(Error::dim("constraint direction"));
    }
    reward_with(x, u, x_next, sys, chance, |xn| chance.constraint_value(xn))
}

/// Reward with an arbitrary constraint function in place of `qᵀx⁺`.
pub fn reward_with(
    x: &Vector,
    u: &Vector,
    x_next: &Vector,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    constraint: impl Fn(&Vector) -> f64,
) -> Result<f64> {
    if x_next.len() != sys.n_states() {
        return Err(Error::dim("next state"));
    }
    let f = stage_cost(x, u, sys)?;
    let hit = if constraint(x_next) >= chance.eps { 1.0 } else { 0.0 };
    Ok(-f - chance.lambda * (hit - chance.delta))
}

/// Closed-loop quantities shared by the cost and gradient formulas.
#[derive(Debug, Clone)]
pub struct Stationary {
    pub acl: Mat,
    /// Σ_w̄ = Σ_w + B Σσ Bᵀ.
    pub noise: Mat,
    pub sigma_k: Mat,
    pub p_k: Mat,
}

impl Stationary {
    pub fn new(k: &Mat, sys: &LtiSystem, policy: &LinearGaussianPolicy) -> Result<Self> {
        let acl = sys.closed_loop(k)?;
        let noise = policy.effective_noise(sys);
        let sigma_k = lti::solve_lyapunov(&acl, &noise)?;
        let cost_weight = sys.q() + k.transpose() * sys.r() * k;
        let p_k = linalg::stein_solve(&acl.transpose(), &cost_weight)?;
        Ok(Self { acl, noise, sigma_k, p_k })
    }
}

/// Both closed forms of `J(K)`: `(tr((Q+KᵀRK)Σ_K) + tr(RΣσ), tr(P_K Σ_w̄) + tr(RΣσ))`.
pub fn cost_j_forms(k: &Mat, sys: &LtiSystem, policy: &LinearGaussianPolicy) -> Result<(f64, f64)> {
    let st = Stationary::new(k, sys, policy)?;
    let explore = (sys.r() * policy.sigma_sigma()).trace();
    let weight = sys.q() + k.transpose() * sys.r() * k;
    let covariance_form = (weight * &st.sigma_k).trace() + explore;
    let value_form = (&st.p_k * &st.noise).trace() + explore;
    Ok((covariance_form, value_form))
}

pub fn cost_j(k: &Mat, sys: &LtiSystem, policy: &LinearGaussianPolicy) -> Result<f64> {
    Ok(cost_j_forms(k, sys, policy)?.0)
}

fn jc_from_stationary(st: &Stationary, chance: &ChanceSpec) -> Result<f64> {
    let q = chance.direction();
    if q.len() != st.sigma_k.nrows() {
        return Err(Error::dim("constraint direction"));
    }
    let v = q.dot(&(&st.sigma_k * &q));
    if !(v > 0.0) {
        return Err(Error::DegenerateDirection(v));
    }
    Ok(normal_upper_tail(chance.eps / v.sqrt()))
}

/// Stationary violation probability `Φc(ε / √(qᵀ Σ_K q))`.
pub fn cost_jc(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
) -> Result<f64> {
    let st = Stationary::new(k, sys, policy)?;
    jc_from_stationary(&st, chance)
}

pub fn lagrangian(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
) -> Result<f64> {
    let j = cost_j(k, sys, policy)?;
    if chance.lambda == 0.0 {
        return Ok(j);
    }
    let jc = cost_jc(k, sys, chance, policy)?;
    Ok(j + chance.lambda * (jc - chance.delta))
}

/// `(J, J_c, L)` in one pass.
pub fn evaluate_all(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
) -> Result<(f64, f64, f64)> {
    let st = Stationary::new(k, sys, policy)?;
    let weight = sys.q() + k.transpose() * sys.r() * k;
    let j = (weight * &st.sigma_k).trace() + (sys.r() * policy.sigma_sigma()).trace();
    let jc = jc_from_stationary(&st, chance)?;
    Ok((j, jc, j + chance.lambda * (jc - chance.delta)))
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Direct estimate of `E[Φc(a(x, K))]` with `x ~ N(0, Σ_K)`, i.e. the
/// nested expectation before collapsing it to a single tail probability.
pub fn cost_jc_monte_carlo(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::arg("need at least two samples"));
    }
    let st = Stationary::new(k, sys, policy)?;
    let q = chance.direction();
    let scale = q.dot(&(&st.noise * &q));
    if !(scale > 0.0) {
        return Err(Error::DegenerateDirection(scale));
    }
    let s = scale.sqrt();
    let row = st.acl.transpose() * &q; // qᵀ Acl as a column
    let sqrt_sigma = linalg::psd_sqrt(&st.sigma_k);
    let mut rng = rng::seeded(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let x = rng::gaussian(&mut rng, &sqrt_sigma);
        let a = (chance.eps - row.dot(&x)) / s;
        let v = normal_upper_tail(a);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(McEstimate { mean, stderr: (var / n).sqrt() })
}

#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub grad_j: Mat,
    pub grad_jc: Mat,
    pub grad_l: Mat,
    pub e_k: Mat,
    pub sigma_k: Mat,
    pub p_k: Mat,
    /// Entrywise standard error of `grad_jc` for Monte-Carlo estimates.
    pub grad_jc_stderr: Option<Mat>,
}

impl GradientBundle {
    fn assemble(
        st: Stationary,
        e_k: Mat,
        grad_j: Mat,
        grad_jc: Mat,
        lambda: f64,
        grad_jc_stderr: Option<Mat>,
    ) -> Self {
        let grad_l = &grad_j + &grad_jc * lambda;
        Self {
            grad_j,
            grad_jc,
            grad_l,
            e_k,
            sigma_k: st.sigma_k,
            p_k: st.p_k,
            grad_jc_stderr,
        }
    }
}

fn cost_gradient(k: &Mat, sys: &LtiSystem, st: &Stationary) -> (Mat, Mat) {
    let b = sys.b();
    let btp = b.transpose() * &st.p_k;
    let e_k = (sys.r() + &btp * b) * k - &btp * sys.a();
    let grad_j = &e_k * &st.sigma_k * 2.0;
    (e_k, grad_j)
}

/// Maps a symmetric sensitivity `Γ = ∂G/∂Σ_K` to `∂G/∂K` through the
/// Lyapunov constraint: `−2 Bᵀ Λ Acl Σ_K` with `Λ = Γ + Aclᵀ Λ Acl`.
fn covariance_adjoint(sys: &LtiSystem, st: &Stationary, gamma: &Mat) -> Result<Mat> {
    let lam = linalg::stein_solve(&st.acl.transpose(), gamma)?;
    Ok(sys.b().transpose() * lam * &st.acl * &st.sigma_k * -2.0)
}

/// Gradients with `∇J_c` in closed form, differentiating
/// `Φc(ε / √(qᵀ Σ_K q))` through the Lyapunov equation.
pub fn grad_exact(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
) -> Result<GradientBundle> {
    let st = Stationary::new(k, sys, policy)?;
    let (e_k, grad_j) = cost_gradient(k, sys, &st);
    let q = chance.direction();
    let v = q.dot(&(&st.sigma_k * &q));
    if !(v > 0.0) {
        return Err(Error::DegenerateDirection(v));
    }
    let z = chance.eps / v.sqrt();
    // dJc/dv = φ(z) z / (2v); dv/dK = adjoint(q qᵀ)
    let dv = covariance_adjoint(sys, &st, &(&q * q.transpose()))?;
    let grad_jc = dv * (normal_density(z) * z / (2.0 * v));
    Ok(GradientBundle::assemble(st, e_k, grad_j, grad_jc, chance.lambda, None))
}

struct ShardSums {
    pairs: usize,
    pathwise: Mat,
    gamma: Mat,
}

fn mc_shard(
    st: &Stationary,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    sqrt_sigma: &Mat,
    sigma_inv: &Mat,
    jc: f64,
    pairs: usize,
    seed: u64,
) -> ShardSums {
    let n = sys.n_states();
    let q = chance.direction();
    let s = q.dot(&(&st.noise * &q)).sqrt();
    let row = st.acl.transpose() * &q;
    let btq = sys.b().transpose() * &q;
    let mut rng = rng::seeded(seed);
    let mut path_x = Vector::zeros(n);
    let mut gamma = Mat::zeros(n, n);
    for _ in 0..pairs {
        let x = rng::gaussian(&mut rng, sqrt_sigma);
        let m = row.dot(&x);
        let a_plus = (chance.eps - m) / s;
        let a_minus = (chance.eps + m) / s;
        // pathwise part: −φ(a) Bᵀq xᵀ / s, averaged over x and −x
        let w = 0.5 * (normal_density(a_plus) - normal_density(a_minus));
        path_x.axpy(-w / s, &x, 1.0);
        // score part: ½ (f − J_c)(Σ⁻¹xxᵀΣ⁻¹ − Σ⁻¹), f averaged over ±x
        let f = 0.5 * (normal_upper_tail(a_plus) + normal_upper_tail(a_minus)) - jc;
        let y = sigma_inv * &x;
        gamma += (&y * y.transpose() - sigma_inv) * (0.5 * f);
    }
    ShardSums { pairs, pathwise: &btq * path_x.transpose(), gamma }
}

/// Gradients with `∇J_c` estimated by Monte Carlo over the stationary law.
///
/// The estimator has two parts: the pathwise term
/// `−E[φ(a) Bᵀq xᵀ] / √(qᵀΣ_w̄q)`, which holds the state law fixed, plus a
/// score-function term accounting for the dependence of `Σ_K` on `K`.
/// Samples come in antithetic pairs and are split into seeded shards whose
/// spread gives the standard error.
pub fn grad_analytic(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    mc_samples: usize,
    seed: u64,
) -> Result<GradientBundle> {
    if mc_samples == 0 {
        return Err(Error::arg("mc_samples must be at least 1"));
    }
    let st = Stationary::new(k, sys, policy)?;
    let (e_k, grad_j) = cost_gradient(k, sys, &st);
    let jc = jc_from_stationary(&st, chance)?;
    let q = chance.direction();
    let s2 = q.dot(&(&st.noise * &q));
    if !(s2 > 0.0) {
        return Err(Error::DegenerateDirection(s2));
    }
    let sqrt_sigma = linalg::psd_sqrt(&st.sigma_k);
    let sigma_inv = linalg::spd_inverse(&st.sigma_k)?;

    let pairs = mc_samples.div_ceil(2);
    let shards = pairs.min(64);
    let base = pairs / shards;
    let extra = pairs % shards;
    let sums: Vec<ShardSums> = (0..shards)
        .into_par_iter()
        .map(|i| {
            let count = base + usize::from(i < extra);
            mc_shard(&st, sys, chance, &sqrt_sigma, &sigma_inv, jc, count, rng::derive_seed(seed, i as u64))
        })
        .collect();

    let mut shard_grads = Vec::with_capacity(shards);
    for sh in &sums {
        let c = sh.pairs as f64;
        let g = &sh.pathwise / c + covariance_adjoint(sys, &st, &(&sh.gamma / c))?;
        shard_grads.push((c, g));
    }
    let total: f64 = shard_grads.iter().map(|(c, _)| c).sum();
    let mut grad_jc = Mat::zeros(k.nrows(), k.ncols());
    for (c, g) in &shard_grads {
        grad_jc += g * (*c / total);
    }
    let stderr = (shards > 1).then(|| {
        let mut var = Mat::zeros(k.nrows(), k.ncols());
        for (_, g) in &shard_grads {
            let d = g - &grad_jc;
            var += d.component_mul(&d);
        }
        let m = shards as f64;
        (var / (m * (m - 1.0))).map(f64::sqrt)
    });
    Ok(GradientBundle::assemble(st, e_k, grad_j, grad_jc, chance.lambda, stderr))
}

/// Monte-Carlo estimate of the pathwise term alone, `−E[φ(a) Bᵀq xᵀ] / s`.
/// It omits the change of the stationary law with `K` and so is not the
/// full derivative of `J_c`.
pub fn grad_jc_pathwise(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    mc_samples: usize,
    seed: u64,
) -> Result<Mat> {
    let st = Stationary::new(k, sys, policy)?;
    let sqrt_sigma = linalg::psd_sqrt(&st.sigma_k);
    let sigma_inv = linalg::spd_inverse(&st.sigma_k)?;
    let pairs = mc_samples.div_ceil(2).max(1);
    let sh = mc_shard(&st, sys, chance, &sqrt_sigma, &sigma_inv, 0.0, pairs, seed);
    Ok(sh.pathwise / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks;
    use crate::lti::lqr_gain;
    use approx::assert_relative_eq;

    fn scalar() -> (LtiSystem, LinearGaussianPolicy) {
        (
            benchmarks::scalar_system(),
            LinearGaussianPolicy::deterministic(Mat::zeros(1, 1)),
        )
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    #[test]
    fn chance_spec_validation() {
        assert!(ChanceSpec::new(vec![1.0], 0.0, 0.1, 0.0).is_err());
        assert!(ChanceSpec::new(vec![1.0], 1.0, 1.0, 0.0).is_err());
        assert!(ChanceSpec::new(vec![1.0], 1.0, 0.1, -1.0).is_err());
        assert!(ChanceSpec::new(vec![0.0, 0.0], 1.0, 0.1, 0.0).is_err());
        assert!(ChanceSpec::new(vec![0.0, 1.0], 1.0, 0.1, 0.0).is_ok());
    }

    #[test]
    fn stage_cost_values() {
        let (sys, _) = scalar();
        assert_eq!(stage_cost(&v(&[0.0]), &v(&[0.0]), &sys).unwrap(), 0.0);
        assert_eq!(stage_cost(&v(&[2.0]), &v(&[3.0]), &sys).unwrap(), 13.0);
        assert!(stage_cost(&v(&[1.0, 2.0]), &v(&[3.0]), &sys).is_err());
    }

    #[test]
    fn stage_cost_matches_elementwise_sum() {
        let sys = benchmarks::uav_system();
        let x = v(&[0.3, -1.2, 2.0, 0.7]);
        let u = v(&[-0.4, 1.5]);
        let mut expected = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                expected += x[i] * sys.q()[(i, j)] * x[j];
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                expected += u[i] * sys.r()[(i, j)] * u[j];
            }
        }
        assert_relative_eq!(stage_cost(&x, &u, &sys).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn reward_cases() {
        let (sys, _) = scalar();
        let x = v(&[1.0]);
        let u = v(&[0.5]);
        let xn = v(&[3.0]);
        let c0 = ChanceSpec::new(vec![1.0], 1.0, 0.2, 0.0).unwrap();
        assert_eq!(reward(&x, &u, &xn, &sys, &c0).unwrap(), -1.25);
        // delta is kept inside (0,1) by the spec type; a raw struct gives δ = 0
        let hit = ChanceSpec { q: vec![1.0], eps: 1.0, delta: 0.0, lambda: 1.0 };
        let r = reward(&v(&[0.0]), &v(&[0.0]), &xn, &sys, &hit).unwrap();
        assert_eq!(r, -1.0);
        let custom = reward_with(&v(&[0.0]), &v(&[0.0]), &xn, &sys, &hit, |x| -x[0]).unwrap();
        assert_eq!(custom, 0.0);
    }

    #[test]
    fn scalar_cost_is_four_thirds() {
        let (sys, policy) = scalar();
        let (j1, j2) = cost_j_forms(&Mat::zeros(1, 1), &sys, &policy).unwrap();
        assert_relative_eq!(j1, 4.0 / 3.0, epsilon = 1e-13);
        assert_relative_eq!(j2, 4.0 / 3.0, epsilon = 1e-13);
    }

    #[test]
    fn zero_noise_zero_cost() {
        let sys = LtiSystem::scalar(0.5, 1.0, 1.0, 1.0, 0.0).unwrap();
        let policy = LinearGaussianPolicy::deterministic(Mat::zeros(1, 1));
        assert_eq!(cost_j(&Mat::zeros(1, 1), &sys, &policy).unwrap(), 0.0);
    }

    #[test]
    fn cost_rejects_unstable_gain() {
        let (sys, policy) = scalar();
        let k = Mat::from_element(1, 1, -0.6);
        assert!(matches!(cost_j(&k, &sys, &policy), Err(Error::Unstable { .. })));
    }

    #[test]
    fn jc_tail_values() {
        let (sys, policy) = scalar();
        let k = Mat::zeros(1, 1);
        let far = ChanceSpec::new(vec![1.0], 1e9, 0.1, 0.0).unwrap();
        assert!(cost_jc(&k, &sys, &far, &policy).unwrap() < 1e-12);
        let one_sigma = ChanceSpec::new(vec![1.0], (4.0f64 / 3.0).sqrt(), 0.1, 0.0).unwrap();
        let got = cost_jc(&k, &sys, &one_sigma, &policy).unwrap();
        assert_relative_eq!(got, 0.158_655_253_931_457_05, max_relative = 1e-14);
        assert_relative_eq!(normal_upper_tail(3.0), 1.349_898_031_630_094_6e-3, max_relative = 1e-14);
        assert_relative_eq!(normal_upper_tail(-2.0), 0.977_249_868_051_820_8, max_relative = 1e-14);
    }

    #[test]
    fn jc_degenerate_direction() {
        let sys = LtiSystem::new(
            Mat::identity(2, 2) * 0.5,
            Mat::from_row_slice(2, 1, &[1.0, 0.0]),
            Mat::identity(2, 2),
            Mat::identity(1, 1),
            Mat::from_diagonal(&v(&[1.0, 0.0])),
        )
        .unwrap();
        let policy = LinearGaussianPolicy::deterministic(Mat::zeros(1, 2));
        let chance = ChanceSpec::new(vec![0.0, 1.0], 1.0, 0.1, 0.0).unwrap();
        assert!(matches!(
            cost_jc(&Mat::zeros(1, 2), &sys, &chance, &policy),
            Err(Error::DegenerateDirection(_))
        ));
    }

    #[test]
    fn lagrangian_reductions() {
        let sys = benchmarks::uav_system();
        let k = lqr_gain(&sys).unwrap();
        let policy = benchmarks::uav_policy(k.clone());
        let j = cost_j(&k, &sys, &policy).unwrap();
        assert_eq!(lagrangian(&k, &sys, &benchmarks::uav_chance(0.0), &policy).unwrap(), j);
        let jc = cost_jc(&k, &sys, &benchmarks::uav_chance(0.0), &policy).unwrap();
        let at_boundary = benchmarks::uav_chance(10.0).with_delta(jc);
        assert_relative_eq!(lagrangian(&k, &sys, &at_boundary, &policy).unwrap(), j, epsilon = 1e-12);
        // J_c(K_lqr) > δ = 0.1, so L grows with λ
        let l1 = lagrangian(&k, &sys, &benchmarks::uav_chance(1.0), &policy).unwrap();
        let l100 = lagrangian(&k, &sys, &benchmarks::uav_chance(100.0), &policy).unwrap();
        assert!(jc > benchmarks::UAV_DEFAULT_DELTA);
        assert!(l100 > l1 && l1 > j);
    }

    #[test]
    fn gradient_vanishes_at_lqr() {
        let sys = benchmarks::uav_system();
        let k = lqr_gain(&sys).unwrap();
        let policy = benchmarks::uav_policy(k.clone());
        let chance = benchmarks::uav_chance(0.0);
        let g = grad_analytic(&k, &sys, &chance, &policy, 100, 1).unwrap();
        assert!(g.grad_l.norm() <= 1e-6, "{}", g.grad_l.norm());
        assert!(grad_analytic(&k, &sys, &chance, &policy, 0, 1).is_err());
    }

    #[test]
    fn scalar_grad_j_matches_finite_difference() {
        let (sys, policy) = scalar();
        let chance = ChanceSpec::new(vec![1.0], 1.5, 0.1, 0.0).unwrap();
        for &k0 in &[-0.3, 0.0, 0.25, 0.9] {
            let k = Mat::from_element(1, 1, k0);
            let g = grad_exact(&k, &sys, &chance, &policy).unwrap();
            let h = 1e-5;
            let jp = cost_j(&Mat::from_element(1, 1, k0 + h), &sys, &policy).unwrap();
            let jm = cost_j(&Mat::from_element(1, 1, k0 - h), &sys, &policy).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            assert_relative_eq!(g.grad_j[(0, 0)], fd, max_relative = 1e-4);
        }
    }

    #[test]
    fn exact_jc_gradient_matches_finite_difference() {
        let sys = benchmarks::uav_system();
        let k = lqr_gain(&sys).unwrap() * 0.8;
        let policy = benchmarks::uav_policy(k.clone());
        let chance = benchmarks::uav_chance(10.0);
        let g = grad_exact(&k, &sys, &chance, &policy).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut kp = k.clone();
                kp[(i, j)] += h;
                let mut km = k.clone();
                km[(i, j)] -= h;
                let fd = (cost_jc(&kp, &sys, &chance, &policy).unwrap()
                    - cost_jc(&km, &sys, &chance, &policy).unwrap())
                    / (2.0 * h);
                assert!((g.grad_jc[(i, j)] - fd).abs() <= 1e-7 + 1e-5 * fd.abs(), "{i},{j}");
            }
        }
        assert_relative_eq!(g.grad_l, &g.grad_j + &g.grad_jc * 10.0, epsilon = 1e-12);
    }

    #[test]
    fn pathwise_term_alone_is_not_the_derivative() {
        let sys = benchmarks::uav_system();
        let k = lqr_gain(&sys).unwrap();
        let policy = benchmarks::uav_policy(k.clone());
        let chance = benchmarks::uav_chance(0.0);
        let exact = grad_exact(&k, &sys, &chance, &policy).unwrap().grad_jc;
        let path = grad_jc_pathwise(&k, &sys, &chance, &policy, 200_000, 5).unwrap();
        assert!((&path - &exact).norm() > 0.3 * exact.norm());
        let full = grad_analytic(&k, &sys, &chance, &policy, 200_000, 5).unwrap().grad_jc;
        assert!((&full - &exact).norm() < 0.05 * exact.norm());
    }

    #[test]
    fn mc_gradient_is_reproducible() {
        let sys = benchmarks::uav_system();
        let k = lqr_gain(&sys).unwrap();
        let policy = benchmarks::uav_policy(k.clone());
        let chance = benchmarks::uav_chance(5.0);
        let a = grad_analytic(&k, &sys, &chance, &policy, 10_000, 77).unwrap();
        let b = grad_analytic(&k, &sys, &chance, &policy, 10_000, 77).unwrap();
        assert_eq!(a.grad_jc, b.grad_jc);
        assert!(a.grad_jc_stderr.is_some());
    }

    #[test]
    fn quantile_inverts_tail() {
        for &p in &[0.01, 0.1, 0.5, 0.9] {
            assert_relative_eq!(normal_upper_tail(normal_quantile(p)), 1.0 - p, epsilon = 1e-12);
        }
    }
}
