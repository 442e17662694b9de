//! Linear time-invariant plant `x⁺ = A x + B u + w`, stability tests, the
//! Riccati and Lyapunov solvers, and seeded closed-loop simulation.
//!
//! Gains follow the convention `u = −K x` everywhere in this crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::risk::{self, ChanceSpec};
use crate::rng::{self, SimRng};

/// Symmetry tolerance applied to weights and covariances at construction.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Rollouts abort once the state norm exceeds this bound.
pub const DIVERGENCE_NORM: f64 = 1e12;

const DARE_MAX_ITER: usize = 10_000;
const DARE_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: Mat,
    b: Mat,
    q: Mat,
    r: Mat,
    sigma_w: Mat,
    noise_sqrt: Mat,
}

impl LtiSystem {
    pub fn new(a: Mat, b: Mat, q: Mat, r: Mat, sigma_w: Mat) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::dim("A must be square"));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dim(format!("B must be {n}xp, got {:?}", b.shape())));
        }
        let p = b.ncols();
        if q.shape() != (n, n) {
            return Err(Error::dim(format!("Q must be {n}x{n}")));
        }
        if r.shape() != (p, p) {
            return Err(Error::dim(format!("R must be {p}x{p}")));
        }
        if sigma_w.shape() != (n, n) {
            return Err(Error::dim(format!("SigmaW must be {n}x{n}")));
        }
        for (name, m) in [("A", &a), ("B", &b), ("Q", &q), ("R", &r), ("SigmaW", &sigma_w)] {
            if !linalg::all_finite(m) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        for (name, m) in [("Q", &q), ("R", &r), ("SigmaW", &sigma_w)] {
            if !linalg::is_symmetric(m, SYMMETRY_TOL) {
                return Err(Error::arg(format!("{name} must be symmetric")));
            }
        }
        if linalg::min_sym_eigenvalue(&q) <= 0.0 {
            return Err(Error::arg("Q must be positive definite"));
        }
        if linalg::min_sym_eigenvalue(&r) <= 0.0 {
            return Err(Error::arg("R must be positive definite"));
        }
        let scale = sigma_w.amax().max(1.0);
        if linalg::min_sym_eigenvalue(&sigma_w) < -1e-12 * scale {
            return Err(Error::arg("SigmaW must be positive semidefinite"));
        }
        let noise_sqrt = linalg::psd_sqrt(&sigma_w);
        Ok(Self { a, b, q, r, sigma_w, noise_sqrt })
    }

    /// Scalar plant `x⁺ = a x + b u + w`, `w ~ N(0, sw)`.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, sw: f64) -> Result<Self> {
        let m = |v: f64| Mat::from_element(1, 1, v);
        Self::new(m(a), m(b), m(q), m(r), m(sw))
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn q(&self) -> &Mat {
        &self.q
    }
    pub fn r(&self) -> &Mat {
        &self.r
    }
    pub fn sigma_w(&self) -> &Mat {
        &self.sigma_w
    }
    pub fn noise_sqrt(&self) -> &Mat {
        &self.noise_sqrt
    }
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self, k: &Mat) -> Result<Mat> {
        self.check_gain(k)?;
        Ok(&self.a - &self.b * k)
    }

    pub fn check_gain(&self, k: &Mat) -> Result<()> {
        if k.shape() != (self.n_inputs(), self.n_states()) {
            return Err(Error::dim(format!(
                "gain must be {}x{}, got {:?}",
                self.n_inputs(),
                self.n_states(),
                k.shape()
            )));
        }
        Ok(())
    }

    /// Same plant with a different process-noise covariance.
    pub fn with_sigma_w(&self, sigma_w: Mat) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.q.clone(), self.r.clone(), sigma_w)
    }

    /// One noisy transition.
    pub fn step(&self, x: &Vector, u: &Vector, rng: &mut SimRng) -> Vector {
        &self.a * x + &self.b * u + rng::gaussian(rng, &self.noise_sqrt)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LtiSystemDoc {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "SigmaW")]
    sigma_w: Vec<Vec<f64>>,
}

pub fn matrix_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::dim("ragged matrix rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Mat::from_row_slice(nr, nc, &flat))
}

impl Serialize for LtiSystem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LtiSystemDoc {
            a: matrix_to_rows(&self.a),
            b: matrix_to_rows(&self.b),
            q: matrix_to_rows(&self.q),
            r: matrix_to_rows(&self.r),
            sigma_w: matrix_to_rows(&self.sigma_w),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LtiSystem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = LtiSystemDoc::deserialize(d)?;
        let conv = |rows: &[Vec<f64>]| rows_to_matrix(rows).map_err(D::Error::custom);
        LtiSystem::new(
            conv(&doc.a)?,
            conv(&doc.b)?,
            conv(&doc.q)?,
            conv(&doc.r)?,
            conv(&doc.sigma_w)?,
        )
        .map_err(D::Error::custom)
    }
}

/// Linear-Gaussian policy `u = −K x + σ`, `σ ~ N(0, Σσ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianPolicy {
    k: Mat,
    sigma_sigma: Mat,
    exploration_sqrt: Mat,
}

impl LinearGaussianPolicy {
    pub fn new(k: Mat, sigma_sigma: Mat) -> Result<Self> {
        let p = k.nrows();
        if sigma_sigma.shape() != (p, p) {
            return Err(Error::dim(format!("SigmaSigma must be {p}x{p}")));
        }
        if !linalg::all_finite(&k) || !linalg::all_finite(&sigma_sigma) {
            return Err(Error::NonFinite("policy".into()));
        }
        if !linalg::is_symmetric(&sigma_sigma, SYMMETRY_TOL) {
            return Err(Error::arg("SigmaSigma must be symmetric"));
        }
        if linalg::min_sym_eigenvalue(&sigma_sigma) < -1e-12 * sigma_sigma.amax().max(1.0) {
            return Err(Error::arg("SigmaSigma must be positive semidefinite"));
        }
        let exploration_sqrt = linalg::psd_sqrt(&sigma_sigma);
        Ok(Self { k, sigma_sigma, exploration_sqrt })
    }

    pub fn deterministic(k: Mat) -> Self {
        let p = k.nrows();
        Self::new(k, Mat::zeros(p, p)).expect("zero exploration is valid")
    }

    pub fn k(&self) -> &Mat {
        &self.k
    }
    pub fn sigma_sigma(&self) -> &Mat {
        &self.sigma_sigma
    }

    pub fn with_gain(&self, k: Mat) -> Self {
        Self { k, ..self.clone() }
    }

    pub fn mean_action(&self, x: &Vector) -> Vector {
        -(&self.k * x)
    }

    pub fn act(&self, x: &Vector, rng: &mut SimRng) -> Vector {
        self.mean_action(x) + rng::gaussian(rng, &self.exploration_sqrt)
    }

    /// Σ_w̄ = Σ_w + B Σσ Bᵀ, the effective closed-loop noise covariance.
    pub fn effective_noise(&self, sys: &LtiSystem) -> Mat {
        sys.sigma_w() + sys.b() * &self.sigma_sigma * sys.b().transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub r: f64,
    pub x_next: Vec<f64>,
}

impl Transition {
    pub fn state(&self) -> Vector {
        Vector::from_column_slice(&self.x)
    }
    pub fn action(&self) -> Vector {
        Vector::from_column_slice(&self.u)
    }
    pub fn next_state(&self) -> Vector {
        Vector::from_column_slice(&self.x_next)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.r).collect()
    }

    /// True when every record starts where the previous one ended.
    pub fn is_chained(&self) -> bool {
        self.transitions.windows(2).all(|w| w[0].x_next == w[1].x)
    }
}

pub fn spectral_radius(m: &Mat) -> Result<f64> {
    linalg::spectral_radius(m)
}

pub fn is_stabilizing(sys: &LtiSystem, k: &Mat) -> Result<bool> {
    is_stabilizing_with_margin(sys, k, 0.0)
}

pub fn is_stabilizing_with_margin(sys: &LtiSystem, k: &Mat, margin: f64) -> Result<bool> {
    let acl = sys.closed_loop(k)?;
    Ok(spectral_radius(&acl)? < 1.0 - margin)
}

fn riccati_map(sys: &LtiSystem, s: &Mat) -> Result<Mat> {
    let a = sys.a();
    let b = sys.b();
    let bts = b.transpose() * s;
    let gram = &bts * b + sys.r();
    let rhs = &bts * a;
    let solved = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Conditioning("BᵀSB + R is not positive definite".into()))?;
    let next = a.transpose() * s * a + sys.q() - a.transpose() * bts.transpose() * solved;
    Ok(linalg::symmetrize(&next))
}

/// Stabilizing solution of the discrete algebraic Riccati equation by
/// fixed-point iteration from `S₀ = Q`.
pub fn solve_dare(sys: &LtiSystem) -> Result<Mat> {
    let mut s = sys.q().clone();
    let mut residual = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(sys, &s)?;
        // Frobenius norms overflow long before the entries do.
        if !linalg::all_finite(&next) || next.amax() > 1e100 {
            return Err(Error::SolverFailure { iterations: 0, residual: f64::INFINITY });
        }
        residual = (&next - &s).amax();
        s = next;
        if residual <= 1e-13 * s.amax().max(1.0) {
            break;
        }
    }
    let final_residual = (&riccati_map(sys, &s)? - &s).amax();
    if !(final_residual <= DARE_RESIDUAL_TOL * s.amax().max(1.0)) {
        return Err(Error::SolverFailure {
            iterations: DARE_MAX_ITER,
            residual: final_residual.max(residual),
        });
    }
    Ok(s)
}

/// Frobenius norm of `S − Ric(S)`.
pub fn dare_residual(sys: &LtiSystem, s: &Mat) -> Result<f64> {
    Ok((&riccati_map(sys, s)? - s).norm())
}

/// Optimal LQR gain `K = (BᵀSB + R)⁻¹ BᵀSA`.
pub fn lqr_gain(sys: &LtiSystem) -> Result<Mat> {
    let s = solve_dare(sys)?;
    let bts = sys.b().transpose() * &s;
    let gram = &bts * sys.b() + sys.r();
    let rhs = &bts * sys.a();
    gram.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Conditioning("BᵀSB + R is not positive definite".into()))
}

/// Solves the covariance-form Lyapunov equation `X = W + Acl X Aclᵀ`.
/// The cost form `P = M + Aclᵀ P Acl` is `solve_lyapunov(Aclᵀ, M)`.
pub fn solve_lyapunov(acl: &Mat, w: &Mat) -> Result<Mat> {
    let rho = spectral_radius(acl)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    if w.shape() != acl.shape() {
        return Err(Error::dim("W must match Acl"));
    }
    linalg::stein_solve(acl, w)
}

pub fn lyapunov_residual(acl: &Mat, w: &Mat, x: &Mat) -> f64 {
    (x - w - acl * x * acl.transpose()).norm()
}

/// Simulates `T` closed-loop steps and records rewards.
pub fn rollout(
    sys: &LtiSystem,
    policy: &LinearGaussianPolicy,
    chance: &ChanceSpec,
    steps: usize,
    x0: &Vector,
    seed: u64,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::arg("rollout needs at least one step"));
    }
    sys.check_gain(policy.k())?;
    if x0.len() != sys.n_states() {
        return Err(Error::dim("x0 length"));
    }
    if chance.q.len() != sys.n_states() {
        return Err(Error::dim("chance direction length"));
    }
    let mut rng = rng::seeded(seed);
    let mut x = x0.clone();
    let mut transitions = Vec::with_capacity(steps);
    for k in 0..steps {
        let u = policy.act(&x, &mut rng);
        let x_next = sys.step(&x, &u, &mut rng);
        let norm = x_next.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { step: k, norm });
        }
        let r = risk::reward(&x, &u, &x_next, sys, chance)?;
        transitions.push(Transition {
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            r,
            x_next: x_next.as_slice().to_vec(),
        });
        x = x_next;
    }
    Ok(Trajectory { seed, transitions })
}
