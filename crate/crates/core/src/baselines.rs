//! Model-based baselines: chance-constrained LQR as a small semidefinite
//! program over `(X, Y, P)`, and scenario-based receding-horizon control.

use std::time::Instant;

use nalgebra::Cholesky;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{self, LtiSystem, Trajectory, Transition, DIVERGENCE_NORM};
use crate::risk::{self, ChanceSpec};
use crate::rng;

/// Barrier parameter growth per outer iteration.
const BARRIER_GROWTH: f64 = 10.0;
const NEWTON_MAX: usize = 100;
const NEWTON_DECREMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClqrSettings {
    /// Stop once the duality-gap bound `m/t` falls below this fraction of
    /// the objective.
    pub rel_gap: f64,
    pub max_outer: usize,
}

impl Default for ClqrSettings {
    fn default() -> Self {
        Self { rel_gap: 1e-11, max_outer: 40 }
    }
}

/// One outer iteration of the barrier method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierRecord {
    pub t: f64,
    pub objective: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClqrSolution {
    pub x: Mat,
    pub y: Mat,
    pub p: Mat,
    /// `Y X⁻¹`, the gain in the `u = +Kx` convention of the program.
    pub k_sdp: Mat,
    /// `−Y X⁻¹`, the gain in the crate's `u = −Kx` convention.
    pub k: Mat,
    /// `Tr(QX) + Tr(P)` at the solution.
    pub objective: f64,
    /// `α = (Φ⁻¹(1 − δ))⁻²`.
    pub alpha: f64,
    /// Phase I iterations (empty when the LQR start was already feasible).
    pub phase_one: Vec<BarrierRecord>,
    pub trace: Vec<BarrierRecord>,
}

impl ClqrSolution {
    pub fn lmi_blocks(&self, sys: &LtiSystem, w: &Mat) -> (Mat, Mat) {
        let r_half = linalg::psd_sqrt(sys.r());
        (
            lmi_cost(&self.x, &self.y, &self.p, &r_half),
            lmi_covariance(&self.x, &self.y, sys.a(), sys.b(), w),
        )
    }
}

/// `[[P, R^½Y], [(R^½Y)ᵀ, X]]`.
fn lmi_cost(x: &Mat, y: &Mat, p: &Mat, r_half: &Mat) -> Mat {
    let (n, m) = (x.nrows(), p.nrows());
    let ry = r_half * y;
    let mut out = Mat::zeros(m + n, m + n);
    out.view_mut((0, 0), (m, m)).copy_from(p);
    out.view_mut((0, m), (m, n)).copy_from(&ry);
    out.view_mut((m, 0), (n, m)).copy_from(&ry.transpose());
    out.view_mut((m, m), (n, n)).copy_from(x);
    out
}

/// `[[X − W, AX + BY], [(AX + BY)ᵀ, X]]`.
fn lmi_covariance(x: &Mat, y: &Mat, a: &Mat, b: &Mat, w: &Mat) -> Mat {
    let n = x.nrows();
    let off = a * x + b * y;
    let mut out = Mat::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&(x - w));
    out.view_mut((0, n), (n, n)).copy_from(&off);
    out.view_mut((n, 0), (n, n)).copy_from(&off.transpose());
    out.view_mut((n, n), (n, n)).copy_from(x);
    out
}

/// Packing of `(X, Y[, P])` into one vector: upper triangle of `X`, `Y`
/// row-major, upper triangle of `P`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    p: usize,
    with_p: bool,
}

impl Layout {
    fn sym_len(k: usize) -> usize {
        k * (k + 1) / 2
    }

    fn len(&self) -> usize {
        Self::sym_len(self.n) + self.p * self.n + if self.with_p { Self::sym_len(self.p) } else { 0 }
    }

    fn unpack_sym(v: &[f64], k: usize) -> Mat {
        let mut m = Mat::zeros(k, k);
        let mut idx = 0;
        for i in 0..k {
            for j in i..k {
                m[(i, j)] = v[idx];
                m[(j, i)] = v[idx];
                idx += 1;
            }
        }
        m
    }

    fn pack_sym(m: &Mat, out: &mut Vec<f64>) {
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                out.push(m[(i, j)]);
            }
        }
    }

    fn unpack(&self, v: &Vector) -> (Mat, Mat, Option<Mat>) {
        let v = v.as_slice();
        let sx = Self::sym_len(self.n);
        let x = Self::unpack_sym(&v[..sx], self.n);
        let y = Mat::from_row_slice(self.p, self.n, &v[sx..sx + self.p * self.n]);
        let p = self.with_p.then(|| Self::unpack_sym(&v[sx + self.p * self.n..], self.p));
        (x, y, p)
    }

    fn pack(&self, x: &Mat, y: &Mat, p: Option<&Mat>) -> Vector {
        let mut out = Vec::with_capacity(self.len());
        Self::pack_sym(x, &mut out);
        out.extend(y.transpose().iter());
        if let Some(p) = p {
            Self::pack_sym(p, &mut out);
        }
        Vector::from_vec(out)
    }
}

/// Affine matrix function `M(v) = M₀ + Σ vᵢ Mᵢ`.
struct AffineLmi {
    base: Mat,
    basis: Vec<Mat>,
}

impl AffineLmi {
    fn from_map(dim: usize, f: impl Fn(&Vector) -> Mat) -> Self {
        let zero = Vector::zeros(dim);
        let base = f(&zero);
        let basis = (0..dim)
            .map(|i| {
                let mut e = zero.clone();
                e[i] = 1.0;
                f(&e) - &base
            })
            .collect();
        Self { base, basis }
    }

    fn at(&self, v: &Vector) -> Mat {
        let mut m = self.base.clone();
        for (vi, b) in v.iter().zip(&self.basis) {
            if *vi != 0.0 {
                m += b * *vi;
            }
        }
        m
    }
}

/// `min cᵀv` subject to `M_k(v) ≻ 0` and optionally `s₀ − aᵀv > 0`.
struct BarrierProblem {
    cost: Vector,
    lmis: Vec<AffineLmi>,
    scalar: Option<(Vector, f64)>,
}

impl BarrierProblem {
    /// Number of barrier terms weighted by their dimension.
    fn degree(&self) -> f64 {
        let lmi: usize = self.lmis.iter().map(|m| m.base.nrows()).sum();
        (lmi + usize::from(self.scalar.is_some())) as f64
    }

    fn slack(&self, v: &Vector) -> Option<f64> {
        self.scalar.as_ref().map(|(a, s0)| s0 - a.dot(v))
    }

    fn strictly_feasible(&self, v: &Vector) -> bool {
        if self.slack(v).is_some_and(|s| !(s > 0.0)) {
            return false;
        }
        self.lmis.iter().all(|m| Cholesky::new(linalg::symmetrize(&m.at(v))).is_some())
    }

    /// Gradient and Hessian of `t cᵀv − Σ log det M_k(v) − log s(v)`.
    fn derivatives(&self, v: &Vector, t: f64) -> Result<(Vector, Mat)> {
        let dim = v.len();
        let mut g = &self.cost * t;
        let mut h = Mat::zeros(dim, dim);
        for lmi in &self.lmis {
            let inv = Cholesky::new(linalg::symmetrize(&lmi.at(v)))
                .ok_or_else(|| Error::Conditioning("barrier iterate left the feasible set".into()))?
                .inverse();
            let scaled: Vec<Mat> = lmi.basis.iter().map(|b| &inv * b).collect();
            for i in 0..dim {
                g[i] -= scaled[i].trace();
                for j in 0..=i {
                    // tr(M⁻¹Mᵢ M⁻¹Mⱼ)
                    let hij = scaled[i].component_mul(&scaled[j].transpose()).sum();
                    h[(i, j)] += hij;
                    if i != j {
                        h[(j, i)] += hij;
                    }
                }
            }
        }
        if let Some((a, _)) = &self.scalar {
            let s = self.slack(v).unwrap_or(f64::NAN);
            g += a / s;
            h += a * a.transpose() / (s * s);
        }
        Ok((g, h))
    }

    /// Damped Newton centering at fixed `t`; `stop` can end it early.
    fn center(&self, v: &mut Vector, t: f64, stop: &dyn Fn(&Vector) -> bool) -> Result<usize> {
        for step in 0..NEWTON_MAX {
            if stop(v) {
                return Ok(step);
            }
            let (g, h) = self.derivatives(v, t)?;
            let dir = -linalg::spd_solve(&h, &g)?;
            let decrement = -g.dot(&dir);
            if !decrement.is_finite() {
                return Err(Error::NonFinite("newton decrement".into()));
            }
            if decrement <= NEWTON_DECREMENT_TOL {
                return Ok(step);
            }
            // damped step of self-concordant minimization
            let mut size = if decrement > 0.0625 { 1.0 / (1.0 + decrement.sqrt()) } else { 1.0 };
            let mut next = &*v + &dir * size;
            let mut halvings = 0;
            while !self.strictly_feasible(&next) {
                size *= 0.5;
                halvings += 1;
                if halvings > 60 {
                    return Err(Error::SolverFailure { iterations: step, residual: decrement });
                }
                next = &*v + &dir * size;
            }
            *v = next;
        }
        Ok(NEWTON_MAX)
    }

    /// Path following from a strictly feasible `v` until `m/t ≤ gap(v)`.
    fn solve(
        &self,
        v: &mut Vector,
        gap: &dyn Fn(&Vector) -> f64,
        max_outer: usize,
        stop: &dyn Fn(&Vector) -> bool,
    ) -> Result<Vec<BarrierRecord>> {
        let m = self.degree();
        let mut t = m / self.cost.dot(v).abs().max(1.0);
        let mut trace = Vec::new();
        for _ in 0..max_outer {
            let newton_steps = self.center(v, t, stop)?;
            trace.push(BarrierRecord { t, objective: self.cost.dot(v), newton_steps });
            if stop(v) || m / t <= gap(v) {
                return Ok(trace);
            }
            t *= BARRIER_GROWTH;
        }
        Ok(trace)
    }
}

/// `α = (Φ⁻¹(1 − δ))⁻²`, so that `qᵀXq ≤ αε²` is `P(qᵀx ≥ ε) ≤ δ` for
/// `x ~ N(0, X)`.
pub fn clqr_alpha(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::arg(format!("delta must lie in (0, 0.5) for the SDP, got {delta}")));
    }
    Ok(risk::normal_quantile(1.0 - delta).powi(-2))
}

/// Solves the chance-constrained LQR program with `W = Σ_w + BΣσBᵀ`, so the
/// optimal value equals the constrained optimum over linear gains (minus the
/// constant `Tr(RΣσ)`).
pub fn clqr_solve(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    sigma_sigma: &Mat,
    settings: &ClqrSettings,
) -> Result<ClqrSolution> {
    let (n, p) = (sys.n_states(), sys.n_inputs());
    if sigma_sigma.shape() != (p, p) {
        return Err(Error::dim("SigmaSigma must be p x p"));
    }
    if chance.q.len() != n {
        return Err(Error::dim("chance direction length"));
    }
    let alpha = clqr_alpha(chance.delta)?;
    let bound = alpha * chance.eps * chance.eps;
    let (a, b) = (sys.a(), sys.b());
    let w = linalg::symmetrize(&(sys.sigma_w() + b * sigma_sigma * b.transpose()));
    let r_half = linalg::psd_sqrt(sys.r());
    let q = chance.direction();
    let qq = &q * q.transpose();

    // strictly feasible start around the LQR gain
    let k0 = lti::lqr_gain(sys)?;
    let acl = a - b * &k0;
    let shift = (w.trace() / n as f64 * 1e-3).max(1e-6);
    let x0 = lti::solve_lyapunov(&acl, &(&w + Mat::identity(n, n) * shift))?;
    let mut y = -&k0 * &x0;
    let mut x = x0;

    let covariance_lmi = |lay: Layout| {
        let (a, b, w) = (a.clone(), b.clone(), w.clone());
        AffineLmi::from_map(lay.len(), move |v| {
            let (x, y, _) = lay.unpack(v);
            lmi_covariance(&x, &y, &a, &b, &w)
        })
    };

    let mut phase_one = Vec::new();
    if q.dot(&(&x * &q)) >= bound {
        // Phase I: push qᵀXq below the bound over the covariance LMI alone.
        // The small trace term keeps the other directions of X bounded.
        let lay = Layout { n, p, with_p: false };
        let rho = 1e-6 * q.norm_squared() / n as f64;
        let cost = lay.pack(&(&qq + Mat::identity(n, n) * rho), &Mat::zeros(p, n), None);
        let prob = BarrierProblem { cost, lmis: vec![covariance_lmi(lay)], scalar: None };
        let mut v = lay.pack(&x, &y, None);
        let target = bound * (1.0 - 1e-3);
        let below = |v: &Vector| {
            let (x, _, _) = lay.unpack(v);
            q.dot(&(&x * &q)) < target
        };
        let gap = |_: &Vector| 1e-12 * bound;
        phase_one = prob.solve(&mut v, &gap, settings.max_outer, &below)?;
        let (xv, yv, _) = lay.unpack(&v);
        if !(q.dot(&(&xv * &q)) < bound) {
            return Err(Error::Infeasible(format!(
                "min qᵀXq ≈ {:.6e} is not below αε² = {bound:.6e}",
                q.dot(&(&xv * &q))
            )));
        }
        x = xv;
        y = yv;
    }

    let x_inv = linalg::spd_inverse(&x)?;
    let p0 = &r_half * &y * &x_inv * y.transpose() * &r_half + Mat::identity(p, p);
    let lay = Layout { n, p, with_p: true };
    let cost = trace_cost(lay, sys.q());
    let cost_lmi = {
        let r_half = r_half.clone();
        AffineLmi::from_map(lay.len(), move |v| {
            let (x, y, p) = lay.unpack(v);
            lmi_cost(&x, &y, &p.expect("layout has P"), &r_half)
        })
    };
    let scalar_row = {
        let zero = Vector::zeros(lay.len());
        let base = {
            let (x, _, _) = lay.unpack(&zero);
            q.dot(&(&x * &q))
        };
        Vector::from_iterator(
            lay.len(),
            (0..lay.len()).map(|i| {
                let mut e = zero.clone();
                e[i] = 1.0;
                let (x, _, _) = lay.unpack(&e);
                q.dot(&(&x * &q)) - base
            }),
        )
    };
    let prob = BarrierProblem {
        cost,
        lmis: vec![cost_lmi, covariance_lmi(lay)],
        scalar: Some((scalar_row, bound)),
    };
    let mut v = lay.pack(&x, &y, Some(&p0));
    if !prob.strictly_feasible(&v) {
        return Err(Error::SolverFailure { iterations: 0, residual: f64::NAN });
    }
    let rel_gap = settings.rel_gap;
    let cost_vec = prob.cost.clone();
    let gap = move |v: &Vector| rel_gap * cost_vec.dot(v).abs().max(1.0);
    let trace = prob.solve(&mut v, &gap, settings.max_outer, &|_| false)?;

    let (x, y, p) = lay.unpack(&v);
    let p = p.expect("layout has P");
    let eig = nalgebra::SymmetricEigen::new(x.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > 1e12 {
        return Err(Error::Conditioning(format!("X eigenvalues span [{lo:e}, {hi:e}]")));
    }
    let k_sdp = &y * linalg::spd_inverse(&x)?;
    let k = -&k_sdp;
    let objective = prob.cost.dot(&v);
    Ok(ClqrSolution { x, y, p, k_sdp, k, objective, alpha, phase_one, trace })
}

/// Cost vector for `Tr(QX) + Tr(P)` in the packed layout; off-diagonal
/// entries of `X` appear twice in the trace.
fn trace_cost(lay: Layout, q: &Mat) -> Vector {
    let mut out = Vec::with_capacity(lay.len());
    for i in 0..lay.n {
        for j in i..lay.n {
            out.push(if i == j { q[(i, i)] } else { q[(i, j)] + q[(j, i)] });
        }
    }
    out.extend(std::iter::repeat_n(0.0, lay.p * lay.n));
    for i in 0..lay.p {
        for j in i..lay.p {
            out.push(if i == j { 1.0 } else { 0.0 });
        }
    }
    Vector::from_vec(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSettings {
    /// Prediction horizon T.
    pub horizon: usize,
    /// Noise scenarios S drawn afresh at every time step.
    pub scenarios: usize,
    pub population: usize,
    pub elite: usize,
    pub generations: usize,
    /// Initial per-coordinate standard deviation of the refinement search.
    pub init_std: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self { horizon: 5, scenarios: 20, population: 64, elite: 8, generations: 30, init_std: 1.0 }
    }
}

impl MpcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.scenarios == 0 {
            return Err(Error::arg("horizon and scenarios must be positive"));
        }
        if self.elite == 0 || self.elite > self.population {
            return Err(Error::arg("elite count must lie in 1..=population"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::arg("init_std must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcPlan {
    pub horizon: usize,
    pub scenarios: usize,
    /// Planned inputs `u_1 … u_T`; only the first is applied.
    pub inputs: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective of the quadratic warm start.
    pub qp_objective: f64,
    /// Whether the indicator-aware refinement ran.
    pub refined: bool,
    /// Refinement ran but found nothing better than the warm start.
    pub stalled: bool,
}

impl MpcPlan {
    pub fn first_input(&self) -> Vector {
        Vector::from_column_slice(&self.inputs[0])
    }
}

/// Scenario objective
/// `Σ_s Σ_i [u_iᵀRu_i + x_{i+1}ᵀQx_{i+1} + λ·1{qᵀx_{i+1} ≥ ε}]`
/// for the stacked input sequence `u`.
fn scenario_objective(sys: &LtiSystem, chance: &ChanceSpec, x_t: &Vector, noise: &[Vec<Vector>], u: &Vector) -> f64 {
    let p = sys.n_inputs();
    let horizon = u.len() / p;
    let q = chance.direction();
    let mut total = 0.0;
    for scenario in noise {
        let mut x = x_t.clone();
        for i in 0..horizon {
            let ui = u.rows(i * p, p);
            x = sys.a() * &x + sys.b() * ui + &scenario[i];
            total += ui.dot(&(sys.r() * ui)) + x.dot(&(sys.q() * &x));
            if chance.lambda != 0.0 && q.dot(&x) >= chance.eps {
                total += chance.lambda;
            }
        }
    }
    total
}

/// Minimizer of the scenario objective without the indicator terms: an
/// unconstrained least-squares problem in the stacked inputs.
fn scenario_qp(sys: &LtiSystem, x_t: &Vector, noise: &[Vec<Vector>], horizon: usize) -> Result<Vector> {
    let (n, p) = (sys.n_states(), sys.n_inputs());
    let s = noise.len() as f64;
    // gamma[i] maps the stacked inputs to their effect on x_{i+1}
    let mut gamma: Vec<Mat> = Vec::with_capacity(horizon);
    let mut prev = Mat::zeros(n, p * horizon);
    for i in 0..horizon {
        let mut g = sys.a() * &prev;
        g.view_mut((0, i * p), (n, p)).copy_from(sys.b());
        gamma.push(g.clone());
        prev = g;
    }
    // summed free response of each step over the scenarios
    let mut free = vec![Vector::zeros(n); horizon];
    for scenario in noise {
        let mut x = x_t.clone();
        for i in 0..horizon {
            x = sys.a() * &x + &scenario[i];
            free[i] += &x;
        }
    }
    let mut h = Mat::zeros(p * horizon, p * horizon);
    let mut g = Vector::zeros(p * horizon);
    for i in 0..horizon {
        let gq = gamma[i].transpose() * sys.q();
        h += &gq * &gamma[i] * s;
        g += &gq * &free[i];
        let mut block = h.view_mut((i * p, i * p), (p, p));
        block += sys.r() * s;
    }
    Ok(-linalg::spd_solve(&linalg::symmetrize(&h), &g)?)
}

fn draw_scenarios(sys: &LtiSystem, count: usize, horizon: usize, seed: u64) -> Vec<Vec<Vector>> {
    let mut r = rng::seeded(seed);
    (0..count)
        .map(|_| (0..horizon).map(|_| rng::gaussian(&mut r, sys.noise_sqrt())).collect())
        .collect()
}

/// Plans an open-loop input sequence from `x_t`: exact quadratic solve,
/// then cross-entropy refinement against the indicator terms when `λ ≠ 0`.
pub fn mpc_plan(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    x_t: &Vector,
    settings: &MpcSettings,
    seed: u64,
) -> Result<MpcPlan> {
    settings.validate()?;
    if x_t.len() != sys.n_states() || chance.q.len() != sys.n_states() {
        return Err(Error::dim("state or constraint direction length"));
    }
    let (p, horizon) = (sys.n_inputs(), settings.horizon);
    let noise = draw_scenarios(sys, settings.scenarios, horizon, rng::derive_seed(seed, 0));
    let u_qp = scenario_qp(sys, x_t, &noise, horizon)?;
    let qp_objective = scenario_objective(sys, chance, x_t, &noise, &u_qp);
    let (mut best, mut best_obj) = (u_qp.clone(), qp_objective);
    let refined = chance.lambda != 0.0;
    if refined {
        let mut r = rng::seeded(rng::derive_seed(seed, 1));
        let dim = p * horizon;
        let mut mean = u_qp;
        let mut std = Vector::from_element(dim, settings.init_std);
        for _ in 0..settings.generations {
            let pop: Vec<Vector> = (0..settings.population)
                .map(|_| {
                    Vector::from_iterator(
                        dim,
                        (0..dim).map(|k| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            mean[k] + std[k] * z
                        }),
                    )
                })
                .collect();
            let scores: Vec<f64> = pop.par_iter().map(|u| scenario_objective(sys, chance, x_t, &noise, u)).collect();
            let mut order: Vec<usize> = (0..pop.len()).collect();
            order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
            if scores[order[0]] < best_obj {
                best_obj = scores[order[0]];
                best = pop[order[0]].clone();
            }
            let elite = &order[..settings.elite];
            let k = elite.len() as f64;
            mean = elite.iter().fold(Vector::zeros(dim), |acc, &i| acc + &pop[i]) / k;
            std = elite
                .iter()
                .fold(Vector::zeros(dim), |acc, &i| acc + (&pop[i] - &mean).map(|d| d * d))
                .map(|v| (v / k).sqrt().max(1e-9));
        }
    }
    Ok(MpcPlan {
        horizon,
        scenarios: settings.scenarios,
        inputs: (0..horizon).map(|i| best.rows(i * p, p).iter().copied().collect()).collect(),
        objective: best_obj,
        qp_objective,
        refined,
        stalled: refined && !(best_obj < qp_objective),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcRollout {
    pub trajectory: Trajectory,
    /// Mean stage cost after the burn-in.
    pub j: f64,
    /// Violation frequency after the burn-in.
    pub jc: f64,
    pub stalled_steps: usize,
    /// Total wall-clock seconds spent planning.
    pub plan_seconds: f64,
}

/// Receding-horizon closed loop: plan, apply the first input, repeat.
pub fn mpc_rollout(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    x0: &Vector,
    steps: usize,
    burn_in: usize,
    settings: &MpcSettings,
    seed: u64,
) -> Result<MpcRollout> {
    if steps == 0 {
        return Err(Error::arg("rollout needs at least one step"));
    }
    let mut plant = rng::seeded(rng::derive_seed(seed, u64::MAX));
    let mut x = x0.clone();
    let mut transitions = Vec::with_capacity(burn_in + steps);
    let (mut cost, mut hits, mut stalled_steps, mut plan_seconds) = (0.0, 0usize, 0usize, 0.0);
    for step in 0..burn_in + steps {
        let start = Instant::now();
        let plan = mpc_plan(sys, chance, &x, settings, rng::derive_seed(seed, step as u64))?;
        plan_seconds += start.elapsed().as_secs_f64();
        stalled_steps += usize::from(plan.stalled);
        let u = plan.first_input();
        let x_next = sys.step(&x, &u, &mut plant);
        let norm = x_next.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { step, norm });
        }
        if step >= burn_in {
            cost += risk::stage_cost(&x, &u, sys)?;
            hits += usize::from(chance.violated(&x_next));
        }
        transitions.push(Transition {
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            r: risk::reward(&x, &u, &x_next, sys, chance)?,
            x_next: x_next.as_slice().to_vec(),
        });
        x = x_next;
    }
    Ok(MpcRollout {
        trajectory: Trajectory { seed, transitions },
        j: cost / steps as f64,
        jc: hits as f64 / steps as f64,
        stalled_steps,
        plan_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks;
    use crate::lti::LinearGaussianPolicy;

    /// Open-loop inputs of the finite-horizon LQ problem with stage cost
    /// `uᵀRu + x⁺ᵀQx⁺`, from the backward Riccati recursion.
    fn riccati_sequence(sys: &LtiSystem, x0: &Vector, horizon: usize) -> Vec<Vector> {
        let (a, b, q, r) = (sys.a(), sys.b(), sys.q(), sys.r());
        let mut p_next = Mat::zeros(a.nrows(), a.ncols());
        let mut gains = Vec::new();
        for _ in 0..horizon {
            let s = q + &p_next;
            let gram = r + b.transpose() * &s * b;
            let k = gram.clone().cholesky().unwrap().solve(&(b.transpose() * &s * a));
            p_next = a.transpose() * &s * a - a.transpose() * &s * b * &k;
            gains.push(k);
        }
        gains.reverse();
        let mut x = x0.clone();
        gains
            .iter()
            .map(|k| {
                let u = -(k * &x);
                x = a * &x + b * &u;
                u
            })
            .collect()
    }

    fn noiseless_uav() -> LtiSystem {
        benchmarks::uav_system().with_sigma_w(Mat::zeros(4, 4)).unwrap()
    }

    #[test]
    fn one_step_plan_closed_form() {
        let sys = noiseless_uav();
        let chance = benchmarks::uav_chance(0.0);
        let x = Vector::from_column_slice(&[1.0, -2.0, 0.5, 3.0]);
        let settings = MpcSettings { horizon: 1, scenarios: 1, ..MpcSettings::default() };
        let plan = mpc_plan(&sys, &chance, &x, &settings, 1).unwrap();
        let (a, b, q, r) = (sys.a(), sys.b(), sys.q(), sys.r());
        let expected = -(r + b.transpose() * q * b).try_inverse().unwrap() * b.transpose() * q * a * &x;
        assert!((plan.first_input() - expected).amax() < 1e-12);
        assert!(!plan.refined);
    }

    #[test]
    fn plan_matches_riccati_recursion() {
        let sys = noiseless_uav();
        let chance = benchmarks::uav_chance(0.0);
        let x = Vector::from_column_slice(&[4.0, 1.0, -3.0, 0.5]);
        let settings = MpcSettings { horizon: 6, scenarios: 1, ..MpcSettings::default() };
        let plan = mpc_plan(&sys, &chance, &x, &settings, 2).unwrap();
        for (got, want) in plan.inputs.iter().zip(riccati_sequence(&sys, &x, 6)) {
            assert!((Vector::from_column_slice(got) - want).amax() < 1e-8);
        }
    }

    #[test]
    fn origin_plan_is_zero() {
        let sys = noiseless_uav();
        let chance = benchmarks::uav_chance(0.0);
        let plan = mpc_plan(&sys, &chance, &Vector::zeros(4), &MpcSettings::default(), 3).unwrap();
        assert!(plan.inputs.iter().flatten().all(|u| *u == 0.0));
        assert_eq!(plan.objective, 0.0);
    }

    #[test]
    fn refinement_never_worsens_the_warm_start() {
        let sys = benchmarks::uav_system();
        let chance = benchmarks::uav_chance(100.0);
        let x = Vector::from_column_slice(&[4.0, 1.0, 1.0, 0.5]);
        let plan = mpc_plan(&sys, &chance, &x, &MpcSettings::default(), 4).unwrap();
        assert!(plan.refined);
        assert!(plan.objective <= plan.qp_objective);
    }

    #[test]
    fn noiseless_closed_loop_reaches_origin() {
        let sys = noiseless_uav();
        let chance = benchmarks::uav_chance(0.0);
        let x0 = Vector::from_column_slice(&[10.0, -2.0, 5.0, 1.0]);
        let out = mpc_rollout(&sys, &chance, &x0, 60, 0, &MpcSettings::default(), 5).unwrap();
        let last = out.trajectory.transitions.last().unwrap().next_state();
        assert!(last.norm() < 1e-6, "{last}");
    }

    #[test]
    fn rollout_is_reproducible() {
        let sys = benchmarks::uav_system();
        let chance = benchmarks::uav_chance(10.0);
        let x0 = Vector::zeros(4);
        let s = MpcSettings { generations: 3, ..MpcSettings::default() };
        let a = mpc_rollout(&sys, &chance, &x0, 20, 0, &s, 6).unwrap();
        let b = mpc_rollout(&sys, &chance, &x0, 20, 0, &s, 6).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!((a.j, a.jc), (b.j, b.jc));
    }

    #[test]
    fn alpha_matches_tail_probability() {
        let alpha = clqr_alpha(0.1).unwrap();
        // qᵀXq = αε² puts the tail probability exactly at δ
        let z = 1.0 / alpha.sqrt();
        assert!((risk::normal_upper_tail(z) - 0.1).abs() < 1e-14);
        assert!(clqr_alpha(0.5).is_err());
    }

    #[test]
    fn vacuous_constraint_recovers_lqr() {
        let sys = benchmarks::uav_system();
        let chance = benchmarks::uav_chance(0.0).with_eps(1e6);
        let sol = clqr_solve(&sys, &chance, &Mat::identity(2, 2), &ClqrSettings::default()).unwrap();
        assert!(sol.phase_one.is_empty());
        let klqr = lti::lqr_gain(&sys).unwrap();
        assert!((&sol.k - &klqr).amax() < 1e-4, "{} vs {}", sol.k, klqr);
        let policy = benchmarks::uav_policy(sol.k.clone());
        let j = risk::cost_j(&sol.k, &sys, &policy).unwrap();
        let j_lqr = risk::cost_j(&klqr, &sys, &policy).unwrap();
        assert!((j - j_lqr).abs() <= 1e-6 * j_lqr);
        // the objective omits the constant exploration term Tr(RΣσ)
        assert!((sol.objective + 2.0 - j_lqr).abs() <= 1e-6 * j_lqr);
    }

    #[test]
    fn scalar_binding_constraint_is_active() {
        let (sys, chance, _) = benchmarks::scalar_binding();
        let sol = clqr_solve(&sys, &chance, &Mat::zeros(1, 1), &ClqrSettings::default()).unwrap();
        assert!(!sol.phase_one.is_empty() || sol.trace.len() > 1);
        let qxq = sol.x[(0, 0)];
        let bound = sol.alpha * 4.0;
        assert!((qxq - bound).abs() <= 1e-4 * bound, "{qxq} vs {bound}");
        let policy = LinearGaussianPolicy::deterministic(sol.k.clone());
        let jc = risk::cost_jc(&sol.k, &sys, &chance, &policy).unwrap();
        assert!((jc - 0.05).abs() < 1e-4, "{jc}");
    }

    #[test]
    fn lmi_blocks_are_psd() {
        let sys = benchmarks::uav_system();
        let chance = benchmarks::uav_chance(0.0);
        let sol = clqr_solve(&sys, &chance, &Mat::identity(2, 2), &ClqrSettings::default()).unwrap();
        let w = linalg::symmetrize(&(sys.sigma_w() + sys.b() * sys.b().transpose()));
        let (m1, m2) = sol.lmi_blocks(&sys, &w);
        assert!(linalg::min_sym_eigenvalue(&m1) >= -1e-7);
        assert!(linalg::min_sym_eigenvalue(&m2) >= -1e-7);
        assert!(lti::is_stabilizing(&sys, &sol.k).unwrap());
        let q = chance.direction();
        assert!(q.dot(&(&sol.x * &q)) <= sol.alpha * 25.0 + 1e-7);
    }

    #[test]
    fn infeasible_threshold_is_reported() {
        let (sys, chance, _) = benchmarks::scalar_binding();
        // below the smallest achievable violation probability (≈ 0.023)
        let err = clqr_solve(&sys, &chance.with_delta(0.01), &Mat::zeros(1, 1), &ClqrSettings::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err:?}");
    }
}
