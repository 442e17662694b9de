//! Model-free natural and Gauss-Newton policy-gradient actor-critic.
//!
//! The actor is the linear-Gaussian policy; its parameter is the gain `K`
//! flattened row-major. The critic is an [`Mlp`] value network fitted by
//! Gauss-Newton steps. Both updates use steps of fixed metric length,
//! `√(α / gᵀP⁻¹g) P⁻¹g`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Traced};
use crate::evaluation::{self, EvalSettings};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{self, LinearGaussianPolicy, LtiSystem, Trajectory};
use crate::nn::Mlp;
use crate::risk::ChanceSpec;
use crate::rng;

/// Ridge added to the Fisher and Gauss-Newton actor preconditioners.
pub const ACTOR_RIDGE: f64 = 1e-8;
/// Ridge added to the critic Gauss-Newton matrix.
pub const CRITIC_RIDGE: f64 = 1e-6;
pub const CRITIC_HALVINGS: usize = 10;

/// Value network `n → 10 → 50 → 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub net: Mlp,
}

impl CriticNet {
    pub fn new(n_states: usize, seed: u64) -> Self {
        Self { net: Mlp::critic(n_states, seed) }
    }

    pub fn value(&self, x: &Vector) -> f64 {
        self.net.forward(x)
    }

    /// `∇_φ V̂_φ(x)`.
    pub fn jacobian(&self, x: &Vector) -> Vector {
        self.net.param_gradient(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgHyper {
    pub gamma: f64,
    pub eta: f64,
    pub alpha_a: f64,
    pub alpha_c: f64,
    /// Leading steps of each trajectory used in the estimates.
    pub n: usize,
    /// Trajectories per iteration.
    pub m: usize,
    /// Trajectory length.
    pub t: usize,
}

impl Default for PgHyper {
    fn default() -> Self {
        Self { gamma: 0.99, eta: 0.99, alpha_a: 0.005, alpha_c: 0.005, n: 200, m: 10, t: 400 }
    }
}

impl PgHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("eta", self.eta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::arg(format!("{name} must lie in (0, 1)")));
            }
        }
        for (name, v) in [("alpha_a", self.alpha_a), ("alpha_c", self.alpha_c)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("{name} must be nonnegative")));
            }
        }
        if self.n == 0 || self.m == 0 || self.t == 0 {
            return Err(Error::arg("n, m and t must be positive"));
        }
        if self.n > self.t {
            return Err(Error::arg("n cannot exceed the trajectory length t"));
        }
        Ok(())
    }
}

/// `Â_k = Σ_{l=0}^{T−1−k} (γη)^l d_{k+l}` with
/// `d_j = −V_j + r_j + η V_{j+1}`; `values` has one more entry than
/// `rewards` (the value of the final next-state).
pub fn gae_from_values(rewards: &[f64], values: &[f64], gamma: f64, eta: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::dim("need one more value than rewards"));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for k in (0..rewards.len()).rev() {
        let d = -values[k] + rewards[k] + eta * values[k + 1];
        acc = d + gamma * eta * acc;
        out[k] = acc;
    }
    Ok(out)
}

pub fn gae_advantages(traj: &Trajectory, critic: &CriticNet, gamma: f64, eta: f64) -> Result<Vec<f64>> {
    if traj.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut values: Vec<f64> = traj.transitions.iter().map(|t| critic.value(&t.state())).collect();
    values.push(critic.value(&traj.transitions.last().unwrap().next_state()));
    gae_from_values(&traj.rewards(), &values, gamma, eta)
}

/// Truncated discounted returns `V̂_k = Σ_{l=0}^{T−1−k} γ^l r_{k+l}`.
pub fn targets_from_rewards(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for k in (0..rewards.len()).rev() {
        acc = rewards[k] + gamma * acc;
        out[k] = acc;
    }
    out
}

pub fn value_targets(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    targets_from_rewards(&traj.rewards(), gamma)
}

fn exploration_inverse(policy: &LinearGaussianPolicy) -> Result<Mat> {
    let s = policy.sigma_sigma();
    if s.nrows() == 0 || linalg::min_sym_eigenvalue(s) <= 0.0 {
        return Err(Error::ExplorationRequired);
    }
    s.clone().cholesky().map(|c| c.inverse()).ok_or(Error::ExplorationRequired)
}

fn score_with(k: &Mat, sigma_inv: &Mat, x: &Vector, u: &Vector) -> Vector {
    let resid = u + k * x;
    let g = -(sigma_inv * resid) * x.transpose();
    linalg::flatten_row_major(&g)
}

/// `∇_K log π(u | x) = −Σσ⁻¹ (u + K x) xᵀ`, flattened row-major.
pub fn score(policy: &LinearGaussianPolicy, x: &Vector, u: &Vector) -> Result<Vector> {
    let k = policy.k();
    if x.len() != k.ncols() || u.len() != k.nrows() {
        return Err(Error::dim("score operands"));
    }
    Ok(score_with(k, &exploration_inverse(policy)?, x, u))
}

/// State-action pairs with their advantages.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub xs: Vec<Vector>,
    pub us: Vec<Vector>,
    pub advantages: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    fn scores(&self, policy: &LinearGaussianPolicy) -> Result<Vec<Vector>> {
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.us.len() != self.len() {
            return Err(Error::dim("batch states and actions"));
        }
        let sigma_inv = exploration_inverse(policy)?;
        Ok(self.xs.iter().zip(&self.us).map(|(x, u)| score_with(policy.k(), &sigma_inv, x, u)).collect())
    }

    fn advantages_checked(&self) -> Result<&[f64]> {
        if self.advantages.len() != self.len() {
            return Err(Error::dim("batch advantages"));
        }
        Ok(&self.advantages)
    }
}

/// `Ĝ = (1/N) Σ Â_k ∇log π(u_k|x_k)`.
pub fn estimate_g(batch: &Batch, policy: &LinearGaussianPolicy) -> Result<Vector> {
    let scores = batch.scores(policy)?;
    let adv = batch.advantages_checked()?;
    let mut g = Vector::zeros(scores[0].len());
    for (s, a) in scores.iter().zip(adv) {
        g.axpy(*a, s, 1.0);
    }
    Ok(g / batch.len() as f64)
}

fn outer_mean(rows: &[Vector], weights: Option<&[f64]>) -> Mat {
    let d = rows[0].len();
    let mut m = Mat::zeros(d, d);
    for (i, s) in rows.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i] * w[i]);
        m.ger(w, s, s, 1.0);
    }
    m / rows.len() as f64
}

/// Fisher estimate `(1/N) Σ ∇log π ∇log πᵀ`, without regularization.
pub fn estimate_f(batch: &Batch, policy: &LinearGaussianPolicy) -> Result<Mat> {
    Ok(outer_mean(&batch.scores(policy)?, None))
}

/// Gauss-Newton estimate `(1/N) Σ g_a g_aᵀ` with `g_a = Â ∇log π`.
pub fn estimate_ha(batch: &Batch, policy: &LinearGaussianPolicy) -> Result<Mat> {
    let scores = batch.scores(policy)?;
    Ok(outer_mean(&scores, Some(batch.advantages_checked()?)))
}

/// `√(α / gᵀP⁻¹g) P⁻¹g` with `P` regularized by `ridge·I`; zero when `g`
/// vanishes or `α = 0`.
pub fn normalized_ascent(g: &Vector, precond: &Mat, ridge: f64, alpha: f64) -> Result<Vector> {
    if alpha == 0.0 || g.iter().all(|v| *v == 0.0) {
        return Ok(Vector::zeros(g.len()));
    }
    let mut p = precond.clone();
    for i in 0..p.nrows() {
        p[(i, i)] += ridge;
    }
    let dir = linalg::spd_solve(&p, g)?;
    let quad = g.dot(&dir);
    if !(quad > 0.0) {
        return Err(Error::Conditioning(format!("preconditioned norm {quad:e}")));
    }
    Ok(dir * (alpha / quad).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Npg,
    Gnpg,
}

/// Critic data: inputs and regression targets.
#[derive(Debug, Clone, Default)]
pub struct CriticBatch {
    pub xs: Vec<Vector>,
    pub targets: Vec<f64>,
}

pub fn critic_loss(critic: &CriticNet, batch: &CriticBatch) -> f64 {
    let n = batch.xs.len() as f64;
    batch
        .xs
        .iter()
        .zip(&batch.targets)
        .map(|(x, t)| (critic.value(x) - t).powi(2))
        .sum::<f64>()
        / n
}

/// Gauss-Newton matrix `Ĥ = (2/N) Σ ∇V̂(x_k) ∇V̂(x_k)ᵀ` of the critic loss,
/// without regularization. The critic step never forms it; this is for
/// inspection.
pub fn critic_gauss_newton(critic: &CriticNet, xs: &[Vector]) -> Result<Mat> {
    if xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let rows: Vec<Vector> = xs.iter().map(|x| critic.jacobian(x)).collect();
    Ok(outer_mean(&rows, None) * 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStep {
    pub loss_before: f64,
    pub loss_after: f64,
    pub halvings: usize,
    pub accepted: bool,
}

/// One Gauss-Newton step on the mean squared error. The step has metric
/// length `√α_c` along `−Ĥ⁻¹s` and is halved until the loss decreases.
pub fn critic_gn_step(critic: &mut CriticNet, batch: &CriticBatch, alpha_c: f64) -> Result<CriticStep> {
    if batch.xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.targets.len() != batch.xs.len() {
        return Err(Error::dim("critic targets"));
    }
    let n = batch.xs.len();
    let dim = critic.net.n_params();
    let grads: Vec<(f64, Vector)> = batch
        .xs
        .par_iter()
        .map(|x| {
            let (v, g, _) = critic.net.backward(x);
            (v, g)
        })
        .collect();
    let mut jac = Mat::zeros(n, dim);
    let mut s = Vector::zeros(dim);
    let mut loss_before = 0.0;
    for (i, ((v, g), t)) in grads.iter().zip(&batch.targets).enumerate() {
        jac.row_mut(i).copy_from(&g.transpose());
        s.axpy(2.0 * (v - t) / n as f64, g, 1.0);
        loss_before += (v - t).powi(2) / n as f64;
    }
    let unchanged = CriticStep { loss_before, loss_after: loss_before, halvings: 0, accepted: false };
    if alpha_c == 0.0 || s.iter().all(|v| *v == 0.0) {
        return Ok(unchanged);
    }
    let dir = linalg::ridge_gram_solve(&jac, CRITIC_RIDGE, &s)?;
    let quad = s.dot(&dir);
    if !(quad > 0.0) {
        return Ok(unchanged);
    }
    let phi = critic.net.params_vector();
    let mut scale = (alpha_c / quad).sqrt();
    for halvings in 0..=CRITIC_HALVINGS {
        let cand = &phi - &dir * scale;
        let mut trial = critic.clone();
        trial.net.set_params(cand.as_slice())?;
        let loss_after = critic_loss(&trial, batch);
        if loss_after < loss_before {
            *critic = trial;
            return Ok(CriticStep { loss_before, loss_after, halvings, accepted: true });
        }
        scale *= 0.5;
    }
    Ok(CriticStep { halvings: CRITIC_HALVINGS, ..unchanged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub hyper: PgHyper,
    pub iters: usize,
    /// Evaluate the current gain every this many iterations (and at the end).
    pub eval_interval: usize,
    pub eval: EvalSettings,
    /// Standard deviation of the initial state of each trajectory.
    pub x0_std: f64,
    /// Number of best evaluated iterations averaged for the reported gain.
    pub best_of: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hyper: PgHyper::default(),
            iters: 500,
            eval_interval: 10,
            eval: EvalSettings { eval_steps: 20_000, burn_in: 1_000, eval_rollouts: 5 },
            x0_std: 1.0,
            best_of: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iter: usize,
    pub steps: usize,
    pub avg_return: f64,
    pub j_eval: Option<f64>,
    pub jc_eval: Option<f64>,
    pub grad_norm: f64,
    pub critic_loss: f64,
}

pub fn write_curve_csv<W: Write>(records: &[CurveRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "steps", "avg_return", "J_eval", "Jc_eval", "grad_norm", "critic_loss"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record(&[
            r.iter.to_string(),
            r.steps.to_string(),
            r.avg_return.to_string(),
            opt(r.j_eval),
            opt(r.jc_eval),
            r.grad_norm.to_string(),
            r.critic_loss.to_string(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<CurveRecord>,
    pub final_k: Mat,
    /// Mean gain of the `best_of` iterations with the highest evaluated return.
    pub best_k: Mat,
    pub critic: CriticNet,
    /// Iterations whose gain was not stabilizing.
    pub unstable_iters: Vec<usize>,
}

/// Resumable training state, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub k: Vec<Vec<f64>>,
    pub critic: CriticNet,
    /// Root seed and next iteration; together they fix every future draw.
    pub seed: u64,
    pub next_iter: usize,
}

impl Checkpoint {
    pub fn new(k: &Mat, critic: &CriticNet, seed: u64, next_iter: usize) -> Self {
        Self { k: lti::matrix_to_rows(k), critic: critic.clone(), seed, next_iter }
    }

    pub fn gain(&self) -> Result<Mat> {
        lti::rows_to_matrix(&self.k)
    }
}

struct TrajData {
    xs: Vec<Vector>,
    us: Vec<Vector>,
    advantages: Vec<f64>,
    targets: Vec<f64>,
    reward_sum: f64,
    steps: usize,
}

fn collect_trajectory(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    critic: &CriticNet,
    hyper: &PgHyper,
    x0_std: f64,
    seed: u64,
) -> Result<TrajData> {
    let mut r = rng::seeded(seed);
    let x0 = rng::standard_normal(&mut r, sys.n_states()) * x0_std;
    let traj = lti::rollout(sys, policy, chance, hyper.t, &x0, rng::derive_seed(seed, 1))?;
    let advantages = gae_advantages(&traj, critic, hyper.gamma, hyper.eta)?;
    let rewards = traj.rewards();
    let targets = targets_from_rewards(&rewards, hyper.gamma);
    let n = hyper.n;
    Ok(TrajData {
        xs: traj.transitions[..n].iter().map(|t| t.state()).collect(),
        us: traj.transitions[..n].iter().map(|t| t.action()).collect(),
        advantages: advantages[..n].to_vec(),
        targets: targets[..n].to_vec(),
        reward_sum: rewards.iter().sum(),
        steps: traj.len(),
    })
}

/// Result of one actor-critic iteration.
pub struct IterationStats {
    pub grad: Vector,
    pub critic: CriticStep,
    pub avg_return: f64,
    pub steps: usize,
}

/// Collects `M` trajectories under `policy`, then updates the gain and the
/// critic in place.
pub fn train_iteration(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &mut LinearGaussianPolicy,
    critic: &mut CriticNet,
    hyper: &PgHyper,
    variant: Variant,
    x0_std: f64,
    seed: u64,
) -> Result<IterationStats> {
    let data: Vec<TrajData> = (0..hyper.m)
        .into_par_iter()
        .map(|j| collect_trajectory(sys, chance, policy, critic, hyper, x0_std, rng::derive_seed(seed, j as u64)))
        .collect::<Result<_>>()?;
    let mut batch = Batch::default();
    let mut cbatch = CriticBatch::default();
    let (mut reward_sum, mut steps) = (0.0, 0);
    for d in data {
        batch.xs.extend(d.xs.iter().cloned());
        batch.us.extend(d.us);
        batch.advantages.extend(d.advantages);
        cbatch.xs.extend(d.xs);
        cbatch.targets.extend(d.targets);
        reward_sum += d.reward_sum;
        steps += d.steps;
    }
    // equal-length trajectories: pooled means equal the mean of per-trajectory means
    let grad = estimate_g(&batch, policy)?;
    let precond = match variant {
        Variant::Npg => estimate_f(&batch, policy)?,
        Variant::Gnpg => estimate_ha(&batch, policy)?,
    };
    let step = normalized_ascent(&grad, &precond, ACTOR_RIDGE, hyper.alpha_a)?;
    let k = policy.k();
    let theta = linalg::flatten_row_major(k) + step;
    *policy = policy.with_gain(linalg::unflatten_row_major(&theta, k.nrows(), k.ncols()));
    let critic_step = critic_gn_step(critic, &cbatch, hyper.alpha_c)?;
    Ok(IterationStats { grad, critic: critic_step, avg_return: reward_sum / steps as f64, steps })
}

/// Average of the `count` gains with the highest evaluated return.
pub(crate) fn best_average(evaluated: &[(f64, Mat)], count: usize) -> Option<Mat> {
    if evaluated.is_empty() || count == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..evaluated.len()).collect();
    order.sort_by(|&a, &b| evaluated[b].0.total_cmp(&evaluated[a].0).then(a.cmp(&b)));
    let take = count.min(order.len());
    let mut acc = Mat::zeros(evaluated[0].1.nrows(), evaluated[0].1.ncols());
    for &i in &order[..take] {
        acc += &evaluated[i].1;
    }
    Some(acc / take as f64)
}

/// Runs the actor-critic loop. Evaluation rollouts share one seed across
/// iterations so evaluated returns are directly comparable.
pub fn train(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy0: &LinearGaussianPolicy,
    critic0: Option<CriticNet>,
    settings: &TrainSettings,
    variant: Variant,
    seed: u64,
) -> std::result::Result<TrainOutcome, Traced<Vec<CurveRecord>>> {
    let fail = |curve: Vec<CurveRecord>, source: Error| {
        let len = curve.len();
        Err(Traced { trace: curve, len, source })
    };
    if let Err(e) = settings.hyper.validate() {
        return fail(Vec::new(), e);
    }
    match lti::is_stabilizing(sys, policy0.k()) {
        Ok(true) => {}
        Ok(false) => return fail(Vec::new(), Error::Unstable { rho: f64::NAN }),
        Err(e) => return fail(Vec::new(), e),
    }
    let mut policy = policy0.clone();
    let mut critic = critic0.unwrap_or_else(|| CriticNet::new(sys.n_states(), rng::derive_seed(seed, u64::MAX)));
    let eval_seed = rng::derive_seed(seed, u64::MAX - 1);
    let mut curve = Vec::with_capacity(settings.iters);
    let mut evaluated = Vec::new();
    let mut unstable_iters = Vec::new();
    let mut total_steps = 0;
    for iter in 0..settings.iters {
        let iter_seed = rng::derive_seed(seed, iter as u64);
        let k_before = policy.k().clone();
        let stats = match train_iteration(
            sys,
            chance,
            &mut policy,
            &mut critic,
            &settings.hyper,
            variant,
            settings.x0_std,
            iter_seed,
        ) {
            Ok(s) => s,
            Err(e) => return fail(curve, e),
        };
        total_steps += stats.steps;
        let last = iter + 1 == settings.iters;
        let (mut j_eval, mut jc_eval) = (None, None);
        if settings.eval_interval > 0 && (iter % settings.eval_interval == 0 || last) {
            let eval_policy = policy.with_gain(k_before.clone());
            match lti::is_stabilizing(sys, &k_before) {
                Ok(true) => match evaluation::evaluate(sys, chance, &eval_policy, &settings.eval, eval_seed) {
                    Ok(res) => {
                        j_eval = Some(res.j);
                        jc_eval = Some(res.jc);
                        evaluated.push((res.average_return(chance), k_before.clone()));
                    }
                    Err(Error::Divergence { .. }) => {}
                    Err(e) => return fail(curve, e),
                },
                Ok(false) => {}
                Err(e) => return fail(curve, e),
            }
        }
        if !matches!(lti::is_stabilizing(sys, policy.k()), Ok(true)) {
            unstable_iters.push(iter);
        }
        curve.push(CurveRecord {
            iter,
            steps: total_steps,
            avg_return: stats.avg_return,
            j_eval,
            jc_eval,
            grad_norm: stats.grad.norm(),
            critic_loss: stats.critic.loss_before,
        });
    }
    let final_k = policy.k().clone();
    let best_k = best_average(&evaluated, settings.best_of).unwrap_or_else(|| final_k.clone());
    Ok(TrainOutcome { curve, final_k, best_k, critic, unstable_iters })
}
