//! Deterministic policy gradient with a replay buffer, slowly tracking
//! target networks and annealed Gaussian exploration. The actor is the
//! linear gain `μ_θ(x) = −θx`; the critic is an MLP over `(x, u)`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Traced};
use crate::evaluation::{self, EvalSettings};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{self, LinearGaussianPolicy, LtiSystem, Transition};
use crate::nn::Mlp;
use crate::risk::{self, ChanceSpec};
use crate::rng::{self, SimRng};
use crate::sample_pg::{self, CurveRecord};

/// Fixed-capacity FIFO store of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Slot that the next push overwrites once the buffer is full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::arg("replay capacity must be positive"));
        }
        Ok(Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), cursor: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.cursor);
        older.iter().chain(newer)
    }

    /// Uniform minibatch of `n` distinct transitions.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<Vec<&Transition>> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.items.len() < n {
            return Err(Error::InsufficientData { needed: n, available: self.items.len() });
        }
        Ok(index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn sample_seeded(&self, n: usize, seed: u64) -> Result<Vec<&Transition>> {
        self.sample(n, &mut rng::seeded(seed))
    }
}

/// Actor gain, critic and their target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpgNets {
    pub theta: Mat,
    pub critic: Mlp,
    pub theta_target: Mat,
    pub critic_target: Mlp,
}

fn joint(x: &Vector, u: &Vector) -> Vector {
    Vector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

impl DdpgNets {
    /// Critic `(n+p) → 10 → 50 → 1`; targets start as copies of the mains.
    pub fn new(theta0: Mat, seed: u64) -> Self {
        let critic = Mlp::critic(theta0.nrows() + theta0.ncols(), seed);
        Self { theta_target: theta0.clone(), critic_target: critic.clone(), theta: theta0, critic }
    }

    pub fn n_states(&self) -> usize {
        self.theta.ncols()
    }

    pub fn action(&self, x: &Vector) -> Vector {
        -(&self.theta * x)
    }

    pub fn q_value(&self, x: &Vector, u: &Vector) -> f64 {
        self.critic.forward(&joint(x, u))
    }

    /// `∇_u Q̂(x, u)`.
    pub fn action_gradient(&self, x: &Vector, u: &Vector) -> Vector {
        let gx = self.critic.input_gradient(&joint(x, u));
        gx.rows(x.len(), u.len()).into_owned()
    }

    fn check_batch(&self, batch: &[&Transition]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (n, p) = (self.theta.ncols(), self.theta.nrows());
        if batch.iter().any(|t| t.x.len() != n || t.x_next.len() != n || t.u.len() != p) {
            return Err(Error::dim("transition does not match the networks"));
        }
        Ok(())
    }

    /// TD loss `(1/N)Σ(y_i − Q̂(x_i,u_i))²` with targets from the target
    /// networks, and its gradient with respect to the critic parameters.
    pub fn critic_loss_gradient(&self, batch: &[&Transition], gamma: f64) -> Result<(f64, Vector)> {
        self.check_batch(batch)?;
        let mut grad = Vector::zeros(self.critic.n_params());
        let mut loss = 0.0;
        for t in batch {
            let xn = t.next_state();
            let un = -(&self.theta_target * &xn);
            let y = t.r + gamma * self.critic_target.forward(&joint(&xn, &un));
            let (q, gq, _) = self.critic.backward(&joint(&t.state(), &t.action()));
            loss += (y - q).powi(2);
            grad.axpy(2.0 * (q - y), &gq, 1.0);
        }
        let n = batch.len() as f64;
        Ok((loss / n, grad / n))
    }

    /// Sampled policy gradient `(1/N)Σ ∇_uQ̂ ∇_θμ_θ`. For `μ_θ(x) = −θx`
    /// this is `−(1/N)Σ ∇_uQ̂ xᵀ`, shaped like `θ`.
    pub fn actor_gradient(&self, batch: &[&Transition]) -> Result<Mat> {
        self.check_batch(batch)?;
        let mut grad = Mat::zeros(self.theta.nrows(), self.theta.ncols());
        for t in batch {
            let x = t.state();
            let gu = self.action_gradient(&x, &self.action(&x));
            grad -= gu * x.transpose();
        }
        Ok(grad / batch.len() as f64)
    }
}

/// One gradient-descent step on the TD loss; returns the loss before it.
pub fn critic_td_step(nets: &mut DdpgNets, batch: &[&Transition], gamma: f64, lr: f64) -> Result<f64> {
    let (loss, grad) = nets.critic_loss_gradient(batch, gamma)?;
    if lr != 0.0 {
        let phi = nets.critic.params_vector() - grad * lr;
        nets.critic.set_params(phi.as_slice())?;
    }
    Ok(loss)
}

/// One gradient-ascent step on the actor; returns the gradient used.
pub fn actor_step(nets: &mut DdpgNets, batch: &[&Transition], lr: f64) -> Result<Mat> {
    let grad = nets.actor_gradient(batch)?;
    if lr != 0.0 {
        nets.theta += &grad * lr;
    }
    Ok(grad)
}

/// `target ← τ main + (1 − τ) target` for the actor and the critic.
pub fn soft_update(nets: &mut DdpgNets, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::arg(format!("tau must lie in (0, 1], got {tau}")));
    }
    nets.theta_target = &nets.theta * tau + &nets.theta_target * (1.0 - tau);
    nets.critic_target.blend_from(&nets.critic, tau);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgSettings {
    pub gamma: f64,
    pub tau: f64,
    /// Learning rate of both actor and critic.
    pub lr: f64,
    /// Exploration covariance is `noise_start·I` in the first episode and
    /// decays geometrically to `noise_end·I`.
    pub noise_start: f64,
    pub noise_end: f64,
    /// Fraction of the episodes after which the final noise level is held.
    pub anneal_fraction: f64,
    /// Minibatch size N.
    pub batch: usize,
    /// Number of episodes M.
    pub episodes: usize,
    /// Steps per episode T.
    pub horizon: usize,
    pub capacity: usize,
    pub x0_std: f64,
    /// Episodes are cut short once the state norm exceeds this bound.
    pub state_bound: f64,
    pub eval_interval: usize,
    pub eval: EvalSettings,
    pub best_of: usize,
}

impl Default for DdpgSettings {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 0.001,
            noise_start: 5.0,
            noise_end: 0.01,
            anneal_fraction: 0.8,
            batch: 64,
            episodes: 2500,
            horizon: 400,
            capacity: 1_000_000,
            x0_std: 1.0,
            state_bound: 1e3,
            eval_interval: 25,
            eval: EvalSettings { eval_steps: 20_000, burn_in: 1_000, eval_rollouts: 5 },
            best_of: 10,
        }
    }
}

impl DdpgSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::arg("gamma must lie in (0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::arg("tau must lie in (0, 1]"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("lr must be nonnegative"));
        }
        if !(self.noise_start > 0.0 && self.noise_end > 0.0) {
            return Err(Error::arg("noise variances must be positive"));
        }
        if !(self.anneal_fraction > 0.0 && self.anneal_fraction <= 1.0) {
            return Err(Error::arg("anneal_fraction must lie in (0, 1]"));
        }
        if self.batch == 0 || self.episodes == 0 || self.horizon == 0 {
            return Err(Error::arg("batch, episodes and horizon must be positive"));
        }
        if self.capacity < self.batch {
            return Err(Error::arg("capacity must hold at least one minibatch"));
        }
        if !(self.x0_std >= 0.0 && self.state_bound > 0.0) {
            return Err(Error::arg("x0_std and state_bound must be nonnegative"));
        }
        self.eval.validate()
    }

    /// Exploration variance used during `episode`.
    pub fn noise_variance(&self, episode: usize) -> f64 {
        let span = (self.anneal_fraction * self.episodes as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.noise_start * (self.noise_end / self.noise_start).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpgOutcome {
    /// One record per episode: mean reward, mean actor gradient norm and
    /// mean TD loss over the episode's updates.
    pub curve: Vec<CurveRecord>,
    pub final_theta: Mat,
    pub best_theta: Mat,
    pub nets: DdpgNets,
    /// Episodes cut short by the state bound.
    pub truncated_episodes: Vec<usize>,
    /// Episodes after which the actor gain was not stabilizing.
    pub unstable_episodes: Vec<usize>,
}

/// Runs the DDPG loop from the actor gain `theta0`.
pub fn train_ddpg(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    theta0: &Mat,
    settings: &DdpgSettings,
    seed: u64,
) -> std::result::Result<DdpgOutcome, Traced<Vec<CurveRecord>>> {
    let fail = |curve: Vec<CurveRecord>, source: Error| {
        let len = curve.len();
        Err(Traced { trace: curve, len, source })
    };
    if let Err(e) = settings.validate() {
        return fail(Vec::new(), e);
    }
    if theta0.shape() != (sys.n_inputs(), sys.n_states()) {
        return fail(Vec::new(), Error::dim("theta0 must be p x n"));
    }
    let mut nets = DdpgNets::new(theta0.clone(), rng::derive_seed(seed, u64::MAX));
    let mut buffer = match ReplayBuffer::new(settings.capacity) {
        Ok(b) => b,
        Err(e) => return fail(Vec::new(), e),
    };
    let eval_seed = rng::derive_seed(seed, u64::MAX - 1);
    let mut r = rng::seeded(seed);
    let mut curve = Vec::with_capacity(settings.episodes);
    let mut evaluated = Vec::new();
    let (mut truncated_episodes, mut unstable_episodes) = (Vec::new(), Vec::new());
    let mut total_steps = 0;
    for episode in 0..settings.episodes {
        let last = episode + 1 == settings.episodes;
        let (mut j_eval, mut jc_eval) = (None, None);
        if settings.eval_interval > 0 && (episode % settings.eval_interval == 0 || last) {
            let policy = LinearGaussianPolicy::deterministic(nets.theta.clone());
            if matches!(lti::is_stabilizing(sys, &nets.theta), Ok(true)) {
                match evaluation::evaluate(sys, chance, &policy, &settings.eval, eval_seed) {
                    Ok(res) => {
                        j_eval = Some(res.j);
                        jc_eval = Some(res.jc);
                        evaluated.push((res.average_return(chance), nets.theta.clone()));
                    }
                    Err(Error::Divergence { .. }) => {}
                    Err(e) => return fail(curve, e),
                }
            }
        }
        let noise_sd = settings.noise_variance(episode).sqrt();
        let mut x = rng::standard_normal(&mut r, sys.n_states()) * settings.x0_std;
        let (mut reward_sum, mut grad_sum, mut loss_sum, mut updates, mut steps) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for _ in 0..settings.horizon {
            let u = nets.action(&x) + rng::standard_normal(&mut r, sys.n_inputs()) * noise_sd;
            let x_next = sys.step(&x, &u, &mut r);
            if !(x_next.norm() <= settings.state_bound) {
                truncated_episodes.push(episode);
                break;
            }
            let reward = match risk::reward(&x, &u, &x_next, sys, chance) {
                Ok(v) => v,
                Err(e) => return fail(curve, e),
            };
            reward_sum += reward;
            steps += 1;
            buffer.push(Transition {
                x: x.as_slice().to_vec(),
                u: u.as_slice().to_vec(),
                r: reward,
                x_next: x_next.as_slice().to_vec(),
            });
            x = x_next;
            if buffer.len() < settings.batch {
                continue;
            }
            let update = buffer.sample(settings.batch, &mut r).and_then(|batch| {
                let loss = critic_td_step(&mut nets, &batch, settings.gamma, settings.lr)?;
                let grad = actor_step(&mut nets, &batch, settings.lr)?;
                soft_update(&mut nets, settings.tau)?;
                Ok((loss, grad.norm()))
            });
            let (loss, grad_norm) = match update {
                Ok(v) => v,
                Err(e) => return fail(curve, e),
            };
            if !loss.is_finite() || !linalg::all_finite(&nets.theta) || nets.critic.params().iter().any(|p| !p.is_finite()) {
                return fail(curve, Error::NonFinite(format!("ddpg parameters at episode {episode}")));
            }
            loss_sum += loss;
            grad_sum += grad_norm;
            updates += 1;
        }
        total_steps += steps;
        if !matches!(lti::is_stabilizing(sys, &nets.theta), Ok(true)) {
            unstable_episodes.push(episode);
        }
        let per_update = |s: f64| if updates > 0 { s / updates as f64 } else { 0.0 };
        curve.push(CurveRecord {
            iter: episode,
            steps: total_steps,
            avg_return: if steps > 0 { reward_sum / steps as f64 } else { 0.0 },
            j_eval,
            jc_eval,
            grad_norm: per_update(grad_sum),
            critic_loss: per_update(loss_sum),
        });
    }
    let final_theta = nets.theta.clone();
    let best_theta = sample_pg::best_average(&evaluated, settings.best_of).unwrap_or_else(|| final_theta.clone());
    Ok(DdpgOutcome { curve, final_theta, best_theta, nets, truncated_episodes, unstable_episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks;

    fn transition(x: &[f64], u: &[f64], r: f64, xn: &[f64]) -> Transition {
        Transition { x: x.to_vec(), u: u.to_vec(), r, x_next: xn.to_vec() }
    }

    fn random_nets(seed: u64) -> DdpgNets {
        let mut nets = DdpgNets::new(Mat::from_row_slice(2, 3, &[0.3, -0.2, 0.1, 0.05, 0.4, -0.3]), seed);
        let p: Vec<f64> = nets.critic.params().iter().enumerate().map(|(i, v)| v + 0.02 * (i % 5) as f64).collect();
        nets.critic.set_params(&p).unwrap();
        nets.critic_target = Mlp::critic(5, seed + 1);
        nets.theta_target = Mat::from_row_slice(2, 3, &[0.1, 0.0, -0.1, 0.2, 0.1, 0.0]);
        nets
    }

    fn random_batch(seed: u64, len: usize) -> Vec<Transition> {
        let mut r = rng::seeded(seed);
        (0..len)
            .map(|_| {
                let x = rng::standard_normal(&mut r, 3);
                let u = rng::standard_normal(&mut r, 2);
                let xn = rng::standard_normal(&mut r, 3);
                let rew = -rng::standard_normal(&mut r, 1)[0].abs();
                transition(x.as_slice(), u.as_slice(), rew, xn.as_slice())
            })
            .collect()
    }

    fn refs(v: &[Transition]) -> Vec<&Transition> {
        v.iter().collect()
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for i in 0..3 {
            buf.push(transition(&[i as f64], &[0.0], 0.0, &[0.0]));
        }
        assert_eq!(buf.len(), 2);
        let xs: Vec<f64> = buf.iter().map(|t| t.x[0]).collect();
        assert_eq!(xs, vec![1.0, 2.0]);
    }

    #[test]
    fn full_sample_is_permutation() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        for i in 0..7 {
            buf.push(transition(&[i as f64], &[0.0], 0.0, &[0.0]));
        }
        let mut xs: Vec<f64> = buf.sample_seeded(7, 3).unwrap().iter().map(|t| t.x[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, (0..7).map(|i| i as f64).collect::<Vec<_>>());
        assert!(matches!(buf.sample_seeded(8, 3), Err(Error::InsufficientData { needed: 8, available: 7 })));
    }

    #[test]
    fn sampling_is_seeded() {
        let mut buf = ReplayBuffer::new(50).unwrap();
        for i in 0..50 {
            buf.push(transition(&[i as f64], &[0.0], 0.0, &[0.0]));
        }
        let a: Vec<f64> = buf.sample_seeded(5, 9).unwrap().iter().map(|t| t.x[0]).collect();
        let b: Vec<f64> = buf.sample_seeded(5, 9).unwrap().iter().map(|t| t.x[0]).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let nets = random_nets(4);
        let data = random_batch(5, 6);
        let batch = refs(&data);
        let (_, grad) = nets.critic_loss_gradient(&batch, 0.9).unwrap();
        let h = 1e-6;
        let base = nets.critic.params().to_vec();
        for i in 0..base.len() {
            let mut up = nets.clone();
            let mut p = base.clone();
            p[i] += h;
            up.critic.set_params(&p).unwrap();
            let mut dn = nets.clone();
            p[i] -= 2.0 * h;
            dn.critic.set_params(&p).unwrap();
            let fd = (up.critic_loss_gradient(&batch, 0.9).unwrap().0 - dn.critic_loss_gradient(&batch, 0.9).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn single_sample_gradient_is_chain_rule() {
        let nets = random_nets(6);
        let data = random_batch(7, 1);
        let t = &data[0];
        let (_, grad) = nets.critic_loss_gradient(&refs(&data), 0.5).unwrap();
        let xn = t.next_state();
        let y = t.r + 0.5 * nets.critic_target.forward(&joint(&xn, &(-(&nets.theta_target * &xn))));
        let (q, gq, _) = nets.critic.backward(&joint(&t.state(), &t.action()));
        assert!((grad - gq * (2.0 * (q - y))).amax() < 1e-14);
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let mut nets = random_nets(8);
        let data = random_batch(9, 1);
        // shift the output bias so the prediction equals the γ = 0 target
        let q = nets.q_value(&data[0].state(), &data[0].action());
        let mut p = nets.critic.params().to_vec();
        *p.last_mut().unwrap() += data[0].r - q;
        nets.critic.set_params(&p).unwrap();
        let (loss, grad) = nets.critic_loss_gradient(&refs(&data), 0.0).unwrap();
        assert!(loss < 1e-28);
        assert!(grad.amax() < 1e-13);
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let nets = random_nets(10);
        let x = Vector::from_column_slice(&[0.5, -1.0, 0.2]);
        let u = Vector::from_column_slice(&[0.3, -0.7]);
        let g = nets.action_gradient(&x, &u);
        for i in 0..2 {
            let h = 1e-6;
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let fd = (nets.q_value(&x, &up) - nets.q_value(&x, &dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let nets = random_nets(11);
        let data = random_batch(12, 5);
        let batch = refs(&data);
        let grad = nets.actor_gradient(&batch).unwrap();
        assert_eq!(grad.shape(), (2, 3));
        let objective = |n: &DdpgNets| {
            batch.iter().map(|t| n.q_value(&t.state(), &n.action(&t.state()))).sum::<f64>() / batch.len() as f64
        };
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut up = nets.clone();
                up.theta[(i, j)] += h;
                let mut dn = nets.clone();
                dn.theta[(i, j)] -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                assert!((fd - grad[(i, j)]).abs() <= 1e-5 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn constant_critic_leaves_actor_alone() {
        let mut nets = random_nets(13);
        let zeros = vec![0.0; nets.critic.n_params()];
        nets.critic.set_params(&zeros).unwrap();
        let data = random_batch(14, 4);
        let before = nets.theta.clone();
        let grad = actor_step(&mut nets, &refs(&data), 0.1).unwrap();
        assert_eq!(grad.amax(), 0.0);
        assert_eq!(nets.theta, before);
    }

    #[test]
    fn soft_update_examples() {
        let mut nets = DdpgNets::new(Mat::from_element(1, 1, 2.0), 1);
        nets.theta_target = Mat::zeros(1, 1);
        soft_update(&mut nets, 0.5).unwrap();
        assert_eq!(nets.theta_target[(0, 0)], 1.0);
        nets.critic_target = Mlp::critic(2, 9);
        soft_update(&mut nets, 1.0).unwrap();
        assert_eq!(nets.theta_target, nets.theta);
        assert_eq!(nets.critic_target, nets.critic);
        assert!(soft_update(&mut nets, 0.0).is_err());
        assert!(soft_update(&mut nets, 1.5).is_err());
    }

    #[test]
    fn targets_track_frozen_mains_geometrically() {
        let mut nets = DdpgNets::new(Mat::from_element(1, 1, 1.0), 1);
        nets.theta_target = Mat::zeros(1, 1);
        let tau = 0.1;
        for k in 1..=50 {
            soft_update(&mut nets, tau).unwrap();
            let gap = (nets.theta[(0, 0)] - nets.theta_target[(0, 0)]).abs();
            assert!((gap - (1.0 - tau).powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn actor_ascends_quadratic_critic() {
        // fit Q(x,u) ≈ −(u + 0.5x)² with one-step targets, then freeze it
        let mut nets = DdpgNets::new(Mat::from_element(1, 1, 0.0), 21);
        let mut r = rng::seeded(22);
        let data: Vec<Transition> = (0..64)
            .map(|_| {
                let x = rng::standard_normal(&mut r, 1)[0];
                let u = 2.0 * rng::standard_normal(&mut r, 1)[0];
                transition(&[x], &[u], -(u + 0.5 * x).powi(2), &[0.0])
            })
            .collect();
        let batch = refs(&data);
        for _ in 0..4000 {
            critic_td_step(&mut nets, &batch, 1e-300, 0.02).unwrap();
        }
        let mut norms = Vec::new();
        for _ in 0..300 {
            norms.push(actor_step(&mut nets, &batch, 0.05).unwrap().norm());
        }
        let tail = &norms[norms.len() - 10..];
        assert!(tail.iter().all(|g| *g < 0.1 * norms[0]), "{} -> {:?}", norms[0], tail);
        assert!((nets.theta[(0, 0)] - 0.5).abs() < 0.15, "theta {}", nets.theta[(0, 0)]);
    }

    #[test]
    fn zero_rate_freezes_actor() {
        let sys = benchmarks::scalar_system();
        let chance = ChanceSpec::new(vec![1.0], 2.0, 0.1, 0.0).unwrap();
        let settings = DdpgSettings {
            lr: 0.0,
            episodes: 5,
            horizon: 40,
            batch: 8,
            eval_interval: 0,
            ..DdpgSettings::default()
        };
        let theta0 = Mat::from_element(1, 1, 0.1);
        let out = train_ddpg(&sys, &chance, &theta0, &settings, 3).unwrap();
        assert_eq!(out.final_theta, theta0);
        assert_eq!(out.curve.len(), 5);
    }

    #[test]
    fn noise_schedule_endpoints() {
        let s = DdpgSettings { episodes: 100, ..DdpgSettings::default() };
        assert!((s.noise_variance(0) - 5.0).abs() < 1e-12);
        assert!((s.noise_variance(80) - 0.01).abs() < 1e-12);
        assert!((s.noise_variance(99) - 0.01).abs() < 1e-12);
        let mid = s.noise_variance(40);
        assert!((mid - (5.0f64 * 0.01).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn training_is_reproducible() {
        let sys = benchmarks::scalar_system();
        let chance = ChanceSpec::new(vec![1.0], 2.0, 0.1, 0.0).unwrap();
        let settings = DdpgSettings { episodes: 3, horizon: 50, batch: 16, eval_interval: 0, ..DdpgSettings::default() };
        let a = train_ddpg(&sys, &chance, &Mat::zeros(1, 1), &settings, 7).unwrap();
        let b = train_ddpg(&sys, &chance, &Mat::zeros(1, 1), &settings, 7).unwrap();
        assert_eq!(a, b);
    }
}
