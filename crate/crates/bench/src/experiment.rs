//! Runs a configured method, evaluates the resulting policy and sweeps it
//! over multipliers or thresholds.

use std::time::Instant;

use rayon::prelude::*;
use riskgrad::baselines::{self, ClqrSettings};
use riskgrad::ddpg::{self, DdpgSettings};
use riskgrad::evaluation::{self, EvalResult, EvalSettings};
use riskgrad::exact_pg::{self, DescentTrace, NpgSettings, ProbeSettings, RateFit};
use riskgrad::primal_dual::{self, DualTrace, DualityReport, InnerSolver};
use riskgrad::rng;
use riskgrad::sample_pg::{self, CurveRecord, TrainSettings, Variant};
use riskgrad::{risk, ChanceSpec, Error, LinearGaussianPolicy, LtiSystem, Mat, Vector};
use serde::Serialize;

use crate::config::{Experiment, MethodConfig};
use crate::metrics::MetricsRecord;

/// Replicated ergodic evaluation of a fixed linear-Gaussian policy.
pub fn evaluate_policy(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    eval: &EvalSettings,
    seed: u64,
) -> riskgrad::Result<EvalResult> {
    if !riskgrad::lti::is_stabilizing(sys, policy.k())? {
        let rho = riskgrad::lti::spectral_radius(&sys.closed_loop(policy.k())?)?;
        return Err(Error::Unstable { rho });
    }
    evaluation::evaluate(sys, chance, policy, eval, seed)
}

/// Distance, in standard errors, between the simulated estimates and the
/// closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Discrepancy {
    pub j_closed: f64,
    pub jc_closed: f64,
    pub j_sigmas: f64,
    pub jc_sigmas: f64,
}

impl Discrepancy {
    /// Beyond four standard errors the simulator and the closed forms
    /// disagree, which points at a bug rather than noise.
    pub fn flagged(&self) -> bool {
        self.j_sigmas > 4.0 || self.jc_sigmas > 4.0
    }
}

pub fn closed_form_check(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    est: &EvalResult,
) -> riskgrad::Result<Discrepancy> {
    let (j, jc, _) = risk::evaluate_all(policy.k(), sys, chance, policy)?;
    let sigmas = |got: f64, want: f64, se: f64| {
        let d = (got - want).abs();
        if se > 0.0 {
            d / se
        } else if d <= 1e-12 * want.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        }
    };
    Ok(Discrepancy {
        j_closed: j,
        jc_closed: jc,
        j_sigmas: sigmas(est.j, j, est.j_stderr),
        jc_sigmas: sigmas(est.jc, jc, est.jc_stderr),
    })
}

/// Extra output of a method run, written next to the metrics.
#[derive(Debug, Clone)]
pub enum Artifacts {
    None,
    Curve(Vec<CurveRecord>),
    Descent(DescentTrace),
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    /// Policy that was evaluated; `None` for MPC, which has no fixed gain.
    pub policy: Option<LinearGaussianPolicy>,
    pub eval: EvalResult,
    /// Multiplier the policy belongs to.
    pub lambda: f64,
    pub seconds: f64,
    pub artifacts: Artifacts,
}

impl MethodRun {
    pub fn gain(&self) -> Option<&Mat> {
        self.policy.as_ref().map(|p| p.k())
    }

    pub fn record(&self, method: &str, delta: f64, seed: u64, timing: bool) -> MetricsRecord {
        MetricsRecord {
            method: method.to_string(),
            lambda: self.lambda,
            delta,
            j: self.eval.j,
            jc: self.eval.jc,
            j_stderr: self.eval.j_stderr,
            jc_stderr: self.eval.jc_stderr,
            wallclock: if timing { self.seconds } else { 0.0 },
            seed,
            status: "ok".into(),
        }
    }
}

fn mpc_evaluate(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    settings: &baselines::MpcSettings,
    steps: usize,
    burn_in: usize,
    rollouts: usize,
    seed: u64,
) -> riskgrad::Result<EvalResult> {
    let runs: Vec<(f64, f64)> = (0..rollouts)
        .into_par_iter()
        .map(|i| {
            let x0 = Vector::zeros(sys.n_states());
            let out = baselines::mpc_rollout(sys, chance, &x0, steps, burn_in, settings, rng::derive_seed(seed, i as u64))?;
            Ok((out.j, out.jc))
        })
        .collect::<riskgrad::Result<_>>()?;
    let (j, j_stderr) = evaluation::mean_stderr(&runs.iter().map(|r| r.0).collect::<Vec<_>>());
    let (jc, jc_stderr) = evaluation::mean_stderr(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
    Ok(EvalResult { j, jc, j_stderr, jc_stderr })
}

fn train_pg(
    exp: &Experiment,
    chance: &ChanceSpec,
    k0: &Mat,
    settings: &TrainSettings,
    variant: Variant,
    seed: u64,
) -> riskgrad::Result<(Mat, Vec<CurveRecord>)> {
    let start = exp.policy.with_gain(k0.clone());
    let out = sample_pg::train(&exp.sys, chance, &start, None, settings, variant, seed).map_err(|t| t.source)?;
    Ok((out.best_k, out.curve))
}

fn train_ddpg(exp: &Experiment, chance: &ChanceSpec, k0: &Mat, settings: &DdpgSettings, seed: u64) -> riskgrad::Result<(Mat, Vec<CurveRecord>)> {
    let out = ddpg::train_ddpg(&exp.sys, chance, k0, settings, seed).map_err(|t| t.source)?;
    Ok((out.best_theta, out.curve))
}

fn exact(exp: &Experiment, chance: &ChanceSpec, k0: &Mat, settings: &NpgSettings) -> riskgrad::Result<(Mat, DescentTrace)> {
    let trace = exact_pg::run_exact_npg(k0, &exp.sys, chance, &exp.policy, settings).map_err(|t| t.source)?;
    let k = trace.last().expect("trace holds the start").k.clone();
    Ok((k, trace))
}

fn clqr(exp: &Experiment, chance: &ChanceSpec, settings: &ClqrSettings) -> riskgrad::Result<Mat> {
    Ok(baselines::clqr_solve(&exp.sys, chance, exp.policy.sigma_sigma(), settings)?.k)
}

/// Runs the configured method at `chance` from the gain `k0` and evaluates
/// the result. Evaluation seeds are derived from `seed`.
///
/// Sample-based and exact policy gradients, LQR and CLQR are evaluated with
/// the configured exploration covariance; DDPG's actor is deterministic and
/// evaluated without exploration.
pub fn run_method(exp: &Experiment, chance: &ChanceSpec, k0: &Mat, seed: u64) -> riskgrad::Result<MethodRun> {
    let eval_seed = rng::derive_seed(seed, 0xE7A1);
    let start = Instant::now();
    let (policy, artifacts) = match &exp.method {
        MethodConfig::Npg { settings } => {
            let (k, curve) = train_pg(exp, chance, k0, settings, Variant::Npg, seed)?;
            (exp.policy.with_gain(k), Artifacts::Curve(curve))
        }
        MethodConfig::Gnpg { settings } => {
            let (k, curve) = train_pg(exp, chance, k0, settings, Variant::Gnpg, seed)?;
            (exp.policy.with_gain(k), Artifacts::Curve(curve))
        }
        MethodConfig::Ddpg { settings } => {
            let (k, curve) = train_ddpg(exp, chance, k0, settings, seed)?;
            (LinearGaussianPolicy::deterministic(k), Artifacts::Curve(curve))
        }
        MethodConfig::ExactNpg { settings } => {
            let (k, trace) = exact(exp, chance, k0, settings)?;
            (exp.policy.with_gain(k), Artifacts::Descent(trace))
        }
        MethodConfig::Lqr => (exp.policy.with_gain(riskgrad::lti::lqr_gain(&exp.sys)?), Artifacts::None),
        MethodConfig::Clqr { settings } => (exp.policy.with_gain(clqr(exp, chance, settings)?), Artifacts::None),
        MethodConfig::Mpc { settings, steps, burn_in } => {
            let eval = mpc_evaluate(&exp.sys, chance, settings, *steps, *burn_in, exp.eval.eval_rollouts, eval_seed)?;
            let seconds = start.elapsed().as_secs_f64();
            return Ok(MethodRun { policy: None, eval, lambda: chance.lambda, seconds, artifacts: Artifacts::None });
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let eval = evaluate_policy(&exp.sys, chance, &policy, &exp.eval, eval_seed)?;
    Ok(MethodRun { policy: Some(policy), eval, lambda: chance.lambda, seconds, artifacts })
}

/// One record per multiplier of the grid. Iterative methods start each point
/// from the gain reached at the previous one; a failed point is recorded and
/// the next one restarts from the last good gain.
pub fn sweep_lambda(exp: &Experiment, seed: u64, timing: bool) -> Vec<MetricsRecord> {
    let mut k = exp.policy.k().clone();
    let mut records = Vec::with_capacity(exp.lambda_grid.len());
    for (i, &lambda) in exp.lambda_grid.iter().enumerate() {
        let chance = exp.chance.with_lambda(lambda);
        let point_seed = rng::derive_seed(seed, i as u64);
        match run_method(exp, &chance, &k, point_seed) {
            Ok(run) => {
                if exp.method.is_learner() {
                    if let Some(g) = run.gain() {
                        k = g.clone();
                    }
                }
                records.push(run.record(exp.method.name(), chance.delta, seed, timing));
            }
            Err(e) => records.push(MetricsRecord::failed(exp.method.name(), lambda, chance.delta, seed, e)),
        }
    }
    records
}

/// Solves the thresholded problem at every `δ` of the grid: CLQR directly,
/// policy-gradient methods inside the multiplier iteration. The record's
/// `lambda` is the terminal multiplier.
pub fn sweep_delta(exp: &Experiment, seed: u64, timing: bool) -> riskgrad::Result<(Vec<MetricsRecord>, Vec<DualTrace>)> {
    let inner = match exp.method {
        MethodConfig::ExactNpg { settings } => Some(InnerSolver::ExactNpg(settings)),
        MethodConfig::Npg { settings } => Some(InnerSolver::SampleNpg(settings)),
        MethodConfig::Gnpg { settings } => Some(InnerSolver::SampleGnpg(settings)),
        MethodConfig::Clqr { .. } => None,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "a delta sweep needs exact_npg, npg, gnpg or clqr, not {}",
                exp.method.name()
            )))
        }
    };
    let mut records = Vec::new();
    let mut traces = Vec::new();
    for (i, &delta) in exp.delta_grid.iter().enumerate() {
        let chance = exp.chance.with_delta(delta);
        let point_seed = rng::derive_seed(seed, i as u64);
        let start = Instant::now();
        let outcome = match &inner {
            None => run_method(exp, &chance.with_lambda(0.0), exp.policy.k(), point_seed).map(|r| (r, None)),
            Some(inner) => primal_dual::run_primal_dual(&exp.sys, &chance, &exp.policy, inner, &exp.dual, point_seed)
                .map_err(|t| t.source)
                .and_then(|trace| {
                    let last = trace.last().ok_or_else(|| Error::InvalidArgument("dual.iters must be positive".into()))?;
                    let policy = exp.policy.with_gain(last.k.clone());
                    let eval = evaluate_policy(&exp.sys, &chance, &policy, &exp.eval, rng::derive_seed(point_seed, 0xE7A1))?;
                    let run = MethodRun {
                        policy: Some(policy),
                        eval,
                        lambda: last.lambda,
                        seconds: start.elapsed().as_secs_f64(),
                        artifacts: Artifacts::None,
                    };
                    Ok((run, Some(trace)))
                }),
        };
        match outcome {
            Ok((run, trace)) => {
                records.push(run.record(exp.method.name(), delta, seed, timing));
                traces.extend(trace);
            }
            Err(e) => records.push(MetricsRecord::failed(exp.method.name(), f64::NAN, delta, seed, e)),
        }
    }
    Ok((records, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub lambda: f64,
    pub iterations: usize,
    pub final_lagrangian: f64,
    pub final_grad_norm: f64,
    pub max_spectral_radius: f64,
    pub r_squared: Option<f64>,
    pub beta: Option<f64>,
    pub gain: Vec<Vec<f64>>,
}

/// Exact NPG at the configured multiplier, with the linear-rate fit of
/// `log(L_i − L*)`, `L*` taken from a tighter reference run.
pub fn convergence_probe(exp: &Experiment, npg: &NpgSettings) -> riskgrad::Result<(ConvergenceReport, DescentTrace)> {
    let (_, trace) = exact(exp, &exp.chance, exp.policy.k(), npg)?;
    let last = trace.last().expect("trace holds the start");
    let reference = NpgSettings { tol: npg.tol.min(1e-10), max_iter: npg.max_iter * 4, ..*npg };
    let (k_star, _) = exact(exp, &exp.chance, &last.k, &reference)?;
    let l_star = risk::lagrangian(&k_star, &exp.sys, &exp.chance, &exp.policy)?;
    let fit: Option<RateFit> = exact_pg::fit_linear_rate(&trace.values(), l_star);
    let report = ConvergenceReport {
        lambda: exp.chance.lambda,
        iterations: trace.records.len() - 1,
        final_lagrangian: last.l_value,
        final_grad_norm: last.grad_norm,
        max_spectral_radius: trace.records.iter().map(|r| r.rho).fold(0.0, f64::max),
        r_squared: fit.map(|f| f.r_squared),
        beta: fit.map(|f| f.beta),
        gain: riskgrad::lti::matrix_to_rows(&last.k),
    };
    Ok((report, trace))
}

/// Dual function on 15 log-spaced multipliers in `[0.1, 200]`.
pub fn duality_probe(exp: &Experiment, npg: &NpgSettings) -> riskgrad::Result<DualityReport> {
    let grid = primal_dual::log_grid(0.1, 200.0, 15);
    primal_dual::duality_gap_probe(&exp.sys, &exp.chance, &exp.policy, exp.policy.k(), &grid, npg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeReport {
    pub lambda: f64,
    pub dominance: exact_pg::DominanceReport,
    pub smoothness: exact_pg::SmoothnessReport,
}

/// Empirical gradient-dominance and smoothness constants around the exact
/// optimum at the configured multiplier.
pub fn landscape_probe(exp: &Experiment, npg: &NpgSettings, seed: u64) -> riskgrad::Result<LandscapeReport> {
    let (k_star, _) = exact(exp, &exp.chance, exp.policy.k(), npg)?;
    let settings = ProbeSettings { seed, ..ProbeSettings::default() };
    let dominance = exact_pg::gradient_dominance_probe(&k_star, &exp.sys, &exp.chance, &exp.policy, &settings)?;
    let smoothness = exact_pg::smoothness_probe(&k_star, &exp.sys, &exp.chance, &exp.policy, &settings)?;
    Ok(LandscapeReport { lambda: exp.chance.lambda, dominance, smoothness })
}
