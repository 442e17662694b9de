//! Outer multiplier iteration around any of the policy optimizers, and a
//! grid probe of the dual function.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Traced};
use crate::evaluation::{self, EvalSettings};
use crate::exact_pg::{self, NpgSettings};
use crate::linalg::Mat;
use crate::lti::{self, LinearGaussianPolicy, LtiSystem};
use crate::risk::{self, ChanceSpec};
use crate::rng;
use crate::sample_pg::{self, TrainSettings, Variant};

/// Projected ascent `λ⁺ = max(0, λ + α(J_c − δ))`.
pub fn dual_step(lambda: f64, jc: f64, delta: f64, alpha: f64) -> f64 {
    (lambda + alpha * (jc - delta)).max(0.0)
}

/// Policy optimizer run at each fixed multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", content = "settings", rename_all = "snake_case")]
pub enum InnerSolver {
    ExactNpg(NpgSettings),
    SampleNpg(TrainSettings),
    SampleGnpg(TrainSettings),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualSettings {
    pub iters: usize,
    pub lambda0: f64,
    /// Step `α_{λ,i} = alpha_lambda0 / √(i + 1)`.
    pub alpha_lambda0: f64,
    /// Skip the search for a strictly feasible gain.
    pub skip_slater_check: bool,
    /// Evaluation of `(J, J_c)` for the sample-based solvers.
    pub eval: EvalSettings,
}

impl Default for DualSettings {
    fn default() -> Self {
        Self { iters: 30, lambda0: 0.0, alpha_lambda0: 1000.0, skip_slater_check: false, eval: EvalSettings::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualRecord {
    pub i: usize,
    pub lambda: f64,
    pub k: Mat,
    pub j: f64,
    pub jc: f64,
    pub dual_grad: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DualTrace {
    pub records: Vec<DualRecord>,
}

impl DualTrace {
    pub fn last(&self) -> Option<&DualRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "lambda", "J", "Jc", "dual_grad"])?;
        for r in &self.records {
            w.write_record(&[
                r.i.to_string(),
                r.lambda.to_string(),
                r.j.to_string(),
                r.jc.to_string(),
                r.dual_grad.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Looks for a stabilizing gain with `J_c < δ` among LQR gains of the plant
/// with the input weight rescaled over several decades.
pub fn slater_witness(sys: &LtiSystem, chance: &ChanceSpec, policy: &LinearGaussianPolicy) -> Result<Option<Mat>> {
    for scale in [1.0, 10.0, 100.0, 0.1, 0.01, 1e-3, 1e-4, 1e-6] {
        let scaled = LtiSystem::new(
            sys.a().clone(),
            sys.b().clone(),
            sys.q().clone(),
            sys.r() * scale,
            sys.sigma_w().clone(),
        )?;
        let Ok(k) = lti::lqr_gain(&scaled) else { continue };
        if !lti::is_stabilizing(sys, &k)? {
            continue;
        }
        if risk::cost_jc(&k, sys, chance, policy)? < chance.delta {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Solves the primal problem at `chance.lambda` from `k0`; returns the gain
/// and its `(J, J_c)`.
fn inner_solve(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    k0: &Mat,
    inner: &InnerSolver,
    eval: &EvalSettings,
    seed: u64,
) -> Result<(Mat, f64, f64)> {
    match inner {
        InnerSolver::ExactNpg(s) => {
            let trace = exact_pg::run_exact_npg(k0, sys, chance, policy, s).map_err(|t| t.source)?;
            let k = trace.last().expect("trace holds the start").k.clone();
            let (j, jc, _) = risk::evaluate_all(&k, sys, chance, policy)?;
            Ok((k, j, jc))
        }
        InnerSolver::SampleNpg(s) | InnerSolver::SampleGnpg(s) => {
            let variant = if matches!(inner, InnerSolver::SampleNpg(_)) { Variant::Npg } else { Variant::Gnpg };
            let start = policy.with_gain(k0.clone());
            let out = sample_pg::train(sys, chance, &start, None, s, variant, seed).map_err(|t| t.source)?;
            let k = out.best_k;
            let res = evaluation::evaluate(sys, chance, &policy.with_gain(k.clone()), eval, rng::derive_seed(seed, 1))?;
            Ok((k, res.j, res.jc))
        }
    }
}

/// Alternates a primal solve at fixed `λ_i` (warm-started from the previous
/// gain) with a projected dual step. `chance.lambda` is ignored.
pub fn run_primal_dual(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy0: &LinearGaussianPolicy,
    inner: &InnerSolver,
    settings: &DualSettings,
    seed: u64,
) -> std::result::Result<DualTrace, Traced<DualTrace>> {
    let fail = |trace: DualTrace, source: Error| {
        let len = trace.records.len();
        Err(Traced { trace, len, source })
    };
    if !(settings.alpha_lambda0 > 0.0) || !(settings.lambda0 >= 0.0) {
        return fail(DualTrace::default(), Error::arg("alpha_lambda0 must be positive and lambda0 nonnegative"));
    }
    if !settings.skip_slater_check {
        match slater_witness(sys, chance, policy0) {
            Ok(Some(_)) => {}
            Ok(None) => {
                return fail(
                    DualTrace::default(),
                    Error::Infeasible(format!("no strictly feasible gain found for delta = {}", chance.delta)),
                )
            }
            Err(e) => return fail(DualTrace::default(), e),
        }
    }
    let mut trace = DualTrace::default();
    let mut lambda = settings.lambda0;
    let mut k = policy0.k().clone();
    for i in 0..settings.iters {
        let at = chance.with_lambda(lambda);
        let (k_next, j, jc) =
            match inner_solve(sys, &at, policy0, &k, inner, &settings.eval, rng::derive_seed(seed, i as u64)) {
                Ok(v) => v,
                Err(e) => return fail(trace, e),
            };
        k = k_next;
        let dual_grad = jc - chance.delta;
        trace.records.push(DualRecord { i, lambda, k: k.clone(), j, jc, dual_grad });
        let alpha = settings.alpha_lambda0 / ((i + 1) as f64).sqrt();
        lambda = dual_step(lambda, jc, chance.delta, alpha);
    }
    Ok(trace)
}

const PRIMAL_BISECTIONS: usize = 30;

/// `n` points log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub lambdas: Vec<f64>,
    /// `D(λ) = L(K*(λ), λ)` on the grid.
    pub dual_values: Vec<f64>,
    pub j_values: Vec<f64>,
    pub jc_values: Vec<f64>,
    pub dual_best: f64,
    /// Smallest `J` among feasible (`J_c ≤ δ`) optimizers found on the grid
    /// and by bisecting `λ` across the feasibility switch.
    pub primal_best: f64,
    pub gap: f64,
    /// Secant slopes of `D` are nonincreasing along the grid.
    pub concave: bool,
}

impl DualityReport {
    pub fn relative_gap(&self) -> f64 {
        self.gap / self.primal_best.abs()
    }
}

/// Evaluates the dual function on `lambdas` with exact NPG from `k0` and
/// compares its maximum with the best feasible primal value found.
pub fn duality_gap_probe(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    k0: &Mat,
    lambdas: &[f64],
    npg: &NpgSettings,
) -> Result<DualityReport> {
    if lambdas.is_empty() || lambdas.windows(2).any(|w| !(w[1] > w[0])) || lambdas[0] < 0.0 {
        return Err(Error::arg("lambda grid must be nonnegative and strictly increasing"));
    }
    let points: Vec<(f64, f64, f64)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let at = chance.with_lambda(lambda);
            let trace = exact_pg::run_exact_npg(k0, sys, &at, policy, npg).map_err(|t| t.source)?;
            let k = &trace.last().expect("trace holds the start").k;
            let (j, jc, l) = risk::evaluate_all(k, sys, &at, policy)?;
            Ok((l, j, jc))
        })
        .collect::<Result<_>>()?;
    let dual_values: Vec<f64> = points.iter().map(|p| p.0).collect();
    let j_values: Vec<f64> = points.iter().map(|p| p.1).collect();
    let jc_values: Vec<f64> = points.iter().map(|p| p.2).collect();
    let dual_best = dual_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut primal_best = j_values
        .iter()
        .zip(&jc_values)
        .filter(|(_, jc)| **jc <= chance.delta)
        .map(|(j, _)| *j)
        .fold(f64::INFINITY, f64::min);
    if !primal_best.is_finite() {
        return Err(Error::Infeasible(format!("no grid optimizer satisfies J_c <= {}", chance.delta)));
    }
    // tighten the primal value by bisecting λ across the feasibility switch
    if let Some(i) = (1..lambdas.len()).find(|&i| jc_values[i - 1] > chance.delta && jc_values[i] <= chance.delta) {
        let (mut lo, mut hi) = (lambdas[i - 1], lambdas[i]);
        for _ in 0..PRIMAL_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let at = chance.with_lambda(mid);
            let trace = exact_pg::run_exact_npg(k0, sys, &at, policy, npg).map_err(|t| t.source)?;
            let k = &trace.last().expect("trace holds the start").k;
            let (j, jc, _) = risk::evaluate_all(k, sys, &at, policy)?;
            if jc <= chance.delta {
                primal_best = primal_best.min(j);
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let slopes: Vec<f64> = lambdas
        .windows(2)
        .zip(dual_values.windows(2))
        .map(|(l, d)| (d[1] - d[0]) / (l[1] - l[0]))
        .collect();
    let tol = 1e-9 * dual_best.abs().max(1.0);
    let concave = slopes.windows(2).all(|s| s[1] <= s[0] + tol);
    Ok(DualityReport {
        lambdas: lambdas.to_vec(),
        dual_values,
        j_values,
        jc_values,
        dual_best,
        primal_best,
        gap: primal_best - dual_best,
        concave,
    })
}
