//! Ergodic-average evaluation of a fixed linear-Gaussian policy: time
//! averages of the stage cost and of the violation indicator after a burn-in,
//! replicated over independent seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::lti::{LinearGaussianPolicy, LtiSystem, DIVERGENCE_NORM};
use crate::risk::{self, ChanceSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub eval_steps: usize,
    pub burn_in: usize,
    /// Independent replications; the standard errors come from their spread.
    pub eval_rollouts: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { eval_steps: 100_000, burn_in: 10_000, eval_rollouts: 5 }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.eval_steps == 0 {
            return Err(Error::arg("eval_steps must be positive"));
        }
        if self.eval_rollouts < 2 {
            return Err(Error::arg("eval_rollouts must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub j: f64,
    pub jc: f64,
    pub j_stderr: f64,
    pub jc_stderr: f64,
}

impl EvalResult {
    /// Average reward `−(J + λ(J_c − δ))` implied by the estimates.
    pub fn average_return(&self, chance: &ChanceSpec) -> f64 {
        -(self.j + chance.lambda * (self.jc - chance.delta))
    }
}

/// Time averages `(mean stage cost, violation frequency)` of one run
/// started from the origin.
pub fn time_averages(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    sys.check_gain(policy.k())?;
    let mut r = rng::seeded(seed);
    let mut x = Vector::zeros(sys.n_states());
    let (mut cost, mut hits) = (0.0, 0usize);
    for step in 0..burn_in + steps {
        let u = policy.act(&x, &mut r);
        let next = sys.step(&x, &u, &mut r);
        let norm = next.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { step, norm });
        }
        if step >= burn_in {
            cost += risk::stage_cost(&x, &u, sys)?;
            hits += usize::from(chance.violated(&next));
        }
        x = next;
    }
    Ok((cost / steps as f64, hits as f64 / steps as f64))
}

/// Sample mean and its standard error.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Replicated evaluation; replication `i` uses `derive_seed(seed, i)`.
pub fn evaluate(
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalResult> {
    settings.validate()?;
    let runs: Vec<(f64, f64)> = (0..settings.eval_rollouts)
        .into_par_iter()
        .map(|i| {
            time_averages(sys, chance, policy, settings.eval_steps, settings.burn_in, rng::derive_seed(seed, i as u64))
        })
        .collect::<Result<_>>()?;
    let costs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let hits: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let (j, j_stderr) = mean_stderr(&costs);
    let (jc, jc_stderr) = mean_stderr(&hits);
    Ok(EvalResult { j, jc, j_stderr, jc_stderr })
}
