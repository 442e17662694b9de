//! Experiment configuration: a JSON document whose every block has defaults
//! reproducing the UAV benchmark. Unknown keys are rejected, and semantic
//! checks name the offending field.

use std::path::Path;

use riskgrad::baselines::{ClqrSettings, MpcSettings};
use riskgrad::benchmarks;
use riskgrad::ddpg::DdpgSettings;
use riskgrad::evaluation::EvalSettings;
use riskgrad::exact_pg::NpgSettings;
use riskgrad::lti::{self, matrix_to_rows, rows_to_matrix};
use riskgrad::primal_dual::DualSettings;
use riskgrad::sample_pg::TrainSettings;
use riskgrad::{ChanceSpec, LinearGaussianPolicy, LtiSystem, Mat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The JSON schema describing [`ExperimentConfig`], shipped with the crate.
pub const SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("invalid value for `{field}`: {message}")]
    Schema { field: String, message: String },
}

impl ConfigError {
    fn schema(field: &str, message: impl ToString) -> Self {
        ConfigError::Schema { field: field.to_string(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemBlock {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "SigmaW")]
    pub sigma_w: Vec<Vec<f64>>,
}

impl Default for SystemBlock {
    fn default() -> Self {
        let sys = benchmarks::uav_system();
        Self {
            a: matrix_to_rows(sys.a()),
            b: matrix_to_rows(sys.b()),
            q: matrix_to_rows(sys.q()),
            r: matrix_to_rows(sys.r()),
            sigma_w: matrix_to_rows(sys.sigma_w()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyBlock {
    /// Exploration covariance of the linear-Gaussian policy.
    #[serde(rename = "SigmaSigma")]
    pub sigma_sigma: Vec<Vec<f64>>,
    /// Initial gain; when absent, the LQR gain of the plant with the input
    /// weight inflated a hundredfold.
    pub k0: Option<Vec<Vec<f64>>>,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        Self { sigma_sigma: matrix_to_rows(&Mat::identity(2, 2)), k0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChanceBlock {
    pub q: Vec<f64>,
    pub eps: f64,
    pub delta: f64,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    /// Thresholds visited by a δ-sweep.
    pub delta_grid: Vec<f64>,
}

impl Default for ChanceBlock {
    fn default() -> Self {
        Self {
            q: benchmarks::UAV_Q_DIRECTION.to_vec(),
            eps: benchmarks::UAV_EPS,
            delta: benchmarks::UAV_DEFAULT_DELTA,
            lambda: 10.0,
            lambda_grid: benchmarks::UAV_LAMBDA_GRID.to_vec(),
            delta_grid: benchmarks::UAV_DELTA_GRID.to_vec(),
        }
    }
}

fn default_mpc_steps() -> usize {
    2_000
}

fn default_mpc_burn_in() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodConfig {
    Npg {
        #[serde(default)]
        settings: TrainSettings,
    },
    Gnpg {
        #[serde(default)]
        settings: TrainSettings,
    },
    Ddpg {
        #[serde(default)]
        settings: DdpgSettings,
    },
    ExactNpg {
        #[serde(default)]
        settings: NpgSettings,
    },
    Lqr,
    Clqr {
        #[serde(default)]
        settings: ClqrSettings,
    },
    Mpc {
        #[serde(default)]
        settings: MpcSettings,
        /// Closed-loop steps averaged per evaluation seed; MPC replans every
        /// step, so this is far shorter than the linear-policy evaluation.
        #[serde(default = "default_mpc_steps")]
        steps: usize,
        #[serde(default = "default_mpc_burn_in")]
        burn_in: usize,
    },
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig::Npg { settings: TrainSettings::default() }
    }
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Npg { .. } => "npg",
            MethodConfig::Gnpg { .. } => "gnpg",
            MethodConfig::Ddpg { .. } => "ddpg",
            MethodConfig::ExactNpg { .. } => "exact_npg",
            MethodConfig::Lqr => "lqr",
            MethodConfig::Clqr { .. } => "clqr",
            MethodConfig::Mpc { .. } => "mpc",
        }
    }

    /// Methods that improve a gain iteratively (and so warm-start sweeps).
    pub fn is_learner(&self) -> bool {
        matches!(
            self,
            MethodConfig::Npg { .. } | MethodConfig::Gnpg { .. } | MethodConfig::Ddpg { .. } | MethodConfig::ExactNpg { .. }
        )
    }

    /// Scales the training budget to `steps` environment steps.
    pub fn with_step_budget(self, steps: usize) -> Self {
        match self {
            MethodConfig::Npg { mut settings } | MethodConfig::Gnpg { mut settings } => {
                let per_iter = settings.hyper.m * settings.hyper.t;
                settings.iters = steps.div_ceil(per_iter.max(1));
                if matches!(self, MethodConfig::Npg { .. }) {
                    MethodConfig::Npg { settings }
                } else {
                    MethodConfig::Gnpg { settings }
                }
            }
            MethodConfig::Ddpg { mut settings } => {
                settings.episodes = steps.div_ceil(settings.horizon.max(1));
                MethodConfig::Ddpg { settings }
            }
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationBlock {
    pub eval_steps: usize,
    pub burn_in: usize,
    /// Independent evaluation seeds per policy; standard errors come from
    /// their spread.
    pub eval_rollouts: usize,
    /// Root seeds of independent runs.
    pub seeds: Vec<u64>,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self { eval_steps: 100_000, burn_in: 10_000, eval_rollouts: 5, seeds: vec![0] }
    }
}

impl EvaluationBlock {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings { eval_steps: self.eval_steps, burn_in: self.burn_in, eval_rollouts: self.eval_rollouts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemBlock,
    pub policy: PolicyBlock,
    pub chance: ChanceBlock,
    pub method: MethodConfig,
    /// Outer multiplier iteration used by δ-sweeps.
    pub dual: DualSettings,
    pub evaluation: EvaluationBlock,
}

/// A validated configuration turned into model objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub sys: LtiSystem,
    /// Exploration covariance with the initial gain.
    pub policy: LinearGaussianPolicy,
    pub chance: ChanceSpec,
    pub method: MethodConfig,
    pub dual: DualSettings,
    pub eval: EvalSettings,
    pub lambda_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<Mat, ConfigError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(ConfigError::schema(field, "matrix must be nonempty"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ConfigError::schema(field, "entries must be finite"));
    }
    rows_to_matrix(rows).map_err(|e| ConfigError::schema(field, e))
}

fn check(ok: bool, field: &str, message: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::schema(field, message))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_data() {
                ConfigError::Schema { field, message: inner.to_string() }
            } else {
                ConfigError::Parse { line: inner.line(), column: inner.column(), message: inner.to_string() }
            }
        })?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field and builds the model objects.
    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        let s = &self.system;
        let (a, b) = (matrix(&s.a, "system.A")?, matrix(&s.b, "system.B")?);
        let (n, p) = (a.nrows(), b.ncols());
        check(a.ncols() == n, "system.A", "must be square")?;
        check(b.nrows() == n, "system.B", "must have as many rows as A")?;
        let q = matrix(&s.q, "system.Q")?;
        check(q.shape() == (n, n), "system.Q", "must be n x n")?;
        let r = matrix(&s.r, "system.R")?;
        check(r.shape() == (p, p), "system.R", "must be p x p")?;
        let sw = matrix(&s.sigma_w, "system.SigmaW")?;
        check(sw.shape() == (n, n), "system.SigmaW", "must be n x n")?;
        let sys = LtiSystem::new(a, b, q, r, sw).map_err(|e| ConfigError::schema("system", e))?;

        let sigma_sigma = matrix(&self.policy.sigma_sigma, "policy.SigmaSigma")?;
        check(sigma_sigma.shape() == (p, p), "policy.SigmaSigma", "must be p x p")?;
        let k0 = match &self.policy.k0 {
            Some(rows) => {
                let k = matrix(rows, "policy.k0")?;
                check(k.shape() == (p, n), "policy.k0", "must be p x n")?;
                k
            }
            None => {
                let heavy = LtiSystem::new(sys.a().clone(), sys.b().clone(), sys.q().clone(), sys.r() * 100.0, sys.sigma_w().clone())
                    .map_err(|e| ConfigError::schema("system", e))?;
                lti::lqr_gain(&heavy).map_err(|e| ConfigError::schema("system", e))?
            }
        };
        let policy = LinearGaussianPolicy::new(k0, sigma_sigma).map_err(|e| ConfigError::schema("policy.SigmaSigma", e))?;

        let c = &self.chance;
        check(c.q.len() == n, "chance.q", "must have one entry per state")?;
        check(c.q.iter().all(|v| v.is_finite()) && c.q.iter().any(|v| *v != 0.0), "chance.q", "must be finite and nonzero")?;
        check(c.eps > 0.0 && c.eps.is_finite(), "chance.eps", "must be positive")?;
        check(c.delta > 0.0 && c.delta < 1.0, "chance.delta", "must lie in (0, 1)")?;
        check(c.lambda >= 0.0 && c.lambda.is_finite(), "chance.lambda", "must be nonnegative")?;
        check(!c.lambda_grid.is_empty(), "chance.lambda_grid", "must be nonempty")?;
        check(c.lambda_grid.iter().all(|l| *l >= 0.0 && l.is_finite()), "chance.lambda_grid", "entries must be nonnegative")?;
        check(!c.delta_grid.is_empty(), "chance.delta_grid", "must be nonempty")?;
        check(c.delta_grid.iter().all(|d| *d > 0.0 && *d < 1.0), "chance.delta_grid", "entries must lie in (0, 1)")?;
        let chance = ChanceSpec::new(c.q.clone(), c.eps, c.delta, c.lambda).map_err(|e| ConfigError::schema("chance", e))?;

        let method_err = |e: riskgrad::Error| ConfigError::schema("method.settings", e);
        match &self.method {
            MethodConfig::Npg { settings } | MethodConfig::Gnpg { settings } => {
                settings.hyper.validate().map_err(method_err)?;
                check(settings.iters > 0, "method.settings.iters", "must be positive")?;
                check(settings.eval_interval > 0, "method.settings.eval_interval", "must be positive")?;
                check(settings.best_of > 0, "method.settings.best_of", "must be positive")?;
                settings.eval.validate().map_err(|e| ConfigError::schema("method.settings.eval", e))?;
            }
            MethodConfig::Ddpg { settings } => settings.validate().map_err(method_err)?,
            MethodConfig::ExactNpg { settings } => {
                check(settings.max_iter > 0, "method.settings.max_iter", "must be positive")?;
                check(settings.tol >= 0.0, "method.settings.tol", "must be nonnegative")?;
            }
            MethodConfig::Lqr => {}
            MethodConfig::Clqr { settings } => {
                check(settings.rel_gap > 0.0, "method.settings.rel_gap", "must be positive")?;
                check(settings.max_outer > 0, "method.settings.max_outer", "must be positive")?;
            }
            MethodConfig::Mpc { settings, steps, .. } => {
                settings.validate().map_err(method_err)?;
                check(*steps > 0, "method.steps", "must be positive")?;
            }
        }

        check(self.dual.alpha_lambda0 > 0.0, "dual.alpha_lambda0", "must be positive")?;
        check(self.dual.lambda0 >= 0.0, "dual.lambda0", "must be nonnegative")?;
        check(self.dual.iters > 0, "dual.iters", "must be positive")?;

        let e = &self.evaluation;
        check(e.eval_steps > 0, "evaluation.eval_steps", "must be positive")?;
        check(e.eval_rollouts >= 5, "evaluation.eval_rollouts", "standard errors need at least 5 seeds")?;
        check(!e.seeds.is_empty(), "evaluation.seeds", "must be nonempty")?;

        Ok(Experiment {
            sys,
            policy,
            chance,
            method: self.method,
            dual: self.dual,
            eval: e.settings(),
            lambda_grid: c.lambda_grid.clone(),
            delta_grid: c.delta_grid.clone(),
            seeds: e.seeds.clone(),
        })
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    ExperimentConfig::from_json(&text)
}
