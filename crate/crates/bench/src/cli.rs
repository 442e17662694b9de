//! Command-line verbs. Every verb reads `--config` (defaults when absent),
//! optionally overrides the seeds with `--seed`, and writes into `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use riskgrad::exact_pg::{DescentTrace, NpgSettings};
use riskgrad::lti::{matrix_to_rows, rows_to_matrix};
use riskgrad::sample_pg::{self, CurveRecord};
use riskgrad::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{self, ConfigError, Experiment, ExperimentConfig, MethodConfig};
use crate::experiment::{self, Artifacts};
use crate::metrics::{self, Format, MetricsRecord};

/// Environment steps of the full-scale training runs.
pub const FULL_SCALE_STEPS: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Numerical(riskgrad::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Usage(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Io { .. } => 1,
        }
    }
}

impl From<riskgrad::Error> for AppError {
    fn from(e: riskgrad::Error) -> Self {
        if e.is_numerical() {
            AppError::Numerical(e)
        } else {
            AppError::Usage(e.to_string())
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> AppError {
    let context = context.into();
    move |source| AppError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "riskgrad", version, about = "Chance-constrained LQR: policy-gradient training, baselines and sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,

    /// JSON experiment configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run this seed only instead of `evaluation.seeds`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Record wall-clock seconds in the metrics. Off by default so that
    /// repeated runs produce byte-identical files.
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// Fixed multipliers from `chance.lambda_grid`, warm-started in order.
    Lambda,
    /// Thresholds from `chance.delta_grid`, each solved by primal-dual (or CLQR).
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    /// Exact NPG trace and linear-rate fit at the configured multiplier.
    Convergence,
    /// Dual function on a log-spaced multiplier grid and the duality gap.
    Duality,
    /// Gradient-dominance and smoothness constants near the optimum.
    Landscape,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Train a learning method (npg, gnpg, ddpg, exact_npg) at `chance.lambda`.
    Train {
        /// Use the full 5·10⁷-step training budget (hours of runtime).
        #[arg(long)]
        full_scale: bool,
    },
    /// Run a model-based baseline (lqr, clqr, mpc).
    Baseline,
    /// Evaluate a fixed gain and compare against the closed forms.
    Eval {
        /// Gain file written by `train` or `baseline`; defaults to `policy.k0`.
        #[arg(long)]
        gain: Option<PathBuf>,
    },
    /// Run the configured method over `chance.lambda_grid` or `chance.delta_grid`.
    Sweep {
        #[arg(long, value_enum, default_value = "lambda")]
        over: SweepAxis,
        /// Use the full 5·10⁷-step training budget for learning methods.
        #[arg(long)]
        full_scale: bool,
    },
    /// Convergence, duality and landscape probes of the exact problem.
    Probe {
        #[arg(long, value_enum, default_value = "convergence")]
        kind: ProbeKind,
    },
    /// Print the default configuration.
    Defaults,
    /// Print the configuration JSON schema.
    Schema,
}

/// Gain file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainFile {
    pub method: String,
    pub lambda: f64,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

fn write_csv_with(path: &Path, f: impl FnOnce(fs::File) -> std::io::Result<()>) -> Result<(), AppError> {
    let file = fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    f(file).map_err(io_err(format!("writing {}", path.display())))
}

fn emit_metrics(records: &[MetricsRecord], out: &Path) -> Result<(), AppError> {
    for (format, name) in [(Format::Csv, "metrics.csv"), (Format::Json, "metrics.json")] {
        let path = out.join(name);
        metrics::emit(records, format, &path).map_err(io_err(format!("writing {}", path.display())))?;
    }
    Ok(())
}

fn write_curve(curve: &[CurveRecord], path: &Path) -> Result<(), AppError> {
    write_csv_with(path, |f| sample_pg::write_curve_csv(curve, f))
}

fn write_descent(trace: &DescentTrace, path: &Path) -> Result<(), AppError> {
    write_csv_with(path, |f| trace.write_csv(f))
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, Experiment), AppError> {
    let cfg = match &cli.config {
        Some(path) => config::load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let mut exp = cfg.resolve()?;
    if let Some(seed) = cli.seed {
        exp.seeds = vec![seed];
    }
    Ok((cfg, exp))
}

fn apply_full_scale(exp: &mut Experiment, on: bool) {
    if on && matches!(exp.method, MethodConfig::Npg { .. } | MethodConfig::Gnpg { .. } | MethodConfig::Ddpg { .. }) {
        eprintln!("warning: full-scale training uses {FULL_SCALE_STEPS} environment steps per run and takes hours");
        exp.method = exp.method.with_step_budget(FULL_SCALE_STEPS);
    }
}

/// Caps the worker pool at `RISKGRAD_THREADS` when set.
pub fn configure_threads() -> Result<(), AppError> {
    let Ok(value) = std::env::var("RISKGRAD_THREADS") else { return Ok(()) };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| AppError::Usage(format!("RISKGRAD_THREADS must be a positive integer, got {value:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), AppError> {
    match cli.verb {
        Verb::Defaults => {
            println!("{}", ExperimentConfig::default().to_json());
            return Ok(());
        }
        Verb::Schema => {
            print!("{}", config::SCHEMA);
            return Ok(());
        }
        _ => {}
    }
    configure_threads()?;
    let (cfg, mut exp) = load(cli)?;
    fs::create_dir_all(&cli.out).map_err(io_err(format!("creating {}", cli.out.display())))?;
    write_json(&cfg, &cli.out.join("config.json"))?;
    match &cli.verb {
        Verb::Train { full_scale } => {
            if !exp.method.is_learner() {
                return Err(AppError::Usage(format!("train needs npg, gnpg, ddpg or exact_npg, not {}", exp.method.name())));
            }
            apply_full_scale(&mut exp, *full_scale);
            single_runs(cli, &exp)
        }
        Verb::Baseline => {
            if exp.method.is_learner() {
                return Err(AppError::Usage(format!("baseline needs lqr, clqr or mpc, not {}", exp.method.name())));
            }
            single_runs(cli, &exp)
        }
        Verb::Eval { gain } => eval(cli, &exp, gain.as_deref()),
        Verb::Sweep { over, full_scale } => {
            apply_full_scale(&mut exp, *full_scale);
            sweep(cli, &exp, *over)
        }
        Verb::Probe { kind } => probe(cli, &exp, *kind),
        Verb::Defaults | Verb::Schema => unreachable!(),
    }
}

/// One run per seed at `chance.lambda`. Numerical failures are written as
/// failed records before the error is returned.
fn single_runs(cli: &Cli, exp: &Experiment) -> Result<(), AppError> {
    let name = exp.method.name();
    let mut records = Vec::new();
    let mut first_error = None;
    for &seed in &exp.seeds {
        match experiment::run_method(exp, &exp.chance, exp.policy.k(), seed) {
            Ok(run) => {
                records.push(run.record(name, exp.chance.delta, seed, cli.timing));
                if let Some(k) = run.gain() {
                    let file = GainFile { method: name.into(), lambda: exp.chance.lambda, seed, k: matrix_to_rows(k) };
                    write_json(&file, &cli.out.join(format!("gain_seed{seed}.json")))?;
                }
                match &run.artifacts {
                    Artifacts::Curve(c) => write_curve(c, &cli.out.join(format!("curve_seed{seed}.csv")))?,
                    Artifacts::Descent(t) => write_descent(t, &cli.out.join(format!("descent_seed{seed}.csv")))?,
                    Artifacts::None => {}
                }
            }
            Err(e) => {
                records.push(MetricsRecord::failed(name, exp.chance.lambda, exp.chance.delta, seed, &e));
                first_error.get_or_insert(e);
            }
        }
    }
    emit_metrics(&records, &cli.out)?;
    first_error.map_or(Ok(()), |e| Err(e.into()))
}

fn eval(cli: &Cli, exp: &Experiment, gain: Option<&Path>) -> Result<(), AppError> {
    let (k, method, lambda): (Mat, String, f64) = match gain {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
            let file: GainFile = serde_json::from_str(&text)
                .map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
            let k = rows_to_matrix(&file.k)?;
            if k.shape() != exp.policy.k().shape() {
                return Err(AppError::Usage(format!("{}: gain shape does not match the system", path.display())));
            }
            (k, file.method, file.lambda)
        }
        None => (exp.policy.k().clone(), "k0".into(), exp.chance.lambda),
    };
    // DDPG actors are deterministic
    let policy = if method == "ddpg" {
        riskgrad::LinearGaussianPolicy::deterministic(k)
    } else {
        exp.policy.with_gain(k)
    };
    let chance = exp.chance.with_lambda(lambda);
    let mut records = Vec::new();
    let mut checks = Vec::new();
    for &seed in &exp.seeds {
        let res = experiment::evaluate_policy(&exp.sys, &chance, &policy, &exp.eval, seed)?;
        let check = experiment::closed_form_check(&exp.sys, &chance, &policy, &res)?;
        if check.flagged() {
            eprintln!(
                "warning: seed {seed}: simulation disagrees with the closed forms (J off by {:.1}σ, Jc off by {:.1}σ)",
                check.j_sigmas, check.jc_sigmas
            );
        }
        checks.push(check);
        records.push(MetricsRecord {
            method: method.clone(),
            lambda,
            delta: chance.delta,
            j: res.j,
            jc: res.jc,
            j_stderr: res.j_stderr,
            jc_stderr: res.jc_stderr,
            wallclock: 0.0,
            seed,
            status: "ok".into(),
        });
    }
    emit_metrics(&records, &cli.out)?;
    write_json(&checks, &cli.out.join("closed_form_check.json"))
}

fn sweep(cli: &Cli, exp: &Experiment, axis: SweepAxis) -> Result<(), AppError> {
    let runs: Vec<(u64, Result<(Vec<MetricsRecord>, Vec<riskgrad::primal_dual::DualTrace>), riskgrad::Error>)> = {
        use rayon::prelude::*;
        exp.seeds
            .par_iter()
            .map(|&seed| {
                let out = match axis {
                    SweepAxis::Lambda => Ok((experiment::sweep_lambda(exp, seed, cli.timing), Vec::new())),
                    SweepAxis::Delta => experiment::sweep_delta(exp, seed, cli.timing),
                };
                (seed, out)
            })
            .collect()
    };
    let mut records = Vec::new();
    for (seed, out) in runs {
        let (recs, traces) = out?;
        for (i, t) in traces.iter().enumerate() {
            write_csv_with(&cli.out.join(format!("dual_seed{seed}_{i}.csv")), |f| t.write_csv(f))?;
        }
        records.extend(recs);
    }
    emit_metrics(&records, &cli.out)?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        return Err(AppError::Numerical(riskgrad::Error::Sampling(format!(
            "{failed} of {} sweep points failed; see the status column",
            records.len()
        ))));
    }
    Ok(())
}

fn probe(cli: &Cli, exp: &Experiment, kind: ProbeKind) -> Result<(), AppError> {
    let npg = match exp.method {
        MethodConfig::ExactNpg { settings } => settings,
        _ => NpgSettings::default(),
    };
    let path = cli.out.join("probe.json");
    match kind {
        ProbeKind::Convergence => {
            let (report, trace) = experiment::convergence_probe(exp, &npg)?;
            write_descent(&trace, &cli.out.join("descent.csv"))?;
            write_json(&report, &path)
        }
        ProbeKind::Duality => write_json(&experiment::duality_probe(exp, &npg)?, &path),
        ProbeKind::Landscape => {
            let seed = exp.seeds[0];
            write_json(&experiment::landscape_probe(exp, &npg, seed)?, &path)
        }
    }
}
