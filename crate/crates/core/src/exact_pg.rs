//! Natural policy gradient with a known model: `K ← K − α ∇L Σ_K⁻¹`, a
//! backtracking guard, and numerical probes of gradient dominance and
//! smoothness on sublevel sets.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Traced};
use crate::linalg::{self, Mat};
use crate::lti::{self, LinearGaussianPolicy, LtiSystem};
use crate::risk::{self, ChanceSpec, GradientBundle};
use crate::rng;

pub const MAX_HALVINGS: usize = 30;

/// Relative slack used when comparing `L` before and after a step; below it
/// the two values are indistinguishable in floating point.
pub const DESCENT_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum StepRule {
    /// Constant natural step size `α`.
    Fixed(f64),
    /// `α = √(α_a / tr(∇L Σ_K⁻¹ ∇Lᵀ))`, a step of constant metric length.
    Normalized(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentRecord {
    pub iter: usize,
    pub k: Mat,
    pub l_value: f64,
    pub grad_norm: f64,
    pub rho: f64,
    /// Step size that produced this iterate (0 for the initial gain).
    pub alpha: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescentTrace {
    pub records: Vec<DescentRecord>,
}

impl DescentTrace {
    pub fn last(&self) -> Option<&DescentRecord> {
        self.records.last()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.l_value).collect()
    }

    pub fn total_halvings(&self) -> usize {
        self.records.iter().map(|r| r.halvings).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "L", "grad_norm", "rho", "alpha"])?;
        for r in &self.records {
            w.write_record(&[
                r.iter.to_string(),
                r.l_value.to_string(),
                r.grad_norm.to_string(),
                r.rho.to_string(),
                r.alpha.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// `√(α_a / tr(∇L Σ⁻¹ ∇Lᵀ))`, or 0 when the gradient vanishes.
pub fn normalized_alpha(grad_l: &Mat, sigma_k: &Mat, alpha_a: f64) -> Result<f64> {
    if !(alpha_a >= 0.0) {
        return Err(Error::arg("alpha_a must be nonnegative"));
    }
    if grad_l.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let sigma_inv = linalg::spd_inverse(sigma_k)?;
    let quad = (grad_l * sigma_inv * grad_l.transpose()).trace();
    if !(quad > 0.0) {
        return Err(Error::Conditioning(format!("natural-gradient norm {quad:e}")));
    }
    Ok((alpha_a / quad).sqrt())
}

pub fn natural_direction(bundle: &GradientBundle) -> Result<Mat> {
    let sigma_inv = linalg::spd_inverse(&bundle.sigma_k)?;
    Ok(&bundle.grad_l * sigma_inv)
}

/// Result of one guarded step.
#[derive(Debug, Clone)]
pub struct Step {
    pub k: Mat,
    pub alpha: f64,
    pub l_value: f64,
    pub halvings: usize,
}

fn guarded_step(
    k: &Mat,
    l_now: f64,
    direction: &Mat,
    alpha: f64,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
) -> Result<Step> {
    let mut a = alpha;
    let mut last_value = l_now;
    for halvings in 0..=MAX_HALVINGS {
        let cand = k - direction * a;
        if lti::is_stabilizing(sys, &cand)? {
            match risk::lagrangian(&cand, sys, chance, policy) {
                Ok(v) if v <= l_now + DESCENT_SLACK * l_now.abs().max(1.0) => {
                    return Ok(Step { k: cand, alpha: a, l_value: v, halvings });
                }
                Ok(v) => last_value = v,
                Err(e) if e.is_numerical() => {}
                Err(e) => return Err(e),
            }
        }
        a *= 0.5;
    }
    Err(Error::StepFailure {
        halvings: MAX_HALVINGS,
        alpha: a * 2.0,
        value: last_value,
        gain: k.clone(),
    })
}

/// One natural-gradient step `K − α ∇L Σ_K⁻¹`, halving `α` until the gain
/// is stabilizing and `L` does not increase.
pub fn npg_step(
    k: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    alpha: f64,
) -> Result<Step> {
    if !(alpha > 0.0) {
        return Err(Error::arg("alpha must be positive"));
    }
    if !lti::is_stabilizing(sys, k)? {
        return Err(Error::Unstable { rho: lti::spectral_radius(&sys.closed_loop(k)?)? });
    }
    let bundle = risk::grad_exact(k, sys, chance, policy)?;
    let l_now = risk::lagrangian(k, sys, chance, policy)?;
    let dir = natural_direction(&bundle)?;
    guarded_step(k, l_now, &dir, alpha, sys, chance, policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpgSettings {
    pub rule: StepRule,
    pub max_iter: usize,
    /// Stop once the Frobenius norm of `∇L` falls to this value.
    pub tol: f64,
}

impl Default for NpgSettings {
    fn default() -> Self {
        Self { rule: StepRule::Fixed(0.1), max_iter: 5000, tol: 1e-9 }
    }
}

fn record(
    iter: usize,
    k: &Mat,
    l_value: f64,
    grad_norm: f64,
    sys: &LtiSystem,
    alpha: f64,
    halvings: usize,
) -> Result<DescentRecord> {
    Ok(DescentRecord {
        iter,
        k: k.clone(),
        l_value,
        grad_norm,
        rho: lti::spectral_radius(&sys.closed_loop(k)?)?,
        alpha,
        halvings,
    })
}

/// Iterates guarded NPG steps until `‖∇L‖_F ≤ tol` or the budget runs out.
pub fn run_exact_npg(
    k0: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    settings: &NpgSettings,
) -> std::result::Result<DescentTrace, Traced<DescentTrace>> {
    let mut trace = DescentTrace::default();
    let fail = |trace: DescentTrace, source: Error| {
        let len = trace.records.len();
        Err(Traced { trace, len, source })
    };
    match lti::is_stabilizing(sys, k0) {
        Ok(true) => {}
        Ok(false) => {
            let rho = sys
                .closed_loop(k0)
                .and_then(|a| lti::spectral_radius(&a))
                .unwrap_or(f64::NAN);
            return fail(trace, Error::Unstable { rho });
        }
        Err(e) => return fail(trace, e),
    }
    let mut k = k0.clone();
    let mut alpha_used = 0.0;
    let mut halvings = 0;
    for iter in 0..=settings.max_iter {
        let step_data = (|| {
            let bundle = risk::grad_exact(&k, sys, chance, policy)?;
            let l_now = risk::lagrangian(&k, sys, chance, policy)?;
            Ok::<_, Error>((bundle, l_now))
        })();
        let (bundle, l_now) = match step_data {
            Ok(v) => v,
            Err(e) => return fail(trace, e),
        };
        let grad_norm = bundle.grad_l.norm();
        match record(iter, &k, l_now, grad_norm, sys, alpha_used, halvings) {
            Ok(r) => trace.records.push(r),
            Err(e) => return fail(trace, e),
        }
        if grad_norm <= settings.tol || iter == settings.max_iter {
            break;
        }
        let outcome = (|| {
            let dir = natural_direction(&bundle)?;
            let alpha = match settings.rule {
                StepRule::Fixed(a) => a,
                StepRule::Normalized(alpha_a) => normalized_alpha(&bundle.grad_l, &bundle.sigma_k, alpha_a)?,
            };
            if !(alpha > 0.0) {
                return Err(Error::arg("step size must be positive"));
            }
            guarded_step(&k, l_now, &dir, alpha, sys, chance, policy)
        })();
        match outcome {
            Ok(step) => {
                k = step.k;
                alpha_used = step.alpha;
                halvings = step.halvings;
            }
            Err(e) => return fail(trace, e),
        }
    }
    Ok(trace)
}

/// Least-squares fit of `log(L_i − L*)` against `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub r_squared: f64,
    /// Per-iteration contraction factor `exp(slope)`.
    pub beta: f64,
    pub points: usize,
}

/// Residuals `L_i − L*` at or below this multiple of `max(|L*|, 1)` are
/// rounding noise and carry no rate information.
pub const RATE_RESOLUTION: f64 = 1e-12;

/// Fits the linear rate over the final two thirds of `values`. Entries whose
/// residual is below the rounding floor are skipped.
pub fn fit_linear_rate(values: &[f64], l_star: f64) -> Option<RateFit> {
    let start = values.len() / 3;
    let floor = RATE_RESOLUTION * l_star.abs().max(1.0);
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .skip(start)
        .filter(|(_, v)| **v - l_star > floor)
        .map(|(i, v)| (i as f64, (v - l_star).ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some(RateFit { r_squared, beta: slope.exp(), points: pts.len() })
}

/// Sampling settings shared by the two probes. Gains are drawn as
/// `K* + scale·‖K*‖_F·Z` (entrywise standard normal `Z`, with an absolute
/// floor on the scale) and kept when stabilizing with `L(K) ≤ ζ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub samples: usize,
    pub scale: f64,
    /// Sublevel threshold; `None` uses `L(K*) + |L(K*)|`.
    pub zeta: Option<f64>,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { samples: 200, scale: 0.3, zeta: None, seed: 0 }
    }
}

fn sample_sublevel(
    k_star: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    zeta: f64,
    scale: f64,
    seed: u64,
) -> Option<(Mat, f64)> {
    let mut r = rng::seeded(seed);
    let spread = scale * k_star.norm().max(0.1);
    // a handful of shrinking attempts keeps rejection rates reasonable
    for attempt in 0..20 {
        let s = spread * 0.8f64.powi(attempt);
        let z = rng::standard_normal(&mut r, k_star.len());
        let k = k_star + Mat::from_column_slice(k_star.nrows(), k_star.ncols(), z.as_slice()) * s;
        if !matches!(lti::is_stabilizing(sys, &k), Ok(true)) {
            continue;
        }
        if let Ok(v) = risk::lagrangian(&k, sys, chance, policy) {
            if v <= zeta {
                return Some((k, v));
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// `max (L(K) − L*) / ‖∇L(K)‖²` over the accepted samples.
    pub mu_hat: f64,
    pub samples_used: usize,
    pub l_star: f64,
}

/// Empirical gradient-dominance constant on a sublevel set around `K*`.
pub fn gradient_dominance_probe(
    k_star: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    settings: &ProbeSettings,
) -> Result<DominanceReport> {
    let l_star = risk::lagrangian(k_star, sys, chance, policy)?;
    let zeta = settings.zeta.unwrap_or(l_star + l_star.abs().max(1.0));
    let drawn: Vec<Option<(Mat, f64)>> = (0..settings.samples)
        .into_par_iter()
        .map(|i| {
            sample_sublevel(k_star, sys, chance, policy, zeta, settings.scale, rng::derive_seed(settings.seed, i as u64))
        })
        .collect();
    let accepted: Vec<(Mat, f64)> = drawn.into_iter().flatten().collect();
    if accepted.is_empty() && settings.samples > 0 {
        return Err(Error::Sampling("no stabilizing gain found in the sublevel set".into()));
    }
    let ratios: Vec<Option<f64>> = accepted
        .par_iter()
        .map(|(k, v)| {
            let g = risk::grad_exact(k, sys, chance, policy).ok()?;
            let g2 = g.grad_l.norm_squared();
            (g2 > 1e-24).then(|| (v - l_star) / g2)
        })
        .collect();
    let used: Vec<f64> = ratios.into_iter().flatten().collect();
    let mu_hat = used.iter().copied().fold(0.0, f64::max);
    Ok(DominanceReport { mu_hat, samples_used: used.len(), l_star })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    /// `max ‖∇L(K₁) − ∇L(K₂)‖ / ‖K₁ − K₂‖` over sampled pairs.
    pub l_hat: f64,
    /// `2 / (L̂ · tr(Σ_{K*}⁻¹))`.
    pub safe_alpha: f64,
    pub pairs_used: usize,
}

/// Empirical Lipschitz constant of `∇L` on a sublevel set around `K*`.
pub fn smoothness_probe(
    k_star: &Mat,
    sys: &LtiSystem,
    chance: &ChanceSpec,
    policy: &LinearGaussianPolicy,
    settings: &ProbeSettings,
) -> Result<SmoothnessReport> {
    let l_star = risk::lagrangian(k_star, sys, chance, policy)?;
    let zeta = settings.zeta.unwrap_or(l_star + l_star.abs().max(1.0));
    let ratios: Vec<Option<f64>> = (0..settings.samples)
        .into_par_iter()
        .map(|i| {
            let s1 = rng::derive_seed(settings.seed, 2 * i as u64);
            let s2 = rng::derive_seed(settings.seed, 2 * i as u64 + 1);
            let (k1, _) = sample_sublevel(k_star, sys, chance, policy, zeta, settings.scale, s1)?;
            let (k2, _) = sample_sublevel(k_star, sys, chance, policy, zeta, settings.scale, s2)?;
            let dk = (&k1 - &k2).norm();
            if dk == 0.0 {
                return None;
            }
            let g1 = risk::grad_exact(&k1, sys, chance, policy).ok()?;
            let g2 = risk::grad_exact(&k2, sys, chance, policy).ok()?;
            Some((g1.grad_l - g2.grad_l).norm() / dk)
        })
        .collect();
    let used: Vec<f64> = ratios.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Sampling("no usable gain pairs in the sublevel set".into()));
    }
    let l_hat = used.iter().copied().fold(0.0, f64::max);
    let st = risk::Stationary::new(k_star, sys, policy)?;
    let trace_inv = linalg::spd_inverse(&st.sigma_k)?.trace();
    Ok(SmoothnessReport { l_hat, safe_alpha: 2.0 / (l_hat * trace_inv), pairs_used: used.len() })
}
