//! `L(N, D) = L0 + A/N^α + B/D^β` as a calculator: compute-constrained and
//! asymptotic losses, the compute-optimal frontier, and whether a smaller
//! model can catch a larger one by adding data.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingLawParams {
    pub l0: f64,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Published compute-optimal exponent; reported, never used.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// FLOPs per parameter per token, `C = c·N·D`.
    #[serde(default = "default_flops")]
    pub flops_per_param_token: f64,
}

fn default_flops() -> f64 {
    6.0
}

impl ScalingLawParams {
    /// Chinchilla-style exponents with caller-chosen constants.
    pub fn chinchilla_like(l0: f64, a: f64, b: f64) -> Self {
        ScalingLawParams { l0, a, b, alpha: 0.46, beta: 0.51, gamma: Some(0.34), flops_per_param_token: 6.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [("l0", self.l0), ("a", self.a), ("b", self.b)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("flops_per_param_token", self.flops_per_param_token)] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if !problems.is_empty() {
            return Err(LabError::Validation(problems));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if v >= 2.0 {
                log::warn!("{name} = {v} lies outside the usual (0, 2) range");
            }
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LabError::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

pub fn loss(p: &ScalingLawParams, n: f64, d: f64) -> Result<f64> {
    positive("N", n)?;
    positive("D", d)?;
    Ok(p.l0 + p.a / n.powf(p.alpha) + p.b / d.powf(p.beta))
}

/// Tokens affordable at width `n` under budget `c`.
pub fn tokens_for(p: &ScalingLawParams, n: f64, compute: f64) -> Result<f64> {
    positive("N", n)?;
    positive("C", compute)?;
    let d = compute / (p.flops_per_param_token * n);
    if d < 1.0 {
        return Err(LabError::InfeasibleCompute { compute, params: n });
    }
    Ok(d)
}

/// `L_C(N)`: the loss at `D = C / (c·N)`.
pub fn constrained_loss(p: &ScalingLawParams, n: f64, compute: f64) -> Result<f64> {
    let d = tokens_for(p, n, compute)?;
    loss(p, n, d)
}

/// `L_∞(N) = L0 + A/N^α`.
pub fn asymptotic_loss(p: &ScalingLawParams, n: f64) -> Result<f64> {
    positive("N", n)?;
    Ok(p.l0 + p.a / n.powf(p.alpha))
}

/// Stationary point of `L_C`:
/// `N_opt = (αA / (βB))^{1/(α+β)} (C/c)^{β/(α+β)}`. `None` when either
/// term is absent, since the optimum then runs off to a boundary.
pub fn compute_optimal_width(p: &ScalingLawParams, compute: f64) -> Option<f64> {
    if p.a <= 0.0 || p.b <= 0.0 || compute <= 0.0 {
        return None;
    }
    let s = p.alpha + p.beta;
    Some((p.alpha * p.a / (p.beta * p.b)).powf(1.0 / s) * (compute / p.flops_per_param_token).powf(p.beta / s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scalability {
    /// `L_C(N_s) > L_C(N_l)` but `L_∞(N_s) < L_C(N_l)`: more data closes the gap.
    DataScalable,
    /// `L_∞(N_s) − L_C(N_l) > ε`: no amount of data closes the gap.
    ModelScalingRequired,
    Neither,
}

impl std::fmt::Display for Scalability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scalability::DataScalable => "DATA_SCALABLE",
            Scalability::ModelScalingRequired => "MODEL_SCALING_REQUIRED",
            Scalability::Neither => "NEITHER",
        })
    }
}

fn check_pair(n_small: f64, n_large: f64, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(LabError::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    if n_small > n_large {
        return Err(LabError::InvalidArgument(format!("N_s = {n_small} exceeds N_l = {n_large}")));
    }
    Ok(())
}

/// Both budgets are `compute`. Equal sizes are `Neither`.
pub fn classify(p: &ScalingLawParams, n_small: f64, n_large: f64, compute: f64, eps: f64) -> Result<Scalability> {
    check_pair(n_small, n_large, eps)?;
    let lc_large = constrained_loss(p, n_large, compute)?;
    let lc_small = constrained_loss(p, n_small, compute)?;
    let linf_small = asymptotic_loss(p, n_small)?;
    Ok(if linf_small - lc_large > eps {
        Scalability::ModelScalingRequired
    } else if lc_small - lc_large > 0.0 && linf_small - lc_large < 0.0 {
        Scalability::DataScalable
    } else {
        Scalability::Neither
    })
}

/// `N_s*(ε) = (A / (L_C(N_l) + ε − L0))^{1/α}`: every smaller model needs
/// more parameters, not more data. `None` when `A = 0` (no size is too small).
pub fn largest_small_model(p: &ScalingLawParams, n_large: f64, compute: f64, eps: f64) -> Result<Option<f64>> {
    check_pair(0.0, n_large, eps)?;
    let target = constrained_loss(p, n_large, compute)? + eps - p.l0;
    if p.a <= 0.0 || target <= 0.0 {
        return Ok(None);
    }
    Ok(Some((p.a / target).powf(1.0 / p.alpha)))
}

/// Bisection in `log N` for `L_∞(N) = L_C(N_l) + ε`, to relative tolerance `rel_tol`.
pub fn largest_small_model_bisect(
    p: &ScalingLawParams,
    n_large: f64,
    compute: f64,
    eps: f64,
    rel_tol: f64,
) -> Result<Option<f64>> {
    check_pair(0.0, n_large, eps)?;
    if p.a <= 0.0 {
        return Ok(None);
    }
    let target = constrained_loss(p, n_large, compute)? + eps;
    let f = |ln: f64| p.l0 + p.a * (-p.alpha * ln).exp() - target;
    let (mut lo, mut hi) = (-50.0f64, 50.0f64);
    while f(lo) <= 0.0 {
        lo -= 50.0;
        if lo < -5000.0 {
            return Ok(None);
        }
    }
    while f(hi) > 0.0 {
        hi += 50.0;
        if hi > 5000.0 {
            return Ok(None);
        }
    }
    while hi - lo > rel_tol * 0.25 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some((0.5 * (lo + hi)).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub n: f64,
    pub constrained: f64,
    pub asymptotic: f64,
}

/// `L_C(N)` and `L_∞(N)` on a log-spaced grid of widths that leave at least
/// one token each.
pub fn frontier(p: &ScalingLawParams, compute: f64, n_min: f64, n_max: f64, points: usize) -> Result<Vec<FrontierPoint>> {
    positive("N_min", n_min)?;
    if !(n_max > n_min) || points < 2 {
        return Err(LabError::InvalidArgument("frontier needs n_max > n_min and >= 2 points".into()));
    }
    let (a, b) = (n_min.ln(), n_max.ln());
    let mut out = Vec::with_capacity(points);
    for i in 0..points {
        let n = (a + (b - a) * i as f64 / (points - 1) as f64).exp();
        match constrained_loss(p, n, compute) {
            Ok(lc) => out.push(FrontierPoint { n, constrained: lc, asymptotic: asymptotic_loss(p, n)? }),
            Err(LabError::InfeasibleCompute { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Least-squares slope of `log(min_N L_C − L0)` against `log C` over a
/// log-spaced range of budgets.
pub fn frontier_exponent(p: &ScalingLawParams, c_min: f64, c_max: f64, points: usize) -> Result<f64> {
    if !(c_max > c_min && c_min > 0.0) || points < 2 {
        return Err(LabError::InvalidArgument("need 0 < c_min < c_max and >= 2 points".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..points {
        let c = (c_min.ln() + (c_max.ln() - c_min.ln()) * i as f64 / (points - 1) as f64).exp();
        let n = compute_optimal_width(p, c)
            .ok_or_else(|| LabError::InvalidArgument("frontier exponent needs A, B > 0".into()))?;
        xs.push(c.ln());
        ys.push((constrained_loss(p, n, c)? - p.l0).ln());
    }
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(-num / den)
}

/// Plain-text summary of one classification.
pub fn classify_report(p: &ScalingLawParams, n_small: f64, n_large: f64, compute: f64, eps: f64) -> Result<String> {
    use std::fmt::Write;
    let verdict = classify(p, n_small, n_large, compute, eps)?;
    let star = largest_small_model(p, n_large, compute, eps)?;
    let mut s = String::new();
    let _ = writeln!(s, "scaling law: L = {} + {}/N^{} + {}/D^{}", p.l0, p.a, p.alpha, p.b, p.beta);
    let _ = writeln!(s, "compute convention: C = {} * N * D, C = {compute:e}", p.flops_per_param_token);
    let _ = writeln!(s, "N_s = {n_small:e}, N_l = {n_large:e}, epsilon = {eps}");
    let _ = writeln!(s, "L_C(N_s) = {:.6}", constrained_loss(p, n_small, compute)?);
    let _ = writeln!(s, "L_C(N_l) = {:.6}", constrained_loss(p, n_large, compute)?);
    let _ = writeln!(s, "L_inf(N_s) = {:.6}", asymptotic_loss(p, n_small)?);
    match star {
        Some(n) => {
            let _ = writeln!(s, "N_s*(epsilon) = {n:.6e}");
        }
        None => {
            let _ = writeln!(s, "N_s*(epsilon): none, every size can catch up");
        }
    }
    if let Some(n) = compute_optimal_width(p, compute) {
        let _ = writeln!(s, "compute-optimal N at C = {n:.6e}");
    }
    if let Some(g) = p.gamma {
        let _ = writeln!(s, "published frontier exponent gamma = {g}");
    }
    if p.a > 0.0 && p.b > 0.0 {
        let _ = writeln!(s, "fitted frontier exponent = {:.4}", frontier_exponent(p, compute / 100.0, compute * 100.0, 21)?);
    }
    let _ = writeln!(s, "classification: {verdict}");
    Ok(s)
}
