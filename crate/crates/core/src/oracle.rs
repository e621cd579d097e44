//! Closed-form endpoints for a mixture: which features a width-`N`
//! minimizer keeps, what each task then loses, and the widths at which
//! common-task competition relaxes.
//!
//! Orthogonal coordinate blocks make `M` diagonal, so every spectrum here is
//! computed exactly from `π_k λ_{k,j}`; numerical eigendecompositions only
//! appear in tests as cross-checks.

use serde::{Deserialize, Serialize};

use crate::error::{check_task, LabError, Result};
use crate::mixture::MixtureModel;

/// One eigen-feature `(k, j)` of `M` with utility `π_k λ_{k,j}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub task: usize,
    pub mode: usize,
    pub value: f64,
}

/// Utilities sorted descending; ties go to the smaller `(task, mode)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityTable {
    pub entries: Vec<Utility>,
}

impl UtilityTable {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|u| u.value).collect()
    }

    /// Zero-based rank of feature `(task, mode)`.
    pub fn rank_of(&self, task: usize, mode: usize) -> Option<usize> {
        self.entries.iter().position(|u| u.task == task && u.mode == mode)
    }

    /// `Σ_{i>N} u_(i)`, the optimal mixture loss at width `N`.
    pub fn tail_sum(&self, width: usize) -> f64 {
        self.entries.iter().skip(width).map(|u| u.value).sum()
    }
}

pub fn feature_utilities(model: &MixtureModel) -> UtilityTable {
    let mut entries: Vec<Utility> = (0..model.num_tasks())
        .flat_map(|k| {
            model
                .spectrum(k)
                .iter()
                .enumerate()
                .map(move |(j, lam)| Utility { task: k, mode: j, value: model.prior(k) * lam })
        })
        .collect();
    entries.sort_by(|a, b| {
        b.value.total_cmp(&a.value).then(a.task.cmp(&b.task)).then(a.mode.cmp(&b.mode))
    });
    UtilityTable { entries }
}

fn check_width(model: &MixtureModel, width: usize) -> Result<()> {
    let cap = model.num_tasks() * model.block_dim();
    if width > cap {
        return Err(LabError::InvalidArgument(format!("width {width} exceeds K*d_T = {cap}")));
    }
    Ok(())
}

/// `n_k(N)`: how many of task `k`'s features sit among the top-`N` utilities.
/// Widths beyond `K·d_T` keep everything.
pub fn retained_counts(model: &MixtureModel, width: usize) -> Vec<usize> {
    retained_counts_from(&feature_utilities(model), model.num_tasks(), width)
}

pub fn retained_counts_from(table: &UtilityTable, num_tasks: usize, width: usize) -> Vec<usize> {
    let mut counts = vec![0; num_tasks];
    for u in table.entries.iter().take(width) {
        counts[u.task] += 1;
    }
    counts
}

/// `ℓ*_k(N) = Σ_{j>n_k(N)} λ_{k,j}`.
pub fn optimal_task_loss(model: &MixtureModel, k: usize, width: usize) -> Result<f64> {
    check_task(k, model.num_tasks())?;
    check_width(model, width)?;
    let kept = retained_counts(model, width)[k];
    Ok(model.spectrum(k).iter().skip(kept).sum())
}

/// `N*(m)`: smallest width at which every task retains at least `m` modes.
pub fn min_width_for(model: &MixtureModel, m: usize) -> Result<usize> {
    if m == 0 || m > model.block_dim() {
        return Err(LabError::InvalidArgument(format!("m must lie in [1, {}], got {m}", model.block_dim())));
    }
    let table = feature_utilities(model);
    let mut counts = vec![0usize; model.num_tasks()];
    let mut satisfied = 0;
    for (i, u) in table.entries.iter().enumerate() {
        counts[u.task] += 1;
        if counts[u.task] == m {
            satisfied += 1;
            if satisfied == model.num_tasks() {
                return Ok(i + 1);
            }
        }
    }
    unreachable!("every task has d_T >= m modes")
}

/// Smallest width at which task `k` retains at least `m` modes.
pub fn task_critical_width(model: &MixtureModel, k: usize, m: usize) -> Result<usize> {
    check_task(k, model.num_tasks())?;
    if m == 0 || m > model.block_dim() {
        return Err(LabError::InvalidArgument(format!("m must lie in [1, {}], got {m}", model.block_dim())));
    }
    let table = feature_utilities(model);
    Ok(table.rank_of(k, m - 1).expect("feature present") + 1)
}

/// Smallest prefix of prior-sorted tasks whose cumulative prior reaches `mass`.
pub fn frequent_set(model: &MixtureModel, mass: f64) -> Result<Vec<usize>> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(LabError::InvalidArgument(format!("mass must lie in (0,1), got {mass}")));
    }
    let mut order: Vec<usize> = (0..model.num_tasks()).collect();
    order.sort_by(|&a, &b| model.prior(b).total_cmp(&model.prior(a)).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut set = Vec::new();
    for k in order {
        set.push(k);
        acc += model.prior(k);
        // guard against rounding just below the target
        if acc >= mass - 1e-12 {
            break;
        }
    }
    set.sort_unstable();
    Ok(set)
}

/// Eigenvalues `μ^F` of `M_F = Σ_{k∈F} π_k C_k`, descending (nonzero part).
pub fn frequent_spectrum(model: &MixtureModel, tasks: &[usize]) -> Vec<f64> {
    let mut mu: Vec<f64> =
        tasks.iter().flat_map(|&k| model.spectrum(k).iter().map(move |lam| model.prior(k) * lam)).collect();
    mu.sort_by(|a, b| b.total_cmp(a));
    mu
}

/// `δ*_F(N) = Σ_{i>N} μ_i^F`.
pub fn common_residual_optimum(model: &MixtureModel, tasks: &[usize], width: usize) -> f64 {
    tail_sum(&frequent_spectrum(model, tasks), width)
}

pub fn tail_sum(desc: &[f64], width: usize) -> f64 {
    desc.iter().skip(width).sum()
}

/// `N_F(ε) = min{N : Σ_{i>N} μ_i^F ≤ ε}`.
pub fn residual_bound_width(model: &MixtureModel, tasks: &[usize], eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(LabError::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    Ok(residual_bound_width_from(&frequent_spectrum(model, tasks), eps))
}

pub fn residual_bound_width_from(desc: &[f64], eps: f64) -> usize {
    (0..=desc.len()).find(|&n| tail_sum(desc, n) <= eps).unwrap_or(desc.len())
}

/// Leading rare utility `π_r λ_{r,1}`.
pub fn rare_utility(model: &MixtureModel, r: usize) -> f64 {
    model.prior(r) * model.spectrum(r)[0]
}

/// `N_r^crit = min{N ≥ 1 : μ_N^F ≤ π_r λ_{r,1}}`, with `μ_N^F = 0` past the
/// rank of `M_F`.
pub fn invasion_critical_width(model: &MixtureModel, tasks: &[usize], r: usize) -> Result<usize> {
    check_task(r, model.num_tasks())?;
    if tasks.contains(&r) {
        return Err(LabError::InvalidArgument(format!("task {r} belongs to the frequent set")));
    }
    Ok(critical_width_from(&frequent_spectrum(model, tasks), rare_utility(model, r)))
}

pub fn critical_width_from(desc: &[f64], rare_utility: f64) -> usize {
    desc.iter().position(|&mu| mu <= rare_utility).map(|i| i + 1).unwrap_or(desc.len() + 1)
}

/// `μ_N^F` with the past-the-rank convention.
pub fn weakest_common_utility(desc: &[f64], width: usize) -> f64 {
    if width == 0 {
        f64::INFINITY
    } else {
        desc.get(width - 1).copied().unwrap_or(0.0)
    }
}

/// Whether the width-`N` common solution resists rotation toward `b_r`:
/// `π_r λ_r < μ_N^F`.
pub fn stability_check(model: &MixtureModel, tasks: &[usize], r: usize, width: usize) -> Result<bool> {
    check_task(r, model.num_tasks())?;
    let mu = frequent_spectrum(model, tasks);
    Ok(rare_utility(model, r) < weakest_common_utility(&mu, width))
}

/// Loss change when an occupied common direction with eigenvalue `μ_i` is
/// rotated by `θ` toward a rare direction of utility `π_r λ_r`.
pub fn perturbation_loss_change(mu_i: f64, rare_utility: f64, theta: f64) -> f64 {
    (mu_i - rare_utility) * theta.sin().powi(2)
}

/// Per-width oracle quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthOracle {
    pub width: usize,
    pub retained: Vec<usize>,
    pub task_loss: Vec<f64>,
    pub mixture_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareTaskOracle {
    pub task: usize,
    pub utility: f64,
    pub critical_width: usize,
    pub threshold_residual: f64,
}

/// Everything the closed-form analysis predicts for a mixture and a set of widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub utilities: UtilityTable,
    pub widths: Vec<WidthOracle>,
    pub frequent_set: Vec<usize>,
    pub frequent_spectrum: Vec<f64>,
    pub residual_optimum: Vec<(usize, f64)>,
    pub rare: Vec<RareTaskOracle>,
    pub min_width: Vec<(usize, usize)>,
}

impl OracleReport {
    pub fn build(model: &MixtureModel, widths: &[usize], frequent_mass: f64) -> Result<Self> {
        let utilities = feature_utilities(model);
        let widths = widths
            .iter()
            .map(|&n| {
                let retained = retained_counts_from(&utilities, model.num_tasks(), n);
                let task_loss =
                    (0..model.num_tasks()).map(|k| model.spectrum(k).iter().skip(retained[k]).sum()).collect();
                WidthOracle { width: n, retained, task_loss, mixture_loss: utilities.tail_sum(n) }
            })
            .collect::<Vec<_>>();
        let frequent_set = frequent_set(model, frequent_mass)?;
        let mu = frequent_spectrum(model, &frequent_set);
        let residual_optimum = widths.iter().map(|w| (w.width, tail_sum(&mu, w.width))).collect();
        let rare = (0..model.num_tasks())
            .filter(|k| !frequent_set.contains(k))
            .map(|r| {
                let utility = rare_utility(model, r);
                let critical_width = critical_width_from(&mu, utility);
                RareTaskOracle { task: r, utility, critical_width, threshold_residual: tail_sum(&mu, critical_width) }
            })
            .collect();
        let min_width = (1..=model.block_dim()).map(|m| (m, min_width_for(model, m).expect("valid m"))).collect();
        Ok(OracleReport { utilities, widths, frequent_set, frequent_spectrum: mu, residual_optimum, rare, min_width })
    }

    /// Plain-text summary.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "frequent set F = {:?} (|F| = {})", self.frequent_set, self.frequent_set.len());
        let _ = writeln!(s, "top utilities:");
        for (i, u) in self.utilities.entries.iter().take(10).enumerate() {
            let _ = writeln!(s, "  #{:<3} task {:>3} mode {:>3}  u = {:.6e}", i + 1, u.task, u.mode, u.value);
        }
        for w in &self.widths {
            let _ = writeln!(s, "N = {:>4}: L*_N = {:.6e}, retained = {:?}", w.width, w.mixture_loss, w.retained);
        }
        for (m, n) in &self.min_width {
            let _ = writeln!(s, "N*({m}) = {n}");
        }
        if let Some(r) = self.rare.last() {
            let _ = writeln!(
                s,
                "rarest task {}: pi*lambda = {:.6e}, N_crit = {}, delta*_F(N_crit) = {:.6e}",
                r.task, r.utility, r.critical_width, r.threshold_residual
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{build_mixture, MixtureSpec};

    // K=2, β chosen so π = [2/3, 1/3]; α=2, d_T=2
    fn two_task() -> MixtureModel {
        build_mixture(MixtureSpec::uniform(4, 2, 2, 1.0, 2.0), 0).unwrap()
    }

    #[test]
    fn two_task_utility_order() {
        let t = feature_utilities(&two_task());
        let got: Vec<(usize, usize)> = t.entries.iter().map(|u| (u.task, u.mode)).collect();
        assert_eq!(got, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0];
        for (v, w) in t.values().iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
    }

    #[test]
    fn two_task_retention() {
        let m = two_task();
        assert_eq!(retained_counts(&m, 2), vec![1, 1]);
        assert!((optimal_task_loss(&m, 0, 2).unwrap() - 0.25).abs() < 1e-15);
        assert!((optimal_task_loss(&m, 1, 2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(optimal_task_loss(&m, 0, 4).unwrap(), 0.0);
        assert!((optimal_task_loss(&m, 1, 0).unwrap() - m.task_trace(1)).abs() < 1e-15);
        assert_eq!(min_width_for(&m, 1).unwrap(), 2);
        assert_eq!(min_width_for(&m, 2).unwrap(), 4);
        assert!(min_width_for(&m, 3).is_err());
    }

    #[test]
    fn rank_one_min_width_is_k() {
        let m = build_mixture(MixtureSpec::uniform(16, 7, 1, 1.3, 1.0), 0).unwrap();
        assert_eq!(min_width_for(&m, 1).unwrap(), 7);
    }

    #[test]
    fn single_task_order_is_spectrum() {
        let m = build_mixture(MixtureSpec::uniform(8, 1, 4, 0.0, 1.5), 0).unwrap();
        assert_eq!(feature_utilities(&m).values(), m.spectrum(0).to_vec());
    }

    #[test]
    fn frequent_set_sizes_follow_mass_rule() {
        // cumulative priors for K=32 first reach 0.8 at these prefix lengths
        for (beta, size) in [(0.5, 22), (1.0, 14), (1.5, 6), (2.0, 3)] {
            let m = build_mixture(MixtureSpec::uniform(1024, 32, 5, beta, 2.0), 0).unwrap();
            assert_eq!(frequent_set(&m, 0.8).unwrap().len(), size, "beta = {beta}");
        }
        let m = build_mixture(MixtureSpec::uniform(4, 1, 1, 1.0, 1.0), 0).unwrap();
        assert_eq!(frequent_set(&m, 0.8).unwrap(), vec![0]);
    }

    #[test]
    fn residual_tail_sums() {
        let mu = [0.5, 0.3];
        assert!((tail_sum(&mu, 1) - 0.3).abs() < 1e-15);
        assert_eq!(residual_bound_width_from(&mu, 0.1), 2);
        assert_eq!(residual_bound_width_from(&mu, 0.8), 0);
        assert_eq!(residual_bound_width_from(&mu, 0.3), 1);
        assert_eq!(tail_sum(&mu, 5), 0.0);
    }

    #[test]
    fn critical_widths() {
        let mu = [0.5, 0.3, 0.2];
        assert_eq!(critical_width_from(&mu, 0.05), 4);
        assert_eq!(critical_width_from(&mu, 0.25), 3);
        assert_eq!(critical_width_from(&mu, 0.6), 1);
        assert_eq!(weakest_common_utility(&mu, 4), 0.0);
    }

    #[test]
    fn perturbation_formula() {
        assert_eq!(perturbation_loss_change(0.4, 0.1, 0.0), 0.0);
        for th in [0.1, 0.7, 1.4] {
            assert_eq!(perturbation_loss_change(0.25, 0.25, th), 0.0);
        }
        let d = perturbation_loss_change(0.2, 0.25, std::f64::consts::FRAC_PI_2);
        assert!((d + 0.05).abs() < 1e-15);
    }

    #[test]
    fn stability_flips_at_critical_width() {
        let m = build_mixture(MixtureSpec::uniform(1024, 32, 5, 1.0, 2.0), 0).unwrap();
        let f = frequent_set(&m, 0.8).unwrap();
        let r = 31;
        let crit = invasion_critical_width(&m, &f, r).unwrap();
        assert!(stability_check(&m, &f, r, crit - 1).unwrap());
        assert!(!stability_check(&m, &f, r, crit).unwrap());
        assert!(invasion_critical_width(&m, &f, f[0]).is_err());
    }

    #[test]
    fn staircase_identity_rank_one() {
        let m = build_mixture(MixtureSpec::uniform(1024, 32, 1, 2.0, 1.0), 0).unwrap();
        for k in 0..32 {
            assert_eq!(task_critical_width(&m, k, 1).unwrap(), k + 1);
        }
    }

    #[test]
    fn report_sums() {
        let m = build_mixture(MixtureSpec::uniform(200, 32, 5, 1.0, 2.0), 0).unwrap();
        let rep = OracleReport::build(&m, &[0, 8, 16, 160, 170], 0.8).unwrap();
        for w in &rep.widths {
            assert_eq!(w.retained.iter().sum::<usize>(), w.width.min(160));
        }
        assert!(rep.widths.windows(2).all(|p| p[1].mixture_loss <= p[0].mixture_loss));
        assert!(rep.to_text().contains("frequent set"));
        assert!(optimal_task_loss(&m, 0, 160).is_ok());
        assert!(optimal_task_loss(&m, 0, 161).is_err());
    }
}
