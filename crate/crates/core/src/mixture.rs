//! The mixture-of-regressions teacher.
//!
//! Task `k` (zero-based) owns the coordinate block `[k·d_T, (k+1)·d_T)` of
//! `R^D`, appears with prior `π_k ∝ (k+1)^{-β}` and has the power-law spectrum
//! `λ_{k,j} = (j+1)^{-α_k}` on its block. Because the blocks are axis-aligned,
//! every covariance in the model is diagonal in the standard basis; the dense
//! matrices are only materialized on request.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_task, LabError, Result};

/// Shape and exponents of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub ambient_dim: usize,
    pub num_tasks: usize,
    pub block_dim: usize,
    pub prior_exponent: f64,
    /// One spectrum exponent per task, most frequent task first.
    pub spectrum_exponents: Vec<f64>,
    pub input_std: f64,
}

impl MixtureSpec {
    /// All tasks share the spectrum exponent `alpha`.
    pub fn uniform(ambient_dim: usize, num_tasks: usize, block_dim: usize, beta: f64, alpha: f64) -> Self {
        MixtureSpec {
            ambient_dim,
            num_tasks,
            block_dim,
            prior_exponent: beta,
            spectrum_exponents: vec![alpha; num_tasks],
            input_std: 1.0,
        }
    }

    /// Splits `[alpha_min, alpha_max]` uniformly into `K` values. The most
    /// frequent task gets `alpha_max` (simplest spectrum), the rarest gets
    /// `alpha_min`.
    pub fn with_alpha_range(
        ambient_dim: usize,
        num_tasks: usize,
        block_dim: usize,
        beta: f64,
        alpha_min: f64,
        alpha_max: f64,
    ) -> Self {
        let alphas = if num_tasks <= 1 {
            vec![alpha_max; num_tasks]
        } else {
            let step = (alpha_max - alpha_min) / (num_tasks - 1) as f64;
            (0..num_tasks).map(|k| alpha_max - step * k as f64).collect()
        };
        MixtureSpec {
            ambient_dim,
            num_tasks,
            block_dim,
            prior_exponent: beta,
            spectrum_exponents: alphas,
            input_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.ambient_dim == 0 || self.num_tasks == 0 || self.block_dim == 0 {
            problems.push("D, K and d_T must be positive".to_string());
        }
        if self.num_tasks * self.block_dim > self.ambient_dim {
            problems.push(format!(
                "K*d_T = {} exceeds D = {}; blocks cannot be orthogonal",
                self.num_tasks * self.block_dim,
                self.ambient_dim
            ));
        }
        if !(self.prior_exponent >= 0.0) || !self.prior_exponent.is_finite() {
            problems.push(format!("prior exponent must be >= 0, got {}", self.prior_exponent));
        }
        if self.spectrum_exponents.len() != self.num_tasks {
            problems.push(format!(
                "{} spectrum exponents given for {} tasks",
                self.spectrum_exponents.len(),
                self.num_tasks
            ));
        }
        if let Some(a) = self.spectrum_exponents.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            problems.push(format!("spectrum exponents must be positive, got {a}"));
        }
        if !(self.input_std > 0.0) || !self.input_std.is_finite() {
            problems.push(format!("input std must be positive, got {}", self.input_std));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::InvalidMixture(problems.join("; ")))
        }
    }
}

/// The teacher: priors, spectra and coordinate-block bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub spec: MixtureSpec,
    priors: Vec<f64>,
    spectra: Vec<Vec<f64>>,
}

/// One training batch. Rows of `inputs` and `targets` line up with `task_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub task_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }
}

/// Builds the teacher. `seed` is accepted for a future randomized-basis
/// option; coordinate blocks are deterministic, so it is currently unused.
pub fn build_mixture(spec: MixtureSpec, seed: u64) -> Result<MixtureModel> {
    let _ = seed;
    spec.validate()?;
    let raw: Vec<f64> = (1..=spec.num_tasks).map(|k| (k as f64).powf(-spec.prior_exponent)).collect();
    let total: f64 = raw.iter().sum();
    let priors = raw.iter().map(|w| w / total).collect();
    let spectra = spec
        .spectrum_exponents
        .iter()
        .map(|&alpha| (1..=spec.block_dim).map(|j| (j as f64).powf(-alpha)).collect())
        .collect();
    Ok(MixtureModel { spec, priors, spectra })
}

impl MixtureModel {
    pub fn num_tasks(&self) -> usize {
        self.spec.num_tasks
    }

    pub fn block_dim(&self) -> usize {
        self.spec.block_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.spec.ambient_dim
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn prior(&self, k: usize) -> f64 {
        self.priors[k]
    }

    /// `λ_{k,·}`, nonincreasing.
    pub fn spectrum(&self, k: usize) -> &[f64] {
        &self.spectra[k]
    }

    /// First ambient coordinate of task `k`'s block.
    pub fn block_offset(&self, k: usize) -> usize {
        k * self.spec.block_dim
    }

    /// Ambient coordinate of feature `(k, j)`, i.e. the support of `b_{k,j}`.
    pub fn feature_coord(&self, k: usize, j: usize) -> usize {
        k * self.spec.block_dim + j
    }

    /// `Tr(C_k) = Σ_j λ_{k,j}`.
    pub fn task_trace(&self, k: usize) -> f64 {
        self.spectra[k].iter().sum()
    }

    /// Dense `D×d_T` basis `B_k`.
    pub fn basis(&self, k: usize) -> Result<DMatrix<f64>> {
        check_task(k, self.num_tasks())?;
        let mut b = DMatrix::zeros(self.ambient_dim(), self.block_dim());
        for j in 0..self.block_dim() {
            b[(self.feature_coord(k, j), j)] = 1.0;
        }
        Ok(b)
    }

    /// Diagonal of `Σ_{k∈tasks} π_k C_k` in the ambient basis.
    pub fn weighted_diagonal(&self, tasks: &[usize]) -> DVector<f64> {
        let mut diag = DVector::zeros(self.ambient_dim());
        for &k in tasks {
            for (j, &lam) in self.spectra[k].iter().enumerate() {
                diag[self.feature_coord(k, j)] = self.priors[k] * lam;
            }
        }
        diag
    }

    /// Diagonal of the mixture covariance `M`.
    pub fn mixture_diagonal(&self) -> DVector<f64> {
        let all: Vec<usize> = (0..self.num_tasks()).collect();
        self.weighted_diagonal(&all)
    }

    /// Dense mixture covariance `M = Σ_k π_k C_k`.
    pub fn mixture_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.mixture_diagonal())
    }

    /// Dense `M_F = Σ_{k∈F} π_k C_k`.
    pub fn frequent_covariance(&self, tasks: &[usize]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.weighted_diagonal(tasks))
    }

    /// Teacher output `Λ_k^{1/2} B_kᵀ x`.
    pub fn teacher_output(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let off = self.block_offset(k);
        self.spectra[k].iter().enumerate().map(|(j, lam)| lam.sqrt() * x[off + j]).collect()
    }

    /// `A_k = Λ_k^{1/2} B_kᵀ` as a dense `d_T×D` matrix.
    pub fn teacher_matrix(&self, k: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.block_dim(), self.ambient_dim());
        for (j, lam) in self.spectra[k].iter().enumerate() {
            a[(j, self.feature_coord(k, j))] = lam.sqrt();
        }
        a
    }

    /// Fills targets for given inputs and task ids.
    pub fn targets_for(&self, inputs: &DMatrix<f64>, task_ids: &[usize]) -> DMatrix<f64> {
        let mut targets = DMatrix::zeros(task_ids.len(), self.block_dim());
        for (i, &k) in task_ids.iter().enumerate() {
            let off = self.block_offset(k);
            for (j, lam) in self.spectra[k].iter().enumerate() {
                targets[(i, j)] = lam.sqrt() * inputs[(i, off + j)];
            }
        }
        targets
    }

    /// Gaussian inputs with the given task ids; targets are exact teacher outputs.
    pub fn batch_for_tasks<R: Rng + ?Sized>(&self, task_ids: Vec<usize>, rng: &mut R) -> Batch {
        let std = self.spec.input_std;
        let inputs = DMatrix::from_fn(task_ids.len(), self.ambient_dim(), |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        });
        let targets = self.targets_for(&inputs, &task_ids);
        Batch { inputs, targets, task_ids }
    }
}

/// Draws `batch_size` fresh samples: task ids i.i.d. from the priors, inputs
/// i.i.d. `N(0, σ_in² I)`.
pub fn sample_batch<R: Rng + ?Sized>(model: &MixtureModel, batch_size: usize, rng: &mut R) -> Result<Batch> {
    if batch_size == 0 {
        return Err(LabError::InvalidArgument("batch size must be >= 1".into()));
    }
    let ids = sample_task_ids(model.priors(), batch_size, rng);
    Ok(model.batch_for_tasks(ids, rng))
}

pub(crate) fn sample_task_ids<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    if weights.len() == 1 {
        return vec![0; count];
    }
    let dist = WeightedIndex::new(weights).expect("priors are positive");
    (0..count).map(|_| dist.sample(rng)).collect()
}

/// Dense covariance `C_k = B_k Λ_k B_kᵀ`.
pub fn task_covariance(model: &MixtureModel, k: usize) -> Result<DMatrix<f64>> {
    check_task(k, model.num_tasks())?;
    let mut c = DMatrix::zeros(model.ambient_dim(), model.ambient_dim());
    for (j, &lam) in model.spectrum(k).iter().enumerate() {
        let i = model.feature_coord(k, j);
        c[(i, i)] = lam;
    }
    Ok(c)
}

/// Smallest `r` whose leading `r` eigenvalues carry strictly more than
/// `energy_fraction` of the task's trace.
pub fn complexity_rank(model: &MixtureModel, k: usize, energy_fraction: f64) -> Result<usize> {
    check_task(k, model.num_tasks())?;
    if !(energy_fraction > 0.0 && energy_fraction < 1.0) {
        return Err(LabError::InvalidArgument(format!(
            "energy fraction must lie in (0,1), got {energy_fraction}"
        )));
    }
    let spectrum = model.spectrum(k);
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    for (r, lam) in spectrum.iter().enumerate() {
        acc += lam;
        if acc / total > energy_fraction {
            return Ok(r + 1);
        }
    }
    Ok(spectrum.len())
}
