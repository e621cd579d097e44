//! Training loop for the student on freshly streamed batches.
//!
//! Gradients are the closed-form derivatives of the batch MSE. Updates use
//! AdamW under an inverse-square-root schedule with global-norm clipping. A
//! plain Riemannian gradient-flow stepper on an orthonormal frame is exposed
//! alongside for exact checks of the deterministic dynamics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::{baseline_loss, normalized_loss, normalized_signal, residual_from_frame, signal_from_frame};
use crate::mixture::{sample_batch, Batch, MixtureModel};
use crate::oracle::frequent_spectrum;
use crate::student::{decoder_task_loss, orthonormal_columns, EncoderFrame, StudentModel};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Inverse-square-root schedule: constant for `warmup` steps, then `∝ step^{-1/2}`.
    pub warmup: usize,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub eval_every: usize,
    /// Extra evaluation steps on top of the regular cadence.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eval_at: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 1024,
            base_lr: 1e-3,
            warmup: 1000,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            eval_every: 1000,
            eval_at: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            problems.push(format!("eval_every must lie in [1, steps], got {}", self.eval_every));
        }
        if !(self.clip_norm > 0.0) {
            problems.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.base_lr > 0.0) {
            problems.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || a.weight_decay < 0.0 {
            problems.push("adam: need 0 <= beta < 1, eps > 0, weight_decay >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Validation(problems))
        }
    }
}

/// Gradients for every parameter block of a student.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: DMatrix<f64>,
    pub decoders: Vec<DMatrix<f64>>,
}

impl Gradients {
    pub fn zeros_like(student: &StudentModel) -> Self {
        let w = &student.encoder.weights;
        Gradients {
            encoder: DMatrix::zeros(w.nrows(), w.ncols()),
            decoders: student.decoders.mats.iter().map(|d| DMatrix::zeros(d.nrows(), d.ncols())).collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self.encoder.norm_squared() + self.decoders.iter().map(|d| d.norm_squared()).sum::<f64>();
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.encoder *= factor;
        for d in &mut self.decoders {
            *d *= factor;
        }
    }

    /// Parameter blocks in a fixed order: encoder, then decoders.
    pub fn blocks(&self) -> Vec<&[f64]> {
        std::iter::once(self.encoder.as_slice()).chain(self.decoders.iter().map(|d| d.as_slice())).collect()
    }
}

/// Batch loss with its gradients.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
}

/// Mean squared error over the batch and its exact gradients.
///
/// With `e_i = D_k W x_i − y_i`: `∂/∂D_k = (2/b) Σ_{i∈k} e_i (W x_i)ᵀ` and
/// `∂/∂W = (2/b) Σ_i D_kᵀ e_i x_iᵀ`. The denominator is the full batch size
/// for every task, so rare tasks contribute proportionally small updates.
pub fn loss_gradients(student: &StudentModel, batch: &Batch) -> Result<LossGrad> {
    let b = batch.len();
    if b == 0 {
        return Err(LabError::InvalidArgument("empty batch".into()));
    }
    let w = &student.encoder.weights;
    let n = w.nrows();
    let dt = batch.targets.ncols();
    // hidden activations, one column per sample
    let hidden_t = (&batch.inputs * w.transpose()).transpose();
    let mut dhidden_t = DMatrix::<f64>::zeros(n, b);
    let mut grads_dec: Vec<DMatrix<f64>> =
        student.decoders.mats.iter().map(|d| DMatrix::zeros(d.nrows(), d.ncols())).collect();
    let scale = 2.0 / b as f64;
    let mut loss = 0.0;
    let mut err = vec![0.0; dt];
    for (i, &k) in batch.task_ids.iter().enumerate() {
        let dk = student.decoder(k);
        let h = hidden_t.column(i);
        for o in 0..dt {
            let mut pred = 0.0;
            for c in 0..n {
                pred += dk[(o, c)] * h[c];
            }
            err[o] = pred - batch.targets[(i, o)];
            loss += err[o] * err[o];
        }
        let gk = &mut grads_dec[k];
        let mut dh = dhidden_t.column_mut(i);
        for c in 0..n {
            let mut acc = 0.0;
            for o in 0..dt {
                gk[(o, c)] += scale * err[o] * h[c];
                acc += dk[(o, c)] * err[o];
            }
            dh[c] = scale * acc;
        }
    }
    let grad_enc = &dhidden_t * &batch.inputs;
    Ok(LossGrad { loss: loss / b as f64, grads: Gradients { encoder: grad_enc, decoders: grads_dec } })
}

/// Which covariance drives a Riemannian gradient.
#[derive(Debug, Clone, Copy)]
pub enum CovarianceSelector<'a> {
    Task(usize),
    Tasks(&'a [usize]),
    Mixture,
}

/// `G = 2 (I − P_U) C U` on the orthonormal frame `U`, with its Frobenius norm.
pub fn riemannian_task_gradient(
    frame: &EncoderFrame,
    model: &MixtureModel,
    which: CovarianceSelector<'_>,
) -> (DMatrix<f64>, f64) {
    let diag = covariance_diagonal(model, which);
    riemannian_gradient_diag(&frame.basis, &diag)
}

fn covariance_diagonal(model: &MixtureModel, which: CovarianceSelector<'_>) -> DVector<f64> {
    match which {
        CovarianceSelector::Task(k) => {
            let mut d = DVector::zeros(model.ambient_dim());
            for (j, lam) in model.spectrum(k).iter().enumerate() {
                d[model.feature_coord(k, j)] = *lam;
            }
            d
        }
        CovarianceSelector::Tasks(ts) => model.weighted_diagonal(ts),
        CovarianceSelector::Mixture => model.mixture_diagonal(),
    }
}

fn riemannian_gradient_diag(basis: &DMatrix<f64>, diag: &DVector<f64>) -> (DMatrix<f64>, f64) {
    let mut cu = basis.clone();
    for (i, mut row) in cu.row_iter_mut().enumerate() {
        row *= diag[i];
    }
    let proj = basis * basis.tr_mul(&cu);
    let g = (cu - proj) * 2.0;
    let norm = g.norm();
    (g, norm)
}

/// `2 √(λ_1(M_F) δ_F(U))`, the ceiling on `‖G_F‖_F`.
pub fn frequent_gradient_bound(model: &MixtureModel, tasks: &[usize], residual: f64) -> f64 {
    let top = frequent_spectrum(model, tasks).first().copied().unwrap_or(0.0);
    2.0 * (top * residual.max(0.0)).sqrt()
}

/// Decoupled-weight-decay Adam update of one parameter block.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Moments and step count for every student parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(student: &StudentModel) -> Self {
        let sizes: Vec<usize> = std::iter::once(student.encoder.weights.len())
            .chain(student.decoders.mats.iter().map(|d| d.len()))
            .collect();
        AdamState {
            step: 0,
            first: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            second: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

/// One AdamW step over all student parameters.
pub fn adam_step(student: &mut StudentModel, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step;
    let params = std::iter::once(student.encoder.weights.as_mut_slice())
        .chain(student.decoders.mats.iter_mut().map(|d| d.as_mut_slice()));
    for (i, (p, g)) in params.zip(grads.blocks()).enumerate() {
        adam_update(p, g, &mut state.first[i], &mut state.second[i], t, lr, cfg);
    }
}

/// `base_lr · min(1, √(warmup / max(step, 1)))`.
pub fn lr_at(step: usize, base_lr: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    base_lr * (warmup as f64 / s).sqrt().min(1.0)
}

/// Rescales so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_gradient(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Anything that yields one batch per training step.
pub trait BatchSource {
    fn next_batch(&mut self, step: usize) -> Batch;
}

/// Fresh i.i.d. batches from the full mixture.
pub struct MixtureStream<'a> {
    model: &'a MixtureModel,
    batch_size: usize,
    rng: Xoshiro256PlusPlus,
}

impl<'a> MixtureStream<'a> {
    pub fn new(model: &'a MixtureModel, batch_size: usize, seed: u64) -> Self {
        MixtureStream { model, batch_size, rng: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }
}

impl BatchSource for MixtureStream<'_> {
    fn next_batch(&mut self, _step: usize) -> Batch {
        sample_batch(self.model, self.batch_size, &mut self.rng).expect("batch size validated")
    }
}

/// Everything measured at one evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub lr: f64,
    /// Global gradient norm of the last update, before clipping.
    pub grad_norm: f64,
    /// Encoder block of the same gradient.
    pub encoder_grad_norm: f64,
    /// `ℓ_k(U)`: population loss of the encoder subspace under the optimal decoder.
    pub task_loss: Vec<f64>,
    pub loss_norm: Vec<f64>,
    /// Normalized population loss of the trained decoders.
    pub decoder_loss_norm: Vec<f64>,
    pub signal: Vec<f64>,
    pub signal_norm: Vec<f64>,
    pub residual_f: f64,
    /// `‖G_F(U)‖_F` on the orthonormal frame.
    pub frequent_grad_norm: f64,
    /// `2 √(λ_1(M_F) δ_F(U))`.
    pub frequent_grad_bound: f64,
    pub grad_cos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub width: usize,
    pub frequent_set: Vec<usize>,
    pub records: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn last(&self) -> &EvalRecord {
        self.records.last().expect("at least the final evaluation")
    }

    pub fn bound_tally(&self, tol: f64) -> BoundTally {
        let mut t = BoundTally::default();
        for r in &self.records {
            t.record(r, tol);
        }
        t
    }
}

/// Slack allowed on the frequent-gradient bound.
pub const BOUND_TOL: f64 = 1e-6;

/// How often `‖G_F‖_F ≤ 2√(λ_1(M_F) δ_F) + tol` held over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundTally {
    pub checks: usize,
    pub violations: usize,
    /// Largest `‖G_F‖_F − bound` seen; negative when the bound always held.
    pub worst_excess: Option<f64>,
}

impl BoundTally {
    pub fn record(&mut self, r: &EvalRecord, tol: f64) {
        let excess = r.frequent_grad_norm - r.frequent_grad_bound;
        self.checks += 1;
        if !(excess <= tol) {
            self.violations += 1;
        }
        self.worst_excess = Some(self.worst_excess.map_or(excess, |w: f64| w.max(excess)));
    }

    pub fn merge(&mut self, other: &BoundTally) {
        self.checks += other.checks;
        self.violations += other.violations;
        if let Some(e) = other.worst_excess {
            self.worst_excess = Some(self.worst_excess.map_or(e, |w: f64| w.max(e)));
        }
    }
}

/// Called at every evaluation after the standard measurements are filled in.
pub trait EvalHook {
    fn on_eval(&mut self, student: &StudentModel, record: &mut EvalRecord);
}

impl<F: FnMut(&StudentModel, &mut EvalRecord)> EvalHook for F {
    fn on_eval(&mut self, student: &StudentModel, record: &mut EvalRecord) {
        self(student, record)
    }
}

/// Standard measurements for the current student.
pub fn evaluate(
    model: &MixtureModel,
    student: &StudentModel,
    frequent: &[usize],
    step: usize,
    lr: f64,
    grad_norm: f64,
    encoder_grad_norm: f64,
) -> Result<EvalRecord> {
    let frame = EncoderFrame::new(&student.encoder)?;
    let (n, d, dt) = (student.width(), model.ambient_dim(), model.block_dim());
    let k_all = 0..model.num_tasks();
    let sigma2 = model.spec.input_std * model.spec.input_std;
    let signal: Vec<f64> = k_all.clone().map(|k| signal_from_frame(&frame, model, k)).collect();
    let task_loss: Vec<f64> = k_all.clone().map(|k| sigma2 * model.task_trace(k) * (1.0 - signal[k])).collect();
    let norm = |k: usize, l: f64| normalized_loss(l, baseline_loss(model, k), dt);
    let loss_norm = k_all.clone().map(|k| norm(k, task_loss[k])).collect();
    let decoder_loss_norm = k_all.map(|k| norm(k, decoder_task_loss(student, model, k))).collect();
    let signal_norm = signal.iter().map(|&s| normalized_signal(s, n, d)).collect::<Result<Vec<_>>>()?;
    let residual_f = residual_from_frame(&frame, model, frequent).trace_form;
    let (_, frequent_grad_norm) = riemannian_task_gradient(&frame, model, CovarianceSelector::Tasks(frequent));
    Ok(EvalRecord {
        step,
        lr,
        grad_norm,
        encoder_grad_norm,
        task_loss,
        loss_norm,
        decoder_loss_norm,
        signal,
        signal_norm,
        residual_f,
        frequent_grad_norm,
        frequent_grad_bound: frequent_gradient_bound(model, frequent, residual_f),
        grad_cos: None,
    })
}

/// Runs `sample → gradients → clip → AdamW` for `config.steps` steps,
/// evaluating at step 0, every `eval_every` steps, at every step in
/// `eval_at`, and at the final step.
pub fn train(
    model: &MixtureModel,
    student: &mut StudentModel,
    config: &TrainConfig,
    frequent: &[usize],
    source: &mut dyn BatchSource,
    hooks: &mut [&mut dyn EvalHook],
) -> Result<TrainLog> {
    config.validate()?;
    if student.width() == 0 {
        return Err(LabError::InvalidArgument("width must be >= 1".into()));
    }
    let mut extra = config.eval_at.clone();
    extra.sort_unstable();
    extra.dedup();
    let mut state = AdamState::new(student);
    let mut records = Vec::new();
    let mut push = |student: &StudentModel, rec: Result<EvalRecord>, hooks: &mut [&mut dyn EvalHook]| -> Result<()> {
        let mut rec = rec?;
        for h in hooks.iter_mut() {
            h.on_eval(student, &mut rec);
        }
        records.push(rec);
        Ok(())
    };
    push(student, evaluate(model, student, frequent, 0, lr_at(0, config.base_lr, config.warmup), 0.0, 0.0), hooks)?;
    let mut next_extra = 0;
    for step in 1..=config.steps {
        let lr = lr_at(step, config.base_lr, config.warmup);
        let batch = source.next_batch(step);
        let LossGrad { loss, mut grads } = loss_gradients(student, &batch)?;
        let encoder_grad_norm = grads.encoder.norm();
        let grad_norm = clip_gradient(&mut grads, config.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(LabError::NonFiniteLoss { step, lr, grad_norm });
        }
        adam_step(student, &grads, &mut state, lr, &config.adam);
        while next_extra < extra.len() && extra[next_extra] < step {
            next_extra += 1;
        }
        let scheduled = step % config.eval_every == 0 || step == config.steps;
        let requested = next_extra < extra.len() && extra[next_extra] == step;
        if scheduled || requested {
            let rec = evaluate(model, student, frequent, step, lr, grad_norm, encoder_grad_norm);
            push(student, rec, hooks)?;
        }
    }
    Ok(TrainLog { width: student.width(), frequent_set: frequent.to_vec(), records })
}

/// Riemannian gradient flow on an orthonormal frame: `U ← qf(U + dt·2(I−P_U)MU)`.
#[derive(Debug, Clone)]
pub struct GradientFlow {
    pub basis: DMatrix<f64>,
}

impl GradientFlow {
    pub fn new(basis: DMatrix<f64>) -> Self {
        GradientFlow { basis: orthonormal_columns(basis) }
    }

    pub fn step(&mut self, model: &MixtureModel, dt: f64) {
        let diag = model.mixture_diagonal();
        let (g, _) = riemannian_gradient_diag(&self.basis, &diag);
        self.basis = orthonormal_columns(&self.basis + g * dt);
    }

    /// `Tr(Uᵀ M U)`.
    pub fn objective(&self, model: &MixtureModel) -> f64 {
        let diag = model.mixture_diagonal();
        self.basis.row_iter().enumerate().map(|(i, r)| diag[i] * r.norm_squared()).sum()
    }
}
