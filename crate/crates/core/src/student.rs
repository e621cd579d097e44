//! Linear-bottleneck student `ŷ_k = D_k W x`.
//!
//! The encoder is stored as an `N×D` matrix `W`. Every measurement goes
//! through the orthogonal projector onto the row space of `W`, which is
//! invariant under `W → G W` for invertible `G`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_task, LabError, Result};
use crate::mixture::MixtureModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub weights: DMatrix<f64>,
}

impl Encoder {
    pub fn new(weights: DMatrix<f64>) -> Self {
        Encoder { weights }
    }

    pub fn width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSet {
    pub mats: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub encoder: Encoder,
    pub decoders: DecoderSet,
}

impl StudentModel {
    pub fn width(&self) -> usize {
        self.encoder.width()
    }

    pub fn num_tasks(&self) -> usize {
        self.decoders.mats.len()
    }

    pub fn decoder(&self, k: usize) -> &DMatrix<f64> {
        &self.decoders.mats[k]
    }
}

/// Orthonormal row-space frame of an encoder, from a Householder QR of `Wᵀ`.
///
/// `Wᵀ = U R` with `U` (`D×N`) an orthonormal basis of the row space and `R`
/// upper triangular.
#[derive(Debug, Clone)]
pub struct EncoderFrame {
    pub basis: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl EncoderFrame {
    pub fn new(encoder: &Encoder) -> Result<Self> {
        let (d, n) = (encoder.ambient_dim(), encoder.width());
        if n == 0 {
            return Err(LabError::DegenerateEncoder { rank: 0, width: 0 });
        }
        let qr = encoder.weights.transpose().qr();
        let r = qr.r();
        let diag: Vec<f64> = r.diagonal().iter().map(|x| x.abs()).collect();
        let rmax = diag.iter().cloned().fold(0.0, f64::max);
        let tol = rmax * (d.max(n) as f64) * f64::EPSILON;
        let rank = diag.iter().filter(|&&x| x > tol).count();
        if rank < n || !rmax.is_finite() {
            return Err(LabError::DegenerateEncoder { rank, width: n });
        }
        let q = qr.q();
        Ok(EncoderFrame { basis: q.columns(0, n).into_owned(), r })
    }

    /// Frame whose basis is already orthonormal (`Wᵀ = U`).
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Self {
        let n = basis.ncols();
        EncoderFrame { basis, r: DMatrix::identity(n, n) }
    }

    pub fn width(&self) -> usize {
        self.basis.ncols()
    }

    /// `‖P_U e_i‖²` for the ambient coordinate `i`.
    pub fn coord_capture(&self, i: usize) -> f64 {
        self.basis.row(i).norm_squared()
    }

    /// Diagonal of `P_U`, i.e. `‖P_U e_i‖²` for every coordinate.
    pub fn projector_diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.basis.nrows(), self.basis.row_iter().map(|r| r.norm_squared()))
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// `Tr(P_U C_k) = Σ_j λ_{k,j} ‖P_U b_{k,j}‖²`.
    pub fn task_capture(&self, model: &MixtureModel, k: usize) -> f64 {
        model
            .spectrum(k)
            .iter()
            .enumerate()
            .map(|(j, lam)| lam * self.coord_capture(model.feature_coord(k, j)))
            .sum()
    }
}

/// Orthonormalizes the columns of `a` with a Householder QR.
pub fn orthonormal_columns(a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let q = a.qr().q();
    q.columns(0, n).into_owned()
}

/// Orthonormal encoder rows (a Haar-like frame from a Gaussian draw) and
/// Kaiming-uniform decoders with linear gain.
pub fn init_student<R: Rng + ?Sized>(
    ambient_dim: usize,
    num_tasks: usize,
    block_dim: usize,
    width: usize,
    rng: &mut R,
) -> Result<StudentModel> {
    if width == 0 {
        return Err(LabError::InvalidArgument("width must be >= 1".into()));
    }
    if width > ambient_dim {
        return Err(LabError::InvalidArgument(format!("width {width} exceeds ambient dimension {ambient_dim}")));
    }
    let gauss = DMatrix::from_fn(ambient_dim, width, |_, _| rng.sample::<f64, _>(StandardNormal));
    let weights = orthonormal_columns(gauss).transpose();
    let bound = (3.0 / width as f64).sqrt();
    let unif = Uniform::new_inclusive(-bound, bound);
    let mats = (0..num_tasks).map(|_| DMatrix::from_fn(block_dim, width, |_, _| rng.sample(unif))).collect();
    Ok(StudentModel { encoder: Encoder::new(weights), decoders: DecoderSet { mats } })
}

/// Builds a student for a mixture.
pub fn init_student_for<R: Rng + ?Sized>(model: &MixtureModel, width: usize, rng: &mut R) -> Result<StudentModel> {
    init_student(model.ambient_dim(), model.num_tasks(), model.block_dim(), width, rng)
}

pub fn forward(student: &StudentModel, x: &[f64], k: usize) -> Result<Vec<f64>> {
    check_task(k, student.num_tasks())?;
    let x = DVector::from_column_slice(x);
    let h = &student.encoder.weights * x;
    Ok((student.decoder(k) * h).iter().copied().collect())
}

/// `P = Wᵀ(WWᵀ)⁻¹W`, computed from the QR frame.
pub fn projector(encoder: &Encoder) -> Result<DMatrix<f64>> {
    Ok(EncoderFrame::new(encoder)?.projector())
}

/// The decoder minimizing task `k`'s population loss for this encoder:
/// `D_k = Λ_k^{1/2} B_kᵀ W⁺`, so that `D_k W = Λ_k^{1/2} B_kᵀ P_U`.
pub fn optimal_decoder(encoder: &Encoder, model: &MixtureModel, k: usize) -> Result<DMatrix<f64>> {
    check_task(k, model.num_tasks())?;
    let frame = EncoderFrame::new(encoder)?;
    Ok(optimal_decoder_from_frame(&frame, model, k))
}

pub(crate) fn optimal_decoder_from_frame(frame: &EncoderFrame, model: &MixtureModel, k: usize) -> DMatrix<f64> {
    let (n, dt) = (frame.width(), model.block_dim());
    // Λ^{1/2} B_kᵀ U, then W⁺ = U R⁻ᵀ
    let mut au = DMatrix::zeros(dt, n);
    for (j, lam) in model.spectrum(k).iter().enumerate() {
        let row = frame.basis.row(model.feature_coord(k, j));
        au.row_mut(j).copy_from(&(row * lam.sqrt()));
    }
    frame.r.solve_upper_triangular(&au.transpose()).expect("full-rank frame").transpose()
}

/// Closed-form `ℓ_k(U) = Tr((I − P_U) C_k)`.
pub fn population_task_loss(encoder: &Encoder, model: &MixtureModel, k: usize) -> Result<f64> {
    check_task(k, model.num_tasks())?;
    let frame = EncoderFrame::new(encoder)?;
    Ok(model.task_trace(k) - frame.task_capture(model, k))
}

/// Exact population loss of the student's own decoder:
/// `E‖A_k x − D_k W x‖² = ‖A_k − D_k W‖_F²` for `x ~ N(0, σ²I)`, scaled by `σ²`.
pub fn decoder_task_loss(student: &StudentModel, model: &MixtureModel, k: usize) -> f64 {
    let w = &student.encoder.weights;
    let dk = student.decoder(k);
    let dw = dk * w;
    let mut total = dw.norm_squared();
    for (j, lam) in model.spectrum(k).iter().enumerate() {
        let c = model.feature_coord(k, j);
        total += lam - 2.0 * lam.sqrt() * dw[(j, c)];
    }
    total.max(0.0) * model.spec.input_std * model.spec.input_std
}
