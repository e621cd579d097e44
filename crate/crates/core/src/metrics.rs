//! Subspace measurements: per-task signal, its random-baseline
//! normalization, the frequent-task residual, baseline-normalized losses,
//! gradient cosines and the gain/decay split of injection runs.

use serde::{Deserialize, Serialize};

use crate::error::{check_task, LabError, Result};
use crate::mixture::MixtureModel;
use crate::student::{Encoder, EncoderFrame};

/// `s_k(U) = Tr(P_U C_k) / Tr(C_k)`.
pub fn task_signal(encoder: &Encoder, model: &MixtureModel, k: usize) -> Result<f64> {
    check_task(k, model.num_tasks())?;
    let frame = EncoderFrame::new(encoder)?;
    Ok(signal_from_frame(&frame, model, k))
}

pub fn signal_from_frame(frame: &EncoderFrame, model: &MixtureModel, k: usize) -> f64 {
    frame.task_capture(model, k) / model.task_trace(k)
}

/// `ŝ = (s − N/D) / (1 − N/D)`: 0 for a random frame, 1 for full capture.
/// At `N = D` every task is captured, so only `s = 1` is admissible.
pub fn normalized_signal(signal: f64, width: usize, ambient_dim: usize) -> Result<f64> {
    if width > ambient_dim {
        return Err(LabError::InvalidArgument(format!("width {width} exceeds D = {ambient_dim}")));
    }
    if width == ambient_dim {
        return if (signal - 1.0).abs() < 1e-8 {
            Ok(1.0)
        } else {
            Err(LabError::InvalidArgument(format!("full-width encoder with signal {signal} != 1")))
        };
    }
    let base = width as f64 / ambient_dim as f64;
    Ok((signal - base) / (1.0 - base))
}

/// Both forms of `δ_F(U)`: `Tr((I − P_U) M_F)` and
/// `Σ_{k∈F} π_k (1 − s_k) Tr(C_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub trace_form: f64,
    pub signal_form: f64,
}

pub fn residual(encoder: &Encoder, model: &MixtureModel, tasks: &[usize]) -> Result<Residual> {
    if tasks.is_empty() {
        return Err(LabError::InvalidArgument("frequent set must be nonempty".into()));
    }
    for &k in tasks {
        check_task(k, model.num_tasks())?;
    }
    let frame = EncoderFrame::new(encoder)?;
    Ok(residual_from_frame(&frame, model, tasks))
}

pub fn residual_from_frame(frame: &EncoderFrame, model: &MixtureModel, tasks: &[usize]) -> Residual {
    // Tr((I − P) M_F) = Σ_i m_i (1 − P_ii) over the diagonal of M_F.
    let diag = model.weighted_diagonal(tasks);
    let pdiag = frame.projector_diagonal();
    let trace_form = diag.iter().zip(pdiag.iter()).map(|(m, p)| m * (1.0 - p)).sum();
    let signal_form = tasks
        .iter()
        .map(|&k| model.prior(k) * (1.0 - signal_from_frame(frame, model, k)) * model.task_trace(k))
        .sum();
    Residual { trace_form, signal_form }
}

/// Mean-predictor loss per output dimension, `Tr(C_k) / d_T`.
pub fn baseline_loss(model: &MixtureModel, k: usize) -> f64 {
    model.task_trace(k) * model.spec.input_std.powi(2) / model.block_dim() as f64
}

/// Per-dimension task loss over the per-dimension baseline. `task_loss` is
/// summed over the `d_T` outputs, so the zero predictor scores exactly 1.
pub fn normalized_loss(task_loss: f64, baseline: f64, block_dim: usize) -> f64 {
    (task_loss / block_dim as f64) / baseline
}

/// Cosine between two gradients over matched parameter blocks. Returns
/// `None` when either side is zero.
pub fn gradient_cosine(g1: &[&[f64]], g2: &[&[f64]]) -> Option<f64> {
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for (a, b) in g1.iter().zip(g2) {
        debug_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            dot += x * y;
            n1 += x * x;
            n2 += y * y;
        }
    }
    if n1 == 0.0 || n2 == 0.0 {
        return None;
    }
    Some((dot / (n1.sqrt() * n2.sqrt())).clamp(-1.0, 1.0))
}

/// Jumps at injections and losses between them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GainDecay {
    /// `(injection step, ŝ after − ŝ before)`.
    pub gains: Vec<(usize, f64)>,
    /// `(next injection step, ŝ before next − ŝ after previous)`.
    pub decays: Vec<(usize, f64)>,
    /// Injection steps whose following window had fewer than two evaluations.
    pub skipped: Vec<usize>,
}

impl GainDecay {
    pub fn total_gain(&self) -> f64 {
        self.gains.iter().map(|g| g.1).sum()
    }

    pub fn total_decay(&self) -> f64 {
        self.decays.iter().map(|d| d.1).sum()
    }
}

/// Splits a signal series `(step, ŝ)` around sorted injection steps. An
/// evaluation logged at step `s` reflects the parameters after update `s`, so
/// "before" an injection at `t` is the last evaluation with step `< t` and
/// "after" is the first with step `≥ t`.
pub fn gain_decay_series(series: &[(usize, f64)], injections: &[usize]) -> Result<GainDecay> {
    if injections.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabError::InvalidArgument("injection steps must be strictly increasing".into()));
    }
    let before = |t: usize| series.iter().rev().find(|(s, _)| *s < t).copied();
    let after = |t: usize| series.iter().find(|(s, _)| *s >= t).copied();
    let mut out = GainDecay::default();
    for &t in injections {
        if let (Some(b), Some(a)) = (before(t), after(t)) {
            out.gains.push((t, a.1 - b.1));
        }
    }
    for w in injections.windows(2) {
        let (prev, next) = (w[0], w[1]);
        let inside = series.iter().filter(|(s, _)| *s >= prev && *s < next).count();
        match (after(prev), before(next)) {
            (Some(a), Some(b)) if inside >= 2 && a.0 < next => out.decays.push((next, b.1 - a.1)),
            _ => out.skipped.push(prev),
        }
    }
    Ok(out)
}

/// Per-task measurements at one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub step: usize,
    pub signal: Vec<f64>,
    pub signal_norm: Vec<f64>,
    pub residual: f64,
    pub loss_norm: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{build_mixture, MixtureSpec};
    use nalgebra::DMatrix;

    #[test]
    fn signal_extremes() {
        let m = build_mixture(MixtureSpec::uniform(8, 2, 2, 1.0, 1.0), 0).unwrap();
        let mut w = DMatrix::zeros(3, 8);
        w[(0, 0)] = 1.0;
        w[(1, 1)] = 1.0;
        w[(2, 5)] = 1.0;
        let enc = Encoder::new(w);
        assert!((task_signal(&enc, &m, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(task_signal(&enc, &m, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn normalization() {
        assert!(normalized_signal(0.25, 1, 4).unwrap().abs() < 1e-15);
        assert!((normalized_signal(1.0, 1, 4).unwrap() - 1.0).abs() < 1e-15);
        assert!((normalized_signal(0.5, 1, 4).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(normalized_signal(1.0, 4, 4).unwrap(), 1.0);
        assert!(normalized_signal(0.5, 4, 4).is_err());
    }

    #[test]
    fn residual_edges() {
        let m = build_mixture(MixtureSpec::uniform(6, 3, 2, 1.0, 1.0), 0).unwrap();
        let full = Encoder::new(DMatrix::identity(6, 6));
        let r = residual(&full, &m, &[0, 1]).unwrap();
        assert!(r.trace_form.abs() < 1e-12 && r.signal_form.abs() < 1e-12);
        let mut w = DMatrix::zeros(2, 6);
        w[(0, 4)] = 1.0;
        w[(1, 5)] = 1.0;
        let r = residual(&Encoder::new(w), &m, &[0, 1]).unwrap();
        let want = m.frequent_covariance(&[0, 1]).trace();
        assert!((r.trace_form - want).abs() < 1e-12);
        assert!((r.signal_form - want).abs() < 1e-12);
        assert!(residual(&full, &m, &[]).is_err());
    }

    #[test]
    fn baseline_normalization() {
        let m = build_mixture(MixtureSpec::uniform(4, 1, 1, 1.0, 1.0), 0).unwrap();
        assert_eq!(baseline_loss(&m, 0), 1.0);
        let m = build_mixture(MixtureSpec::uniform(12, 2, 3, 1.0, 2.0), 0).unwrap();
        let b = baseline_loss(&m, 1);
        assert!((normalized_loss(m.task_trace(1), b, 3) - 1.0).abs() < 1e-15);
        assert_eq!(normalized_loss(0.0, b, 3), 0.0);
    }

    #[test]
    fn cosines() {
        let a = [1.0, 2.0, -1.0];
        let neg = [-1.0, -2.0, 1.0];
        assert!((gradient_cosine(&[&a], &[&a]).unwrap() - 1.0).abs() < 1e-15);
        assert!((gradient_cosine(&[&a], &[&neg]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(gradient_cosine(&[&[1.0, 0.0]], &[&[0.0, 3.0]]).unwrap(), 0.0);
        assert!(gradient_cosine(&[&[0.0, 0.0]], &[&[1.0, 3.0]]).is_none());
    }

    #[test]
    fn gain_decay_constant_and_sawtooth() {
        let flat: Vec<(usize, f64)> = (0..40).map(|s| (s, 0.3)).collect();
        let gd = gain_decay_series(&flat, &[10, 20, 30]).unwrap();
        assert!(gd.gains.iter().all(|g| g.1 == 0.0));
        assert!(gd.decays.iter().all(|d| d.1 == 0.0));
        assert_eq!(gd.gains.len(), 3);
        assert_eq!(gd.decays.len(), 2);

        // +0.1 at each injection, linear −0.1 across each window
        let inj = [10usize, 20, 30];
        let saw: Vec<(usize, f64)> = (0..40)
            .map(|s| {
                let v = if s < 10 {
                    0.0
                } else {
                    let phase = (s - 10) % 10;
                    0.1 - 0.1 * phase as f64 / 9.0
                };
                (s, v)
            })
            .collect();
        let gd = gain_decay_series(&saw, &inj).unwrap();
        for g in &gd.gains {
            assert!((g.1 - 0.1).abs() < 1e-12, "{g:?}");
        }
        for d in &gd.decays {
            assert!((d.1 + 0.1).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn sparse_windows_are_skipped() {
        let series = [(0usize, 0.0), (10, 0.5), (25, 0.4)];
        let gd = gain_decay_series(&series, &[10, 20]).unwrap();
        assert_eq!(gd.skipped, vec![10]);
        assert!(gain_decay_series(&series, &[20, 10]).is_err());
    }
}
