//! Matched-frequency injection: withhold a rare task for `G` steps, then
//! put `m = round(G·B·ρ_r)` rare rows into one batch so the long-run rare
//! frequency is unchanged. Also drives retention sweeps over width × gap.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_task, LabError, Result};
use crate::metrics::{gain_decay_series, gradient_cosine, GainDecay};
use crate::mixture::{sample_task_ids, Batch, MixtureModel};
use crate::oracle::frequent_set;
use crate::runner::cell_seed;
use crate::student::{init_student_for, StudentModel};
use crate::trainer::{loss_gradients, train, BatchSource, BoundTally, EvalRecord, TrainConfig, BOUND_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pub gap: usize,
    pub batch_size: usize,
    /// Nominal long-run rare frequency `ρ_r`.
    pub rare_frequency: f64,
    /// Rare rows per injection batch.
    pub injected: usize,
    pub rare_task: usize,
    pub total_steps: usize,
}

impl InjectionSchedule {
    pub fn is_injection(&self, step: usize) -> bool {
        step >= self.gap && step % self.gap == 0 && step <= self.total_steps
    }

    pub fn injection_steps(&self) -> Vec<usize> {
        (1..=self.total_steps / self.gap).map(|i| i * self.gap).collect()
    }

    /// `m / (G·B)`, the frequency actually delivered.
    pub fn realized_frequency(&self) -> f64 {
        self.injected as f64 / (self.gap * self.batch_size) as f64
    }
}

pub fn build_schedule(
    gap: usize,
    batch_size: usize,
    rare_frequency: f64,
    rare_task: usize,
    total_steps: usize,
) -> Result<InjectionSchedule> {
    if gap == 0 || batch_size == 0 {
        return Err(LabError::InvalidArgument("gap and batch size must be >= 1".into()));
    }
    if !(rare_frequency > 0.0 && rare_frequency < 1.0) {
        return Err(LabError::InvalidArgument(format!("rare frequency must lie in (0, 1), got {rare_frequency}")));
    }
    let expected = (gap * batch_size) as f64 * rare_frequency;
    if expected < 1.0 {
        return Err(LabError::InfeasibleInjection {
            expected,
            min_batch: (1.0 / (gap as f64 * rare_frequency)).ceil() as usize,
            min_gap: (1.0 / (batch_size as f64 * rare_frequency)).ceil() as usize,
        });
    }
    let injected = expected.round() as usize;
    if injected > batch_size {
        return Err(LabError::InvalidArgument(format!(
            "injection needs {injected} rare rows but the batch holds {batch_size}; use a gap <= {}",
            (1.0 / rare_frequency).floor()
        )));
    }
    Ok(InjectionSchedule { gap, batch_size, rare_frequency, injected, rare_task, total_steps })
}

/// Batches following a schedule. Non-injection rows come from the mixture
/// without the rare task, priors renormalized proportionally.
pub struct InjectedSource<'a> {
    model: &'a MixtureModel,
    schedule: InjectionSchedule,
    others: Vec<usize>,
    weights: Vec<f64>,
    rng: Xoshiro256PlusPlus,
}

impl<'a> InjectedSource<'a> {
    pub fn new(model: &'a MixtureModel, schedule: InjectionSchedule, seed: u64) -> Result<Self> {
        check_task(schedule.rare_task, model.num_tasks())?;
        if model.num_tasks() < 2 {
            return Err(LabError::InvalidArgument("injection needs at least one non-rare task".into()));
        }
        let others: Vec<usize> = (0..model.num_tasks()).filter(|&k| k != schedule.rare_task).collect();
        let weights = others.iter().map(|&k| model.prior(k)).collect();
        Ok(InjectedSource { model, schedule, others, weights, rng: Xoshiro256PlusPlus::seed_from_u64(seed) })
    }

    pub fn schedule(&self) -> &InjectionSchedule {
        &self.schedule
    }

    pub fn task_ids(&mut self, step: usize) -> Vec<usize> {
        let b = self.schedule.batch_size;
        let m = if self.schedule.is_injection(step) { self.schedule.injected } else { 0 };
        let mut ids: Vec<usize> =
            sample_task_ids(&self.weights, b - m, &mut self.rng).into_iter().map(|i| self.others[i]).collect();
        ids.extend(std::iter::repeat(self.schedule.rare_task).take(m));
        if m > 0 {
            ids.shuffle(&mut self.rng);
        }
        ids
    }
}

impl BatchSource for InjectedSource<'_> {
    fn next_batch(&mut self, step: usize) -> Batch {
        let ids = self.task_ids(step);
        self.model.batch_for_tasks(ids, &mut self.rng)
    }
}

/// Encoder-block cosine between the gradient of a rare-task probe batch and
/// that of a frequent-task probe batch. Decoder blocks are private to each
/// task, so only the shared encoder can interfere.
pub fn probe_gradient_cosine(
    model: &MixtureModel,
    student: &StudentModel,
    rare: usize,
    frequent: &[usize],
    probe_size: usize,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<Option<f64>> {
    let rare_batch = model.batch_for_tasks(vec![rare; probe_size], rng);
    let weights: Vec<f64> = frequent.iter().map(|&k| model.prior(k)).collect();
    let ids = sample_task_ids(&weights, probe_size, rng).into_iter().map(|i| frequent[i]).collect();
    let freq_batch = model.batch_for_tasks(ids, rng);
    let gr = loss_gradients(student, &rare_batch)?.grads.encoder;
    let gf = loss_gradients(student, &freq_batch)?.grads.encoder;
    Ok(gradient_cosine(&[gr.as_slice()], &[gf.as_slice()]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetentionConfig {
    pub train: TrainConfig,
    /// Defaults to the last (rarest) task.
    pub rare_task: Option<usize>,
    pub frequent_mass: f64,
    /// Rows per probe batch for the gradient cosine; 0 disables it.
    pub probe_size: usize,
    pub seeds: usize,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        RetentionConfig {
            train: TrainConfig { batch_size: 512, ..TrainConfig::default() },
            rare_task: None,
            frequent_mass: 0.8,
            probe_size: 1024,
            seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub step: usize,
    pub signal_rare_norm: f64,
    /// Prior-weighted mean of `ŝ_k` over the frequent set.
    pub signal_freq_norm: f64,
    pub grad_cos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCell {
    pub width: usize,
    pub gap: usize,
    pub seed: usize,
    pub schedule: Option<InjectionSchedule>,
    pub points: Vec<RetentionPoint>,
    pub gain_decay: GainDecay,
    #[serde(default)]
    pub bound: BoundTally,
    pub error: Option<String>,
}

impl RetentionCell {
    pub fn final_point(&self) -> Option<&RetentionPoint> {
        self.points.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSurface {
    pub rare_task: usize,
    pub frequent_set: Vec<usize>,
    pub cells: Vec<RetentionCell>,
}

impl RetentionSurface {
    pub fn cell(&self, width: usize, gap: usize, seed: usize) -> Option<&RetentionCell> {
        self.cells.iter().find(|c| c.width == width && c.gap == gap && c.seed == seed)
    }

    /// Median over seeds of a per-cell statistic, skipping failed cells.
    pub fn median_over_seeds(&self, width: usize, gap: usize, stat: impl Fn(&RetentionCell) -> Option<f64>) -> Option<f64> {
        let mut v: Vec<f64> =
            self.cells.iter().filter(|c| c.width == width && c.gap == gap && c.error.is_none()).filter_map(stat).collect();
        median(&mut v)
    }
}

/// Median `|cos|` over the last `fraction` of a cell's evaluations.
pub fn late_abs_cosine(cell: &RetentionCell, fraction: f64) -> Option<f64> {
    let last = cell.points.last()?.step as f64;
    let from = last * (1.0 - fraction);
    let mut v: Vec<f64> = cell.points.iter().filter(|p| p.step as f64 >= from).filter_map(|p| p.grad_cos.map(f64::abs)).collect();
    median(&mut v)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// One `(N, G, seed)` cell of the retention surface.
pub fn run_retention_cell(
    model: &MixtureModel,
    width: usize,
    gap: usize,
    seed: usize,
    config: &RetentionConfig,
    master_seed: u64,
) -> RetentionCell {
    let mut cell = RetentionCell {
        width,
        gap,
        seed,
        schedule: None,
        points: Vec::new(),
        gain_decay: GainDecay::default(),
        bound: BoundTally::default(),
        error: None,
    };
    if let Err(e) = retention_cell_inner(model, config, master_seed, &mut cell) {
        cell.error = Some(e.to_string());
    }
    cell
}

fn retention_cell_inner(
    model: &MixtureModel,
    config: &RetentionConfig,
    master_seed: u64,
    cell: &mut RetentionCell,
) -> Result<()> {
    let rare = config.rare_task.unwrap_or(model.num_tasks() - 1);
    let frequent: Vec<usize> = frequent_set(model, config.frequent_mass)?.into_iter().filter(|&k| k != rare).collect();
    let tc = &config.train;
    let schedule = build_schedule(cell.gap, tc.batch_size, model.prior(rare), rare, tc.steps)?;
    cell.schedule = Some(schedule.clone());
    let injections = schedule.injection_steps();
    let base = cell_seed(master_seed, &[cell.width as u64, cell.gap as u64, cell.seed as u64]);
    let mut init_rng = Xoshiro256PlusPlus::seed_from_u64(base);
    let mut student = init_student_for(model, cell.width, &mut init_rng)?;
    let mut source = InjectedSource::new(model, schedule, base ^ 0x9e37_79b9_7f4a_7c15)?;
    // evaluate on both sides of every injection so gains are sharp
    let mut train_cfg = tc.clone();
    train_cfg.eval_at.extend(injections.iter().flat_map(|&t| [t - 1, t]));
    let mut probe_rng = Xoshiro256PlusPlus::seed_from_u64(base.rotate_left(17));
    let freq_mass: f64 = frequent.iter().map(|&k| model.prior(k)).sum();
    let mut points = Vec::new();
    let mut probe_err = None;
    let mut bound = BoundTally::default();
    let mut hook = |s: &StudentModel, rec: &mut EvalRecord| {
        bound.record(rec, BOUND_TOL);
        if config.probe_size > 0 {
            match probe_gradient_cosine(model, s, rare, &frequent, config.probe_size, &mut probe_rng) {
                Ok(c) => rec.grad_cos = c,
                Err(e) => probe_err = Some(e),
            }
        }
        let freq = frequent.iter().map(|&k| model.prior(k) * rec.signal_norm[k]).sum::<f64>() / freq_mass;
        points.push(RetentionPoint {
            step: rec.step,
            signal_rare_norm: rec.signal_norm[rare],
            signal_freq_norm: freq,
            grad_cos: rec.grad_cos,
        });
    };
    train(model, &mut student, &train_cfg, &frequent, &mut source, &mut [&mut hook])?;
    if let Some(e) = probe_err {
        return Err(e);
    }
    let series: Vec<(usize, f64)> = points.iter().map(|p| (p.step, p.signal_rare_norm)).collect();
    cell.gain_decay = gain_decay_series(&series, &injections)?;
    cell.bound = bound;
    cell.points = points;
    Ok(())
}

/// Every `(N, G, seed)` cell, in parallel on the current rayon pool. A failed
/// cell records its error and the rest continue.
pub fn run_retention_experiment(
    model: &MixtureModel,
    widths: &[usize],
    gaps: &[usize],
    config: &RetentionConfig,
    master_seed: u64,
) -> Result<RetentionSurface> {
    if widths.is_empty() || gaps.is_empty() || config.seeds == 0 {
        return Err(LabError::InvalidArgument("retention grids must be nonempty".into()));
    }
    let rare = config.rare_task.unwrap_or(model.num_tasks() - 1);
    check_task(rare, model.num_tasks())?;
    let frequent = frequent_set(model, config.frequent_mass)?.into_iter().filter(|&k| k != rare).collect();
    let coords: Vec<(usize, usize, usize)> = widths
        .iter()
        .flat_map(|&n| gaps.iter().flat_map(move |&g| (0..config.seeds).map(move |s| (n, g, s))))
        .collect();
    let cells = coords
        .par_iter()
        .map(|&(n, g, s)| run_retention_cell(model, n, g, s, config, master_seed))
        .collect();
    Ok(RetentionSurface { rare_task: rare, frequent_set: frequent, cells })
}
