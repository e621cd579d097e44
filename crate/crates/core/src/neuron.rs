//! Two orthogonal rank-one tasks `a`, `b` competing for neurons in their
//! span. One neuron is tracked by its angle `θ` (`u = cosθ a + sinθ b`);
//! the gated model keeps several unit neurons and routes each sample by a
//! softmax over squared alignments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    A,
    B,
}

/// Arrival probabilities and step size of the two-task toy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoTaskConfig {
    /// Probability of the frequent task `a`; `b` arrives with `q = 1 − p`.
    pub p: f64,
    pub eta: f64,
}

impl TwoTaskConfig {
    pub fn new(p: f64, eta: f64) -> Result<Self> {
        let c = TwoTaskConfig { p, eta };
        c.validate()?;
        Ok(c)
    }

    pub fn q(&self) -> f64 {
        1.0 - self.p
    }

    /// `0 < q ≤ p < 1` and `0 < η < 1/2`. `p = q` is allowed as the
    /// symmetric limit.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.p >= 0.5 && self.p < 1.0) {
            problems.push(format!("p must lie in [0.5, 1), got {}", self.p));
        }
        if !(self.eta > 0.0 && self.eta < 0.5) {
            problems.push(format!("eta must lie in (0, 0.5), got {}", self.eta));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Validation(problems))
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Task {
        if rng.gen::<f64>() < self.p {
            Task::A
        } else {
            Task::B
        }
    }
}

/// Gradient step on `ℓ_a = sin²θ` or `ℓ_b = cos²θ`: `θ ∓ η sin 2θ`.
pub fn step(theta: f64, task: Task, eta: f64) -> f64 {
    match task {
        Task::A => theta - eta * (2.0 * theta).sin(),
        Task::B => theta + eta * (2.0 * theta).sin(),
    }
}

/// `E[Δθ | θ] = η (q − p) sin 2θ`.
pub fn expected_drift(theta: f64, p: f64, q: f64, eta: f64) -> f64 {
    eta * (q - p) * (2.0 * theta).sin()
}

/// Sample mean and standard error of one-step `Δθ` over `draws` arrivals.
pub fn monte_carlo_drift<R: Rng + ?Sized>(theta: f64, config: &TwoTaskConfig, draws: usize, rng: &mut R) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..draws {
        let d = step(theta, config.draw(rng), config.eta) - theta;
        sum += d;
        sq += d * d;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `G` consecutive frequent-task steps from `θ0`.
pub fn decay_after_gap(theta0: f64, eta: f64, gap: usize) -> f64 {
    (0..gap).fold(theta0, |t, _| step(t, Task::A, eta))
}

/// The linearized prediction `e^{−2ηG} θ0`.
pub fn decay_closed_form(theta0: f64, eta: f64, gap: usize) -> f64 {
    (-2.0 * eta * gap as f64).exp() * theta0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatedConfig {
    pub p: f64,
    pub eta: f64,
    /// Softmax temperature of the gate.
    pub temperature: f64,
    pub steps: usize,
    /// Steps excluded from the sustained-alignment summary.
    pub burn_in: usize,
    /// Record every `log_every` steps.
    pub log_every: usize,
}

impl Default for GatedConfig {
    fn default() -> Self {
        GatedConfig { p: 0.9, eta: 0.05, temperature: 0.05, steps: 5000, burn_in: 2000, log_every: 10 }
    }
}

impl GatedConfig {
    pub fn validate(&self) -> Result<()> {
        TwoTaskConfig { p: self.p, eta: self.eta }.validate()?;
        let mut problems = Vec::new();
        if !(self.temperature > 0.0) {
            problems.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.burn_in >= self.steps {
            problems.push(format!("burn_in {} must be below steps {}", self.burn_in, self.steps));
        }
        if self.log_every == 0 {
            problems.push("log_every must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Validation(problems))
        }
    }
}

/// `max_n ⟨u_n, a⟩²` and `max_n ⟨u_n, b⟩²` at one logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub step: usize,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedTrace {
    pub num_neurons: usize,
    pub burn_in: usize,
    pub series: Vec<Alignment>,
}

impl GatedTrace {
    fn after_burn_in(&self) -> impl Iterator<Item = &Alignment> {
        let b = self.burn_in;
        self.series.iter().filter(move |s| s.step >= b)
    }

    pub fn mean_rare_after_burn_in(&self) -> f64 {
        let v: Vec<f64> = self.after_burn_in().map(|s| s.b).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn min_rare_after_burn_in(&self) -> f64 {
        self.after_burn_in().map(|s| s.b).fold(f64::INFINITY, f64::min)
    }

    pub fn max_rare_after_burn_in(&self) -> f64 {
        self.after_burn_in().map(|s| s.b).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_frequent_after_burn_in(&self) -> f64 {
        let v: Vec<f64> = self.after_burn_in().map(|s| s.a).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

fn gate(align: &[f64], temperature: f64) -> Vec<f64> {
    let top = align.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = align.iter().map(|x| ((x - top) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Neurons start at uniform random angles. For a sample of task `t` the gate
/// `g = softmax(⟨u_n,t⟩² / τ)` is held fixed and each neuron descends the
/// gated loss `g_n (1 − ⟨u_n,t⟩²)`, i.e. `u_n += 2η g_n ⟨u_n,t⟩ t`, then is
/// renormalized.
pub fn simulate_gated<R: Rng + ?Sized>(num_neurons: usize, config: &GatedConfig, rng: &mut R) -> Result<GatedTrace> {
    config.validate()?;
    if !(1..=2).contains(&num_neurons) {
        return Err(LabError::InvalidArgument(format!("gated toy supports 1 or 2 neurons, got {num_neurons}")));
    }
    let two = TwoTaskConfig { p: config.p, eta: config.eta };
    let mut neurons: Vec<[f64; 2]> = (0..num_neurons)
        .map(|_| {
            let th = rng.gen_range(0.0..std::f64::consts::PI);
            [th.cos(), th.sin()]
        })
        .collect();
    let record = |step: usize, ns: &[[f64; 2]]| Alignment {
        step,
        a: ns.iter().map(|u| u[0] * u[0]).fold(0.0, f64::max),
        b: ns.iter().map(|u| u[1] * u[1]).fold(0.0, f64::max),
    };
    let mut series = vec![record(0, &neurons)];
    for s in 1..=config.steps {
        let axis = match two.draw(rng) {
            Task::A => 0,
            Task::B => 1,
        };
        let align: Vec<f64> = neurons.iter().map(|u| u[axis] * u[axis]).collect();
        let g = gate(&align, config.temperature);
        for (u, gn) in neurons.iter_mut().zip(g) {
            u[axis] += 2.0 * config.eta * gn * u[axis];
            let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
            u[0] /= norm;
            u[1] /= norm;
        }
        if s % config.log_every == 0 || s == config.steps {
            series.push(record(s, &neurons));
        }
    }
    Ok(GatedTrace { num_neurons, burn_in: config.burn_in, series })
}
