//! Declarative experiment description, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mixture::MixtureSpec;
use crate::neuron::GatedConfig;
use crate::scaling_law::ScalingLawParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Phase,
    Rank1Staircase,
    ResidualScatter,
    Retention,
    Neuron,
    Classify,
    LongHorizon,
    ComplexitySweep,
}

impl ExperimentKind {
    /// Kinds that train one student per `(β, N, seed)` on the plain mixture.
    pub fn is_sweep(self) -> bool {
        matches!(
            self,
            ExperimentKind::Phase
                | ExperimentKind::Rank1Staircase
                | ExperimentKind::ResidualScatter
                | ExperimentKind::LongHorizon
                | ExperimentKind::ComplexitySweep
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Phase => "phase",
            ExperimentKind::Rank1Staircase => "rank1_staircase",
            ExperimentKind::ResidualScatter => "residual_scatter",
            ExperimentKind::Retention => "retention",
            ExperimentKind::Neuron => "neuron",
            ExperimentKind::Classify => "classify",
            ExperimentKind::LongHorizon => "long_horizon",
            ExperimentKind::ComplexitySweep => "complexity_sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub ambient_dim: usize,
    pub num_tasks: usize,
    pub block_dim: usize,
    #[serde(default = "one_f64")]
    pub input_std: f64,
    /// Shared spectrum exponent; exclusive with `alpha_range`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// `[α_min, α_max]`, split uniformly with the most frequent task at `α_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_range: Option<[f64; 2]>,
    pub betas: Vec<f64>,
}

impl MixtureSection {
    pub fn spec_for(&self, beta: f64) -> MixtureSpec {
        let mut spec = match (self.alpha, self.alpha_range) {
            (_, Some([lo, hi])) => {
                MixtureSpec::with_alpha_range(self.ambient_dim, self.num_tasks, self.block_dim, beta, lo, hi)
            }
            (a, None) => {
                MixtureSpec::uniform(self.ambient_dim, self.num_tasks, self.block_dim, beta, a.unwrap_or(f64::NAN))
            }
        };
        spec.input_std = self.input_std;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionSection {
    pub gaps: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rare_task: Option<usize>,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronSection {
    #[serde(default)]
    pub gated: GatedConfig,
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    #[serde(default = "default_neuron_gaps")]
    pub gaps: Vec<usize>,
    #[serde(default = "default_theta0")]
    pub theta0: f64,
    #[serde(default = "default_drift_draws")]
    pub drift_draws: usize,
    #[serde(default = "default_drift_thetas")]
    pub drift_thetas: Vec<f64>,
}

impl Default for NeuronSection {
    fn default() -> Self {
        NeuronSection {
            gated: GatedConfig::default(),
            etas: default_etas(),
            gaps: default_neuron_gaps(),
            theta0: default_theta0(),
            drift_draws: default_drift_draws(),
            drift_thetas: default_drift_thetas(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    pub params: ScalingLawParams,
    pub n_small: f64,
    pub n_large: f64,
    pub compute: f64,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Master seed; every cell derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub plots: bool,
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default = "default_mass")]
    pub frequent_mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureSection>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<RetentionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neuron: Option<NeuronSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classify: Option<ClassifySection>,
}

fn one_f64() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_mass() -> f64 {
    0.8
}
fn default_probe() -> usize {
    1024
}
fn default_etas() -> Vec<f64> {
    vec![0.01, 0.003]
}
fn default_neuron_gaps() -> Vec<usize> {
    vec![50, 100, 200]
}
fn default_theta0() -> f64 {
    0.1
}
fn default_drift_draws() -> usize {
    100_000
}
fn default_drift_thetas() -> Vec<f64> {
    vec![0.3, std::f64::consts::FRAC_PI_4, 1.2]
}
fn default_points() -> usize {
    200
}

fn absorb(problems: &mut Vec<String>, prefix: &str, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(LabError::Validation(v)) => problems.extend(v.into_iter().map(|p| format!("{prefix}{p}"))),
        Err(e) => problems.push(format!("{prefix}{e}")),
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Every violation at once, before any cell runs.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.seeds == 0 {
            p.push("seeds must be >= 1".to_string());
        }
        if !(self.frequent_mass > 0.0 && self.frequent_mass <= 1.0) {
            p.push(format!("frequent_mass must lie in (0, 1], got {}", self.frequent_mass));
        }
        let kind = self.kind;
        let needs_mixture = kind.is_sweep() || kind == ExperimentKind::Retention;
        if needs_mixture {
            if self.widths.is_empty() {
                p.push("widths must be nonempty".into());
            }
            if self.widths.contains(&0) {
                p.push("widths must be >= 1".into());
            }
            absorb(&mut p, "train.", self.train.validate());
            match &self.mixture {
                None => p.push(format!("[mixture] is required for kind {}", kind.name())),
                Some(m) => {
                    if m.betas.is_empty() {
                        p.push("mixture.betas must be nonempty".into());
                    }
                    match (m.alpha, m.alpha_range) {
                        (Some(_), Some(_)) => p.push("mixture: give alpha or alpha_range, not both".into()),
                        (None, None) => p.push("mixture: one of alpha or alpha_range is required".into()),
                        _ => {}
                    }
                    if kind == ExperimentKind::ComplexitySweep && m.alpha_range.is_none() {
                        p.push("complexity_sweep needs mixture.alpha_range".into());
                    }
                    for &b in &m.betas {
                        absorb(&mut p, &format!("mixture (beta = {b}): "), m.spec_for(b).validate());
                    }
                    if let Some(&w) = self.widths.iter().find(|&&w| w > m.ambient_dim) {
                        p.push(format!("width {w} exceeds ambient_dim {}", m.ambient_dim));
                    }
                    if kind == ExperimentKind::Retention {
                        if m.betas.len() != 1 {
                            p.push("retention takes exactly one beta".into());
                        }
                        if m.num_tasks < 2 {
                            p.push("retention needs at least two tasks".into());
                        }
                    }
                }
            }
        } else if !self.widths.is_empty() {
            p.push(format!("widths are not used by kind {}", kind.name()));
        }
        match (kind, &self.retention) {
            (ExperimentKind::Retention, None) => p.push("[retention] is required for kind retention".into()),
            (ExperimentKind::Retention, Some(r)) => {
                if r.gaps.is_empty() || r.gaps.contains(&0) {
                    p.push("retention.gaps must be nonempty and >= 1".into());
                }
                if let (Some(rt), Some(m)) = (r.rare_task, &self.mixture) {
                    if rt >= m.num_tasks {
                        p.push(format!("retention.rare_task {rt} out of range"));
                    }
                }
            }
            (_, Some(_)) => p.push(format!("[retention] is not used by kind {}", kind.name())),
            _ => {}
        }
        match (kind, &self.neuron) {
            (ExperimentKind::Neuron, None) => p.push("[neuron] is required for kind neuron".into()),
            (ExperimentKind::Neuron, Some(n)) => {
                absorb(&mut p, "neuron.gated: ", n.gated.validate());
                if n.etas.is_empty() || n.etas.iter().any(|e| !(*e > 0.0 && *e < 0.5)) {
                    p.push("neuron.etas must be nonempty, each in (0, 0.5)".into());
                }
                if n.gaps.is_empty() {
                    p.push("neuron.gaps must be nonempty".into());
                }
                if n.drift_draws < 2 {
                    p.push("neuron.drift_draws must be >= 2".into());
                }
            }
            (_, Some(_)) => p.push(format!("[neuron] is not used by kind {}", kind.name())),
            _ => {}
        }
        match (kind, &self.classify) {
            (ExperimentKind::Classify, None) => p.push("[classify] is required for kind classify".into()),
            (ExperimentKind::Classify, Some(c)) => {
                absorb(&mut p, "classify.params: ", c.params.validate());
                if !(c.epsilon > 0.0) {
                    p.push("classify.epsilon must be positive".into());
                }
                if !(c.n_small > 0.0 && c.n_small <= c.n_large) {
                    p.push("classify needs 0 < n_small <= n_large".into());
                }
                if !(c.compute >= c.params.flops_per_param_token * c.n_large) {
                    p.push("classify.compute leaves less than one token for n_large".into());
                }
                if c.points < 2 {
                    p.push("classify.points must be >= 2".into());
                }
            }
            (_, Some(_)) => p.push(format!("[classify] is not used by kind {}", kind.name())),
            _ => {}
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(LabError::Validation(p))
        }
    }

    /// Stable hash of everything that affects results (output location and
    /// plot toggle excluded).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = None;
        canon.plots = true;
        super::sha_hex(&serde_json::to_vec(&canon).expect("spec serializes"))
    }

    pub fn betas(&self) -> Vec<f64> {
        self.mixture.as_ref().map(|m| m.betas.clone()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PHASE: &str = r#"
kind = "phase"
seed = 7
seeds = 2
widths = [8, 16]

[mixture]
ambient_dim = 64
num_tasks = 4
block_dim = 2
alpha = 2.0
betas = [1.0, 2.0]

[train]
steps = 100
batch_size = 32
eval_every = 50
"#;

    #[test]
    fn parses_and_round_trips() {
        let s = ExperimentSpec::from_toml_str(PHASE).unwrap();
        assert_eq!(s.kind, ExperimentKind::Phase);
        assert_eq!(s.train.warmup, 1000);
        let again = ExperimentSpec::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.hash(), again.hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = PHASE.replace("seeds = 2", "seeds = 2\nsede = 3");
        assert!(matches!(ExperimentSpec::from_toml_str(&bad), Err(LabError::Config(_))));
        let bad = PHASE.replace("eval_every = 50", "eval_every = 50\nlearning_rate = 1.0");
        assert!(ExperimentSpec::from_toml_str(&bad).is_err());
    }

    #[test]
    fn every_violation_is_listed() {
        let bad = PHASE.replace("widths = [8, 16]", "widths = []").replace("betas = [1.0, 2.0]", "betas = []");
        match ExperimentSpec::from_toml_str(&bad) {
            Err(LabError::Validation(v)) => {
                assert!(v.iter().any(|m| m.contains("widths")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("betas")), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentSpec::from_toml_str(PHASE).unwrap();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        b.plots = false;
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
