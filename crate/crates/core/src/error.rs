use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("task index {index} out of range for {num_tasks} tasks")]
    TaskOutOfRange { index: usize, num_tasks: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate encoder: numerical rank {rank} < width {width}")]
    DegenerateEncoder { rank: usize, width: usize },

    #[error("non-finite loss at step {step} (lr = {lr:e}, grad norm = {grad_norm:e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },

    #[error(
        "infeasible injection: G*B*rho = {expected:.4} < 1 rare sample per injection \
         (need batch >= {min_batch} or gap >= {min_gap})"
    )]
    InfeasibleInjection { expected: f64, min_batch: usize, min_gap: usize },

    #[error("infeasible compute budget: C = {compute:e} leaves less than one token for N = {params:e}")]
    InfeasibleCompute { compute: f64, params: f64 },

    #[error("config validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("config parse error: {0}")]
    Config(#[from] toml::de::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn check_task(index: usize, num_tasks: usize) -> Result<()> {
    if index < num_tasks {
        Ok(())
    } else {
        Err(LabError::TaskOutOfRange { index, num_tasks })
    }
}
