//! A desk-scale laboratory for multi-task linear regression with a
//! linear-bottleneck student.
//!
//! The crate covers the whole loop: a mixture-of-regressions teacher with
//! power-law task priors and spectra ([`mixture`]), the shared-encoder student
//! ([`student`]), AdamW training on streamed batches ([`trainer`]), the
//! closed-form endpoints that training should reach ([`oracle`]), subspace
//! measurements ([`metrics`]), matched-frequency withholding of a rare task
//! ([`injection`]), a two-task neuron competition toy ([`neuron`]), the
//! phenomenological data-vs-model scaling classifier ([`scaling_law`]), and
//! sweep orchestration with CSV output and plots ([`runner`]).
//!
//! The `book/` directory at the repository root explains each piece with
//! runnable snippets; they are compiled as doc-tests of this crate.

pub mod error;
pub mod injection;
pub mod metrics;
pub mod mixture;
pub mod neuron;
pub mod oracle;
pub mod runner;
pub mod scaling_law;
pub mod student;
pub mod trainer;

pub use error::{LabError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/teacher.md")]
    mod teacher {}
    #[doc = include_str!("../../../book/src/student.md")]
    mod student {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/interference.md")]
    mod interference {}
    #[doc = include_str!("../../../book/src/retention.md")]
    mod retention {}
    #[doc = include_str!("../../../book/src/neuron.md")]
    mod neuron {}
    #[doc = include_str!("../../../book/src/scaling_law.md")]
    mod scaling_law {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
