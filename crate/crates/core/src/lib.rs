//! Masked-MLP stacks over categorical causal systems: ground-truth data
//! generation, six training objectives, few-shot adaptation to interventions,
//! dissected evaluation and seeded sweeps.

pub mod adaptation;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod scm;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
