//! Risk-aware distributional actor-critic training with runtime-adjustable
//! risk sensitivity, teacher-to-student distillation, and exact tabular
//! oracles for verification.

pub mod checkpoint;
pub mod distill;
pub mod envs;
pub mod error;
pub mod evalsuite;
pub mod gradcheck;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod quantile;
pub mod risk;
pub mod rollout;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
