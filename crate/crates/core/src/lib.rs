//! Iterative self-transfer learning for sequence surrogate models.
//!
//! A small labeled target set is amplified with pseudo-labels produced by a
//! mean-teacher surrogate and by a domain-adaptive transfer network that
//! aligns hidden representations with a multi-kernel MMD penalty.

pub mod data;
pub mod datagen;
pub mod error;
pub mod mmd;
pub mod net;
pub mod orchestrator;
pub mod report;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
