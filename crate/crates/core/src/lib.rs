//! Targeted partial-caption attacks on a small recurrent image captioner.

mod error;

pub use error::{Error, Result};

pub mod baselines;
pub mod gem;
pub mod gradcheck;
pub mod harness;
pub mod inference;
pub mod lssvm;
pub mod model;
pub mod numerics;
pub mod optimizer;
