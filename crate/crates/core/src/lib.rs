//! Desk-scale laboratory for simulation-free training of flow models.

pub mod dataguard;
pub mod error;
pub mod evalrank;
pub mod mmdit;
pub mod par;
pub mod sample;
pub mod stats;
pub mod study;
pub mod tensor;
pub mod timesamplers;
pub mod train;
pub mod trajectories;

pub use error::{Error, Result};
