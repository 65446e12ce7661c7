//! Contribution-guided weak-to-strong alternating training for multimodal
//! fusion, with cross-modal alignment and a gated memory cell.

pub mod alignment;
pub mod data;
pub mod edm;
pub mod error;
pub mod inference;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
