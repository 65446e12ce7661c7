//! Declarative experiment runner for `equimodal`: strict JSON configs,
//! training pipelines, sweeps and reproducible, content-hashed reports.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;
pub mod projection;

pub use config::{DataSection, EvalConfig, ExperimentConfig};

use equimodal::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        e if e.is_numeric() => EXIT_NUMERIC,
        Error::Config { .. } | Error::Format { .. } | Error::Domain(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}
