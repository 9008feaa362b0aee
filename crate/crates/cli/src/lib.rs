//! Library side of the `dikm` command-line tool: run configuration,
//! dataset descriptors, the checkpoint container and the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod source;

use std::fmt;

pub use checkpoint::{Checkpoint, LandmarkCache};
pub use config::RunConfig;
pub use source::DataSource;

/// A run that produced non-finite numbers.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numerical failure: {}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Exit status for an error: 3 for numerical failures (singular spline
/// systems, non-finite results), 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return EXIT_NUMERICAL;
        }
        if let Some(dikm_core::Error::SingularSystem { .. }) = cause.downcast_ref() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_BAD_INPUT
}
