// SPDX-License-Identifier: Apache-2.0

//! Commands behind the `dcea` binary: running scenarios, verifying bundle
//! files offline and regenerating the detection matrix.

mod error;
mod matrix;
mod run;
mod verify;

pub use error::CliError;
pub use matrix::{cmd_matrix, Cell, CellStatus, Matrix, MatrixOptions, MATRIX_ROWS};
pub use run::{cmd_run, list_scenarios, resolve_scenario, RunReport};
pub use verify::{cmd_verify, PolicyFile};

/// Process exit status: the outcome matched the expectation.
pub const EXIT_OK: u8 = 0;
/// The verifier disagreed with the expectation.
pub const EXIT_MISMATCH: u8 = 1;
/// Bad arguments, unreadable files or unparsable input.
pub const EXIT_USAGE: u8 = 2;

/// Output formats shared by every command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Md,
    Csv,
}
