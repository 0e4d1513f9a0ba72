//! Low-density lattice codes: construction, iterative decoding, encoding,
//! convergence analysis and Monte Carlo simulation.

pub mod analysis;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod lattice;
pub mod matrix_gen;
pub mod pdf;
pub mod sim;

pub use error::{LdlcError, Result};
