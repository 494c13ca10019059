//! Files, command line and benchmarks around `b3d-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod csv;
pub mod error;
pub mod fsutil;
pub mod inspect;
pub mod manifest;

pub use error::{AppError, Result};
