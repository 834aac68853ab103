//! Layered configuration tooling for embedded Linux images.

pub mod cli;
pub mod compose;
pub mod coreenv;
pub mod error;
pub mod kconfig;
pub mod layers;
pub mod ota;
pub mod persist;

pub use error::{Error, Result};
