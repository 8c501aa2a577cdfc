pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod physics;
pub mod rng;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
