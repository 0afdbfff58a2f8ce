//! Driver-state classification from facial-landmark streams with a
//! spatio-temporal graph network trained by hand-derived gradients.

pub mod bench;
pub mod cli;
pub mod embed;
pub mod error;
pub mod ingest;
pub mod model;
pub mod numkit;

pub use error::{Error, Result};
