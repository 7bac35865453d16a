//! Burst frame-quality assessment: datasets on disk, training, evaluation and
//! downstream frame selection on top of `biqa-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;

pub use error::{Error, Result};
