//! Burst frame quality assessment.
//!
//! The crate is `no_std` + `alloc` when built without the `std` feature.
//! File formats beyond the in-memory `BIQT` codec, the training harness and
//! the CLI live in the `biqa` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod numerics;
pub mod nn;
pub mod burstgen;
pub mod metrics;
pub mod downstream;
pub mod model;
pub mod objectives;
pub mod qanet;
pub mod tpgnet;

pub use error::{Error, Result};
