//! Deterministic simulation of partitioned data-parallel training.
//!
//! The crate is `no_std` with `alloc`. Ranks are async futures driven by a
//! transport; the in-process [`collectives::SimNetwork`] runs them in
//! lockstep on one thread.
#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod collectives;
pub mod error;
pub mod fragsim;
pub mod model;
pub mod mpadam;
pub mod numerics;
pub mod planner;
pub mod zerodp;

pub use error::{CommError, ConfigError, Error, NumericError, Result};
pub use numerics::{FlatTensor, Half, SeededRng};
pub use zerodp::{PartitionLayout, Stage};
