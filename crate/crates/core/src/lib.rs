//! Reconstruction of moving point sources from time-indexed linear
//! measurements.
//!
//! The unknown is a nonnegative combination of weighted paths. It is found by
//! a sliding Frank-Wolfe method whose linear oracle is an exact shortest path
//! search over a layered mass-position mesh.

pub mod error;
pub mod evaluate;
pub mod forward;
pub mod localopt;
pub mod measures;
pub mod oracle;
pub mod paths;
pub mod phantoms;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
