//! Streaming recurrent temporal fusion of bird's-eye-view feature grids.
//!
//! Module map:
//! - [`geometry`]: SE(2) poses and grid resampling transforms.
//! - [`grid`]: dense feature grids, convolution, bilinear sampling, binary formats.
//! - [`fusion`]: parallel and recurrent fusion plus the unrolled oracle.
//! - [`temporal`]: interval embedding and the velocity readout / frame-drop experiment.
//! - [`sim`]: synthetic BEV scenes and frame dropping.
//! - [`bench`]: latency and state-size benchmarks of the two fusion styles.
//! - [`check`]: the equivalence suites behind `bevstream check`.
//! - [`cli`]: the `bevstream` command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod check;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod sim;
pub mod temporal;

pub use error::{BevError, Result};

/// Seed used when none is given on the command line or in a config.
pub const DEFAULT_SEED: u64 = 7;
