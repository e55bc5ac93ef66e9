//! Visual-inertial state estimation on a transformed error state, with a
//! pose-only multi-view measurement model, observability tooling, and a
//! velocity-aided backtracking smoother for signal-deprived stretches.
//!
//! Conventions used throughout (documented per-module where they bind):
//! Hamilton quaternions storing body-to-global rotations, global-frame
//! left-multiplicative attitude error, transformed velocity/position errors
//! coupling through the current rotation estimate, and additive bias errors.

pub mod config;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod po;
pub mod propagation;
pub mod sim;
pub mod state;
pub mod stats;
pub mod triangulation;

pub use error::{ExitClass, VioError};
