//! Variational sampling of unnormalized densities with spline-coupling
//! normalizing flows.
//!
//! The workflow trains a flow with the reverse KL divergence at an elevated
//! temperature, where the target's modes are connected, and then anneals it
//! down a temperature ladder. Each annealing iteration draws a buffer from the
//! flow, importance-weights it to the next temperature, resamples with
//! replacement and refits the flow with the forward KL divergence.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, configuration and the command line live in the
//! `annealflow` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ais;
pub mod annealing;
pub mod diffgraph;
mod error;
pub mod flow;
pub(crate) mod math;
pub mod metrics;
pub mod targets;
pub mod training;

pub use error::Error;

/// Log-density value standing in for `-inf`. Keeps weights orderable.
pub const LOG_ZERO: f64 = -1e30;

/// Anything at or below this is treated as the `-inf` sentinel.
pub(crate) const LOG_ZERO_THRESHOLD: f64 = -1e29;

/// Returns true when `v` is a usable finite log-density (not NaN, not the sentinel).
#[inline]
pub fn is_valid_log(v: f64) -> bool {
    v.is_finite() && v > LOG_ZERO_THRESHOLD
}

/// Default RNG used throughout. Seeded, portable, and fast.
pub type SeedRng = rand_chacha::ChaCha8Rng;
