//! Energy-state simulation and power allocation for wirelessly powered
//! cell-free massive MIMO networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`] builds the network geometry, large-scale fading and MMSE
//!   estimation statistics, and draws small-scale realizations.
//! - [`eh_stats`] evaluates mean and variance of the received RF power and the
//!   harvested energy, and fits a Gamma surrogate.
//! - [`markov`] turns the energy differential statistics into a birth-death
//!   chain over discrete battery states.
//! - [`power_alloc`] and [`socp`] choose downlink power coefficients.
//! - [`sim`] evolves battery trajectories over many coherence intervals.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod eh_stats;
pub mod error;
pub mod markov;
pub mod moments;
pub mod power_alloc;
pub mod rng;
pub mod sim;
pub mod socp;
pub mod special;

pub use config::NetworkConfig;
pub use error::{Error, Result};
