//! Statistics, simulation and analysis for heralded single-photon sources
//! built on pulsed pair generation.
//!
//! - [`stats`]: closed-form rates, CAR and heralded g²(0) for a source model.
//! - [`montecarlo`]: reproducible pulse-by-pulse detection simulation.
//! - [`eventfile`]: text and binary event stream formats.
//! - [`coincidence`]: streaming coincidence tallies and estimators.
//! - [`estimation`]: power-sweep fits and derived curves.

pub mod coincidence;
pub mod error;
pub mod estimation;
pub mod eventfile;
pub mod montecarlo;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
