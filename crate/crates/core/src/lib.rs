//! Exact small-scale inference, constructive synthesis, and closed-form
//! approximation-error bounds for discrete deep belief networks, together
//! with contrastive-divergence / exact maximum-likelihood training.
//!
//! Everything operates on fully enumerated state spaces, so models stay at
//! desk scale by construction: distributions are dense vectors, partition
//! functions are exact sums, and every synthesized network can be checked
//! against the distribution it was built to realize.

pub mod bounds;
pub mod conditional_layers;
pub mod dbn;
pub mod distributions;
pub mod error;
pub mod rbm;
pub mod sharing_schedule;
pub mod state_space;
pub mod training;

pub use error::{Error, Result};
pub use state_space::{CylinderSet, StateSpace, DEFAULT_ENUM_CAP};
