//! Simulation and estimation for cascaded reflecting-surface channels.
//!
//! The library models a multi-user MISO uplink assisted by a passive
//! reflecting surface, simulates an always-on two-stage training protocol,
//! and estimates the cascaded (BS <- surface <- user) channels by
//! alternating convex optimization over a common-link / user-specific
//! factorization. A steering-vector optimizer and an on-off baseline
//! protocol round out the benchmark surface.
//!
//! Modules:
//! - [`model`]: system dimensions, angular-domain channel synthesis,
//!   cascaded-channel and covariance algebra.
//! - [`protocol`]: pilots, phase plans, training simulation, and the
//!   preprocessing that cancels the direct channels.
//! - [`estimator`]: alternating-optimization cascaded-channel estimator
//!   plus the direct-channel LMMSE and the NMSE metric.
//! - [`phase_opt`]: training phase-shift configuration by successive
//!   convex approximation under unit-modulus constraints.
//! - [`onoff`]: selected on-off baseline protocol and estimators.

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod model;
pub mod onoff;
pub mod phase_opt;
pub mod protocol;

pub use error::Error;
pub use linalg::{CMat, CVec};

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
