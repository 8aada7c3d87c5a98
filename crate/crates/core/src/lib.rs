//! Stochastic-dynamics toolkit for sentence-level hidden-state trajectories.
//!
//! The pipeline runs jump filtering and standardization ([`trajectories`]),
//! a low-rank drift manifold ([`projection`]), a global ridge drift baseline
//! ([`linear_baseline`]), mixture-based regime discovery ([`regime_detect`]),
//! and a switching linear dynamical system fitted by EM ([`slds`]).
//! [`langevin`] holds the double-well reference system and [`belief_case`]
//! the poisoned-trajectory belief harness.

pub mod belief_case;
pub mod error;
pub mod harness;
pub mod kmeans;
pub mod langevin;
pub mod linalg;
pub mod linear_baseline;
pub mod metrics;
pub mod projection;
pub mod regime_detect;
pub mod rng;
pub mod slds;
pub mod synth;
pub mod trajectories;

pub use error::{Error, ErrorClass, Result};
