//! Exact event-driven simulation of the exploration process of a Lévy tree
//! built from a truncated spectrally positive Lévy path, together with Monte
//! Carlo and quadrature checks of its generator identities.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod error;
pub mod exploration;
pub mod generator_lab;
pub mod levy_model;
pub mod measure_core;
pub mod path_sim;
pub mod poisson_rep;
pub mod quadrature;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use levy_model::{JumpMeasure, LaplaceExponent, LevyMechanism, TruncatedMechanism};
