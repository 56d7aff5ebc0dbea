//! Bayesian approximation error (BAE) inversion for linear inverse problems
//! whose forward operator depends on an unknown scalar model parameter,
//! demonstrated on single-dipole source imaging in a layered disk with an
//! unknown skull conductivity.

// Guards are written `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod config;
pub mod error;
pub mod forward;
pub mod harness;
pub mod inversion;
pub mod rng;
pub mod store;
pub mod training;

pub use error::{BaeError, Result};
