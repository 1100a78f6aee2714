//! Model-free primal-dual feedback control of time-varying networked systems.
//!
//! The controller probes the plant with small sinusoidal perturbations,
//! estimates gradients of the output-dependent costs from the measured
//! responses, and drives the inputs along a regularized primal-dual flow.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod harness;
pub mod opf;
pub mod plant;
pub mod sets;
pub mod signals;
pub mod zograd;

pub use error::{Error, Result};
