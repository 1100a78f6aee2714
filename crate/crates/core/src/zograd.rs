//! Two-point zero-order gradient estimation.
//!
//! The estimator works on already-measured scalars so that noisy plant
//! outputs can be fed straight in.

use crate::error::{Error, Result};

/// Symmetric probe around a nominal input: `x_plus - x_minus = 2 ε ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePair {
    pub x_plus: Vec<f64>,
    pub x_minus: Vec<f64>,
    pub xi: Vec<f64>,
    pub epsilon: f64,
}

pub fn probe_points(x: &[f64], xi: &[f64], epsilon: f64) -> Result<ProbePair> {
    if x.len() != xi.len() {
        return Err(Error::InvalidArgument(format!("input has {} components but probe has {}", x.len(), xi.len())));
    }
    check_epsilon(epsilon)?;
    let x_plus = x.iter().zip(xi).map(|(a, b)| a + epsilon * b).collect();
    let x_minus = x.iter().zip(xi).map(|(a, b)| a - epsilon * b).collect();
    Ok(ProbePair { x_plus, x_minus, xi: xi.to_vec(), epsilon })
}

/// `ξ · (f₊ − f₋) / (2ε)`. Equals `ξ ξᵀ ∇F` up to `O(ε²)`, exactly for
/// quadratic `F`.
pub fn two_point_estimate(f_plus: f64, f_minus: f64, xi: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let s = difference_quotient(f_plus, f_minus, epsilon)?;
    Ok(xi.iter().map(|v| v * s).collect())
}

/// The scalar `(f₊ − f₋) / (2ε)` multiplying the probe direction.
pub fn difference_quotient(f_plus: f64, f_minus: f64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok((f_plus - f_minus) / (2.0 * epsilon))
}

/// Probe-direction scalar of the Lagrangian estimate:
/// `([f0₊ − f0₋] + λᵀ[g₊ − g₋]) / (2ε)`.
///
/// Both the monolithic stepper and the gather-and-broadcast coordinator call
/// this, so the two produce bit-identical primal updates.
pub fn lagrangian_probe_scalar(
    f0_plus: f64,
    f0_minus: f64,
    g_plus: &[f64],
    g_minus: &[f64],
    lambda: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if g_plus.len() != lambda.len() || g_minus.len() != lambda.len() {
        return Err(Error::InvalidArgument(format!(
            "constraint vectors ({}, {}) do not match {} multipliers",
            g_plus.len(),
            g_minus.len(),
            lambda.len()
        )));
    }
    check_epsilon(epsilon)?;
    let coupling: f64 = lambda.iter().zip(g_plus.iter().zip(g_minus)).map(|(l, (gp, gm))| l * (gp - gm)).sum();
    Ok(((f0_plus - f0_minus) + coupling) / (2.0 * epsilon))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("probe radius must be positive, got {epsilon}")))
    }
}
