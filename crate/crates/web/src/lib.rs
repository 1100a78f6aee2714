//! Browser bindings: a model-free primal-dual loop on a scalar problem,
//! its saddle point, and a two-bus power flow.

use std::f64::consts::SQRT_2;

use mfpd::engine::{
    model_free_step, saddle_point_oracle, ClosureProblem, OracleOptions, PrimalDualState, ProbeOptions, StepSizes,
};
use mfpd::plant::{FeederModel, Line, LinearPlant, NoiseModel};
use mfpd::sets::{BoxSet, DualBox, PrimalSet, ProductSet};
use mfpd::signals::ExplorationSignal;
use nalgebra::DMatrix;
use wasm_bindgen::prelude::*;

const TARGET: f64 = 2.0;
const PERIOD: f64 = 20.0;

/// `(y − 2)²` through `y = x ∈ [−4, 4]`, subject to `y ≤ upper`.
fn scalar_problem(upper: f64, p: f64, d: f64) -> mfpd::Result<ClosureProblem> {
    let set = ProductSet::single(PrimalSet::Box(BoxSet::uniform(1, -4.0, 4.0)?));
    Ok(ClosureProblem::new(set, p, d)?
        .output(|_, y: &[f64]| (y[0] - TARGET).powi(2), Some(Box::new(|_, y: &[f64]| vec![2.0 * (y[0] - TARGET)])))
        .constrained(
            DualBox::uniform(1, 100.0)?,
            move |_, y: &[f64]| vec![y[0] - upper],
            Some(Box::new(|_, _: &[f64]| DMatrix::from_element(1, 1, 1.0))),
        ))
}

fn js(e: mfpd::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Runs the loop from `x = −3, λ = 0` with the output measured under
/// Gaussian noise. Returns `[x₀, λ₀, x₁, λ₁, …]` after each step.
#[wasm_bindgen]
pub fn run_primal_dual(
    alpha: f64,
    epsilon: f64,
    sigma: f64,
    upper: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    let problem = scalar_problem(upper, 0.01, 0.01).map_err(js)?;
    let plant = LinearPlant::static_gain(DMatrix::identity(1, 1));
    let signal = ExplorationSignal::integer_cycles(PERIOD, &[1], SQRT_2).map_err(js)?;
    let sizes = StepSizes::uniform(1, 1, alpha, alpha, epsilon).map_err(js)?;
    let probe = ProbeOptions { noise: NoiseModel::new(sigma, seed).map_err(js)?, ..ProbeOptions::default() };
    let mut state = PrimalDualState::new(vec![-3.0], vec![0.0]);
    let mut trace = Vec::with_capacity(2 * steps);
    for _ in 0..steps {
        state = model_free_step(&state, &problem, &plant, &signal, &sizes, &probe).map_err(js)?.0;
        trace.extend([state.x[0], state.lambda[0]]);
    }
    Ok(trace)
}

/// `[x*, λ*]` of the regularized scalar problem.
#[wasm_bindgen]
pub fn saddle_point(upper: f64, p: f64, d: f64) -> Result<Vec<f64>, JsError> {
    let problem = scalar_problem(upper, p, d).map_err(js)?;
    let plant = LinearPlant::static_gain(DMatrix::identity(1, 1));
    let sol = saddle_point_oracle(&problem, 0, &plant, None, &OracleOptions::default()).map_err(js)?;
    Ok(vec![sol.x[0], sol.lambda[0]])
}

/// `[|V|, angle (rad), P0, Q0]` at the end of one line feeding a load,
/// all in p.u. with a 1 p.u. source.
#[wasm_bindgen]
pub fn two_bus(r: f64, x: f64, p_load: f64, q_load: f64) -> Result<Vec<f64>, JsError> {
    let feeder = FeederModel::new(vec!["source".into(), "load".into()], vec![Line { from: 0, to: 1, r, x }], 1.0, 1.0)
        .map_err(js)?;
    let sol = feeder.solve_power_flow(&[num_complex::Complex64::new(-p_load, -q_load)]).map_err(js)?;
    Ok(vec![sol.voltages[0], sol.angles[0], sol.p0, sol.q0])
}
