//! Online primal-dual steppers on a regularized Lagrangian, the saddle-point
//! oracle that defines the tracking target, and tracking-bound arithmetic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{measure, numerical_jacobian, NoiseModel, Plant, DEFAULT_FD_STEP};
use crate::sets::{project_dual, DualBox, ProductSet};
use crate::signals::ExplorationSignal;
use crate::zograd::{lagrangian_probe_scalar, probe_points};

/// Noise slots used for the three per-step measurements.
pub const SLOT_PLUS: u64 = 0;
pub const SLOT_MINUS: u64 = 1;
pub const SLOT_NOMINAL: u64 = 2;

/// Per-step data of a time-varying convex program
/// `min f(x) + f0(y(x))  s.t.  g(y(x)) ≤ 0, x ∈ X`.
///
/// Output-dependent terms are evaluated at measured outputs. Gradients of
/// output terms are only needed by the model-based stepper.
pub trait TimeVaryingProblem: Sync {
    fn primal_dim(&self) -> usize;
    fn dual_dim(&self) -> usize;
    /// `(p, d)`: primal and dual Tikhonov weights.
    fn regularization(&self) -> (f64, f64);

    fn local_cost(&self, k: usize, x: &[f64]) -> f64;
    fn local_gradient(&self, k: usize, x: &[f64]) -> Vec<f64>;
    fn output_cost(&self, k: usize, y: &[f64]) -> f64;
    fn output_cost_gradient(&self, _k: usize, _y: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn constraints(&self, k: usize, y: &[f64]) -> Vec<f64>;
    /// Rows are `∇g_j(y)ᵀ`.
    fn constraint_jacobian(&self, _k: usize, _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
    /// Input-output sensitivity `∂y/∂x`, if the problem carries one.
    fn model_matrix(&self, _k: usize) -> Option<DMatrix<f64>> {
        None
    }
    fn primal_set(&self, k: usize) -> Result<ProductSet>;
    fn dual_set(&self, k: usize) -> Result<DualBox>;
}

/// `f(x) + f0(y) + λᵀg(y) + (p/2)‖x‖² − (d/2)‖λ‖²`.
pub fn regularized_lagrangian(problem: &dyn TimeVaryingProblem, k: usize, x: &[f64], lambda: &[f64], y: &[f64]) -> f64 {
    let (p, d) = problem.regularization();
    let g = problem.constraints(k, y);
    problem.local_cost(k, x) + problem.output_cost(k, y) + dot(lambda, &g) + 0.5 * p * dot(x, x)
        - 0.5 * d * dot(lambda, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualState {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub k: usize,
    pub t: f64,
}

impl PrimalDualState {
    pub fn new(x: Vec<f64>, lambda: Vec<f64>) -> Self {
        PrimalDualState { x, lambda, k: 0, t: 0.0 }
    }

    /// Euclidean distance in the joint `(x, λ)` space.
    pub fn distance(&self, x: &[f64], lambda: &[f64]) -> f64 {
        let dx: f64 = self.x.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        let dl: f64 = self.lambda.iter().zip(lambda).map(|(a, b)| (a - b).powi(2)).sum();
        (dx + dl).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectMode {
    EveryStep,
    /// Primal projection only when `(k + 1)` is a multiple of the period.
    EveryPeriod(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThirdMeasurement {
    /// Apply the unperturbed input and measure it.
    #[default]
    Independent,
    /// Reuse `(ŷ₊ + ŷ₋) / 2`.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    /// Per-coordinate primal step sizes.
    pub alpha: Vec<f64>,
    /// Per-constraint dual step sizes.
    pub alpha_dual: Vec<f64>,
    pub epsilon: f64,
    pub project_mode: ProjectMode,
}

impl StepSizes {
    pub fn new(alpha: Vec<f64>, alpha_dual: Vec<f64>, epsilon: f64, project_mode: ProjectMode) -> Result<Self> {
        let sizes = StepSizes { alpha, alpha_dual, epsilon, project_mode };
        sizes.validate()?;
        Ok(sizes)
    }

    pub fn uniform(n: usize, m: usize, alpha: f64, alpha_dual: f64, epsilon: f64) -> Result<Self> {
        Self::new(vec![alpha; n], vec![alpha_dual; m], epsilon, ProjectMode::EveryStep)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |v: f64| !(v > 0.0 && v.is_finite());
        if self.alpha.iter().chain(&self.alpha_dual).copied().any(bad) || bad(self.epsilon) {
            return Err(Error::InvalidArgument("step sizes and probe radius must be positive".into()));
        }
        if self.project_mode == ProjectMode::EveryPeriod(0) {
            return Err(Error::InvalidArgument("projection period must be at least one step".into()));
        }
        Ok(())
    }

    fn check_dims(&self, problem: &dyn TimeVaryingProblem) -> Result<()> {
        if self.alpha.len() != problem.primal_dim() || self.alpha_dual.len() != problem.dual_dim() {
            return Err(Error::InvalidArgument(format!(
                "step sizes sized ({}, {}) for a problem of size ({}, {})",
                self.alpha.len(),
                self.alpha_dual.len(),
                problem.primal_dim(),
                problem.dual_dim()
            )));
        }
        Ok(())
    }

    fn projects_primal_at(&self, k: usize) -> bool {
        match self.project_mode {
            ProjectMode::EveryStep => true,
            ProjectMode::EveryPeriod(n) => (k + 1).is_multiple_of(n),
        }
    }
}

/// How the three per-step measurements are taken.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub third: ThirdMeasurement,
    pub noise: NoiseModel,
}

/// One emitted record per completed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub t: f64,
    /// Iterate after the step.
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Measurement driving the dual step.
    pub y: Vec<f64>,
    pub gradient_norm: f64,
    /// `f(x) + f0(ŷ)` at the applied input.
    pub objective: f64,
}

/// Measurements of one exploration phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploration {
    pub xi: Vec<f64>,
    pub y_plus: Vec<f64>,
    pub y_minus: Vec<f64>,
    pub y_nominal: Vec<f64>,
    /// Noiseless output at the unperturbed input, when it was evaluated.
    pub y_applied: Option<Vec<f64>>,
}

/// Probe the plant at `x ± εξ⁽ᵏ⁾`, then take the third measurement.
pub fn explore(
    state: &PrimalDualState,
    plant: &dyn Plant,
    signal: &ExplorationSignal,
    epsilon: f64,
    probe: &ProbeOptions,
) -> Result<Exploration> {
    let k = state.k;
    let xi = signal.sample_step(k);
    let pair = probe_points(&state.x, &xi, epsilon)?;
    let evaluate = |x: &[f64]| plant.evaluate(x, k).map_err(|e| Error::StepAborted { step: k, source: Box::new(e) });
    let y_plus = measure(&evaluate(&pair.x_plus)?, &probe.noise, k, SLOT_PLUS);
    let y_minus = measure(&evaluate(&pair.x_minus)?, &probe.noise, k, SLOT_MINUS);
    let (y_nominal, y_applied) = match probe.third {
        ThirdMeasurement::Independent => {
            let y = evaluate(&state.x)?;
            (measure(&y, &probe.noise, k, SLOT_NOMINAL), Some(y))
        }
        ThirdMeasurement::Average => (y_plus.iter().zip(&y_minus).map(|(a, b)| 0.5 * (a + b)).collect(), None),
    };
    Ok(Exploration { xi, y_plus, y_minus, y_nominal, y_applied })
}

/// Scalar broadcast of the step: `([f0₊ − f0₋] + λᵀ[g₊ − g₋]) / (2ε)`.
pub fn probe_scalar(
    problem: &dyn TimeVaryingProblem,
    k: usize,
    lambda: &[f64],
    exploration: &Exploration,
    epsilon: f64,
) -> Result<f64> {
    lagrangian_probe_scalar(
        problem.output_cost(k, &exploration.y_plus),
        problem.output_cost(k, &exploration.y_minus),
        &problem.constraints(k, &exploration.y_plus),
        &problem.constraints(k, &exploration.y_minus),
        lambda,
        epsilon,
    )
}

/// `∇f(x) + ξ · s`.
pub fn estimate_gradient(
    problem: &dyn TimeVaryingProblem,
    state: &PrimalDualState,
    exploration: &Exploration,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let s = probe_scalar(problem, state.k, &state.lambda, exploration, epsilon)?;
    let local = problem.local_gradient(state.k, &state.x);
    Ok(local.iter().zip(&exploration.xi).map(|(g, xi)| g + xi * s).collect())
}

/// `∇f(x) + Cᵀ(∇f0(y) + J_g(y)ᵀ λ)`.
pub fn model_gradient(
    problem: &dyn TimeVaryingProblem,
    k: usize,
    x: &[f64],
    lambda: &[f64],
    y: &[f64],
    model: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let missing = |what: &str| Error::Unsupported(format!("model-based step needs {what}"));
    let mut output_grad = DVector::from_vec(problem.output_cost_gradient(k, y).ok_or_else(|| missing("∇f0"))?);
    if !lambda.is_empty() {
        let jac = problem.constraint_jacobian(k, y).ok_or_else(|| missing("constraint gradients"))?;
        output_grad += jac.transpose() * DVector::from_column_slice(lambda);
    }
    if model.nrows() != output_grad.len() || model.ncols() != x.len() {
        return Err(Error::InvalidArgument(format!(
            "model matrix is {}×{}, expected {}×{}",
            model.nrows(),
            model.ncols(),
            output_grad.len(),
            x.len()
        )));
    }
    let through_plant = model.transpose() * output_grad;
    let local = problem.local_gradient(k, x);
    Ok(local.iter().zip(through_plant.iter()).map(|(a, b)| a + b).collect())
}

/// Unprojected regularized descent on one coordinate: `(1 − αp)x − αg`.
#[inline]
pub fn primal_descent(x: f64, gradient: f64, alpha: f64, p: f64) -> f64 {
    (1.0 - alpha * p) * x - alpha * gradient
}

/// `Proj_D{(1 − α d)λ + α g}` with per-constraint `α`.
pub fn dual_step(lambda: &[f64], g: &[f64], alpha_dual: &[f64], d: f64, set: &DualBox) -> Vec<f64> {
    let raw: Vec<f64> = lambda.iter().zip(g).zip(alpha_dual).map(|((l, g), a)| (1.0 - a * d) * l + a * g).collect();
    project_dual(&raw, set)
}

/// Projected primal and dual updates from a gradient estimate and the
/// measurement `y`, with the primal set supplied by the caller.
pub fn apply_update(
    state: &PrimalDualState,
    problem: &dyn TimeVaryingProblem,
    gradient: &[f64],
    y: &[f64],
    sizes: &StepSizes,
    primal_set: &ProductSet,
    dt: f64,
) -> Result<(PrimalDualState, TraceRecord)> {
    let k = state.k;
    let (p, d) = problem.regularization();
    let raw: Vec<f64> =
        state.x.iter().zip(gradient).zip(&sizes.alpha).map(|((x, g), a)| primal_descent(*x, *g, *a, p)).collect();
    let x = if sizes.projects_primal_at(k) { primal_set.project(&raw)? } else { raw };

    let g = problem.constraints(k, y);
    let lambda = dual_step(&state.lambda, &g, &sizes.alpha_dual, d, &problem.dual_set(k)?);

    let record = TraceRecord {
        k,
        t: state.t,
        x: x.clone(),
        lambda: lambda.clone(),
        y: y.to_vec(),
        gradient_norm: dot(gradient, gradient).sqrt(),
        objective: problem.local_cost(k, &state.x) + problem.output_cost(k, y),
    };
    let next = PrimalDualState { x, lambda, k: k + 1, t: (k + 1) as f64 * dt };
    Ok((next, record))
}

/// One step of the model-free primal-dual method.
///
/// On plant failure the error is returned and `state` is untouched.
pub fn model_free_step(
    state: &PrimalDualState,
    problem: &dyn TimeVaryingProblem,
    plant: &dyn Plant,
    signal: &ExplorationSignal,
    sizes: &StepSizes,
    probe: &ProbeOptions,
) -> Result<(PrimalDualState, TraceRecord)> {
    sizes.check_dims(problem)?;
    let exploration = explore(state, plant, signal, sizes.epsilon, probe)?;
    let gradient = estimate_gradient(problem, state, &exploration, sizes.epsilon)?;
    let primal_set = problem.primal_set(state.k)?;
    apply_update(state, problem, &gradient, &exploration.y_nominal, sizes, &primal_set, signal.dt())
}

/// Where the model-based stepper gets `∂y/∂x`.
fn resolve_model(problem: &dyn TimeVaryingProblem, plant: &dyn Plant, k: usize) -> Option<DMatrix<f64>> {
    problem.model_matrix(k).or_else(|| plant.linear_model(k))
}

/// One step of the gradient-exact baseline using the plant model.
pub fn model_based_step(
    state: &PrimalDualState,
    problem: &dyn TimeVaryingProblem,
    plant: &dyn Plant,
    sizes: &StepSizes,
    noise: &NoiseModel,
    dt: f64,
) -> Result<(PrimalDualState, TraceRecord)> {
    sizes.check_dims(problem)?;
    let k = state.k;
    let model = resolve_model(problem, plant, k)
        .ok_or_else(|| Error::Unsupported("model-based step needs an input-output model".into()))?;
    let y = plant.evaluate(&state.x, k).map_err(|e| Error::StepAborted { step: k, source: Box::new(e) })?;
    let y = measure(&y, noise, k, SLOT_NOMINAL);
    let gradient = model_gradient(problem, k, &state.x, &state.lambda, &y, &model)?;
    let primal_set = problem.primal_set(k)?;
    apply_update(state, problem, &gradient, &y, sizes, &primal_set, dt)
}

/// Constants entering the tracking analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingAnalysis {
    /// Strong-monotonicity constant of the saddle operator.
    pub eta_phi: f64,
    /// Lipschitz constant of the saddle operator.
    pub l_phi: f64,
    pub e_f: f64,
    pub e_y: f64,
    /// Per-step drift of the optimal trajectory.
    pub sigma: f64,
    /// Bound on the operator error.
    pub eps_phi: f64,
}

impl TrackingAnalysis {
    pub fn new(eta_phi: f64, l_phi: f64) -> Result<Self> {
        let a = TrackingAnalysis { eta_phi, l_phi, e_f: 0.0, e_y: 0.0, sigma: 0.0, eps_phi: 0.0 };
        a.validate()?;
        Ok(a)
    }

    pub fn with_errors(mut self, eps_phi: f64, sigma: f64) -> Self {
        self.eps_phi = eps_phi;
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_phi > 0.0 && self.eta_phi <= self.l_phi) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < η ≤ L, got η = {}, L = {}",
                self.eta_phi, self.l_phi
            )));
        }
        Ok(())
    }

    /// Largest admissible step, exclusive.
    pub fn max_step(&self) -> f64 {
        2.0 * self.eta_phi / (self.l_phi * self.l_phi)
    }
}

/// `√(1 − 2αη + α²L²)`, defined for `0 < α < 2η/L²`.
pub fn contraction_constant(alpha: f64, analysis: &TrackingAnalysis) -> Result<f64> {
    analysis.validate()?;
    if !(alpha > 0.0 && alpha < analysis.max_step()) {
        return Err(Error::InvalidArgument(format!(
            "step {alpha} outside (0, {}) required for contraction",
            analysis.max_step()
        )));
    }
    let (eta, l) = (analysis.eta_phi, analysis.l_phi);
    Ok((1.0 - 2.0 * alpha * eta + alpha * alpha * l * l).max(0.0).sqrt())
}

/// Asymptotic tracking error `(α ε_φ + σ) / (1 − c)`.
pub fn tracking_error_bound(alpha: f64, analysis: &TrackingAnalysis) -> Result<f64> {
    if analysis.eps_phi < 0.0 || analysis.sigma < 0.0 {
        return Err(Error::InvalidArgument("error bounds must be non-negative".into()));
    }
    let c = contraction_constant(alpha, analysis)?;
    Ok((alpha * analysis.eps_phi + analysis.sigma) / (1.0 - c))
}

/// Saddle operator `φ(x, λ) = (∇ₓL, −∇_λL)` of the regularized Lagrangian on
/// noiseless outputs.
pub fn saddle_operator(
    problem: &dyn TimeVaryingProblem,
    plant: &dyn Plant,
    model: &DMatrix<f64>,
    k: usize,
    x: &[f64],
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let (p, d) = problem.regularization();
    let y = plant.evaluate(x, k)?;
    let grad = model_gradient(problem, k, x, lambda, &y, model)?;
    let g = problem.constraints(k, &y);
    Ok(grad.iter().zip(x).map(|(g, x)| g + p * x).chain(g.iter().zip(lambda).map(|(g, l)| -g + d * l)).collect())
}

/// Empirical `(η̂, L̂)` from central-difference Jacobians of the saddle
/// operator at `points`: the smallest eigenvalue of the symmetric part and
/// the largest singular value.
pub fn estimate_operator_constants(
    problem: &dyn TimeVaryingProblem,
    plant: &dyn Plant,
    model: &DMatrix<f64>,
    k: usize,
    points: &[PrimalDualState],
) -> Result<(f64, f64)> {
    let n = problem.primal_dim();
    let dim = n + problem.dual_dim();
    let mut eta = f64::INFINITY;
    let mut lip = 0.0_f64;
    for z in points {
        let mut jac = DMatrix::zeros(dim, dim);
        let joint: Vec<f64> = z.x.iter().chain(&z.lambda).copied().collect();
        for col in 0..dim {
            let h = 1e-6 * joint[col].abs().max(1.0);
            let mut up = joint.clone();
            let mut down = joint.clone();
            up[col] += h;
            down[col] -= h;
            let f_up = saddle_operator(problem, plant, model, k, &up[..n], &up[n..])?;
            let f_down = saddle_operator(problem, plant, model, k, &down[..n], &down[n..])?;
            for row in 0..dim {
                jac[(row, col)] = (f_up[row] - f_down[row]) / (2.0 * h);
            }
        }
        let sym = (&jac + jac.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let max_sv = jac.singular_values().iter().copied().fold(0.0, f64::max);
        eta = eta.min(min_eig);
        lip = lip.max(max_sv);
    }
    Ok((eta, lip))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Overrides the step derived from the estimated constants.
    pub alpha: Option<f64>,
    /// Per-coordinate steps; take precedence over `alpha`. Block-scalar
    /// steps on a product set leave the fixed point unchanged.
    pub sizes: Option<StepSizes>,
    /// Random sample points for constant estimation, besides the start.
    pub samples: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { tol: 1e-10, max_iterations: 1_000_000, alpha: None, sizes: None, samples: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub alpha: f64,
    pub eta: f64,
    pub lipschitz: f64,
}

/// Regularized saddle point of the instance frozen at step `k`, by
/// constant-step model-based iteration from `start` (or the projected
/// origin).
pub fn saddle_point_oracle(
    problem: &dyn TimeVaryingProblem,
    k: usize,
    plant: &dyn Plant,
    start: Option<&PrimalDualState>,
    options: &OracleOptions,
) -> Result<OracleSolution> {
    let n = problem.primal_dim();
    let m = problem.dual_dim();
    let primal_set = problem.primal_set(k)?;
    let dual_set = problem.dual_set(k)?;
    let mut z = match start {
        Some(s) => {
            PrimalDualState { x: primal_set.project(&s.x)?, lambda: project_dual(&s.lambda, &dual_set), k, t: 0.0 }
        }
        None => PrimalDualState { x: primal_set.project(&vec![0.0; n])?, lambda: vec![0.0; m], k, t: 0.0 },
    };
    let model = match resolve_model(problem, plant, k) {
        Some(c) => c,
        None => numerical_jacobian(plant, &z.x, k, DEFAULT_FD_STEP)?,
    };

    let mut points = vec![z.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.samples {
        let x: Vec<f64> = z.x.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let lambda: Vec<f64> = z.lambda.iter().map(|v| v + rng.gen_range(0.0..1.0)).collect();
        points.push(PrimalDualState { x, lambda, k, t: 0.0 });
    }
    let (eta, lipschitz) = estimate_operator_constants(problem, plant, &model, k, &points)?;
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("saddle operator is not strongly monotone (η̂ = {eta:.3e})")));
    }
    let alpha = options.alpha.unwrap_or(0.9 * (2.0 * eta / (lipschitz * lipschitz)) * 0.5);
    let sizes = match &options.sizes {
        Some(sizes) => {
            sizes.validate()?;
            sizes.check_dims(problem)?;
            StepSizes { project_mode: ProjectMode::EveryStep, ..sizes.clone() }
        }
        None => StepSizes::uniform(n, m, alpha, alpha, 1.0)?,
    };

    let mut residual = f64::INFINITY;
    for iteration in 1..=options.max_iterations {
        let (mut next, _) = step_with_model(&z, problem, plant, &model, &sizes, &primal_set)?;
        next.k = k;
        residual = next.distance(&z.x, &z.lambda);
        z = next;
        if residual < options.tol {
            return Ok(OracleSolution { x: z.x, lambda: z.lambda, iterations: iteration, alpha, eta, lipschitz });
        }
    }
    Err(Error::NonConvergence { iterations: options.max_iterations, residual })
}

fn step_with_model(
    state: &PrimalDualState,
    problem: &dyn TimeVaryingProblem,
    plant: &dyn Plant,
    model: &DMatrix<f64>,
    sizes: &StepSizes,
    primal_set: &ProductSet,
) -> Result<(PrimalDualState, TraceRecord)> {
    let y = plant.evaluate(&state.x, state.k)?;
    let gradient = model_gradient(problem, state.k, &state.x, &state.lambda, &y, model)?;
    apply_update(state, problem, &gradient, &y, sizes, primal_set, 1.0)
}

/// Displacement over one exploration period and its averaged-gradient
/// reference `−α T ∇F(x_start)`.
///
/// `iterates` holds the primal iterate at the start of the period and after
/// each of its `period_steps` steps.
pub fn period_averaged_displacement(
    iterates: &[Vec<f64>],
    period_steps: usize,
    alpha: f64,
    gradient_at_start: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if iterates.len() != period_steps + 1 {
        return Err(Error::InvalidArgument(format!(
            "trace of {} iterates does not cover a period of {period_steps} steps",
            iterates.len()
        )));
    }
    let start = &iterates[0];
    let end = &iterates[period_steps];
    if start.len() != gradient_at_start.len() || end.len() != start.len() {
        return Err(Error::InvalidArgument("iterate and gradient dimensions differ".into()));
    }
    let displacement = end.iter().zip(start).map(|(e, s)| e - s).collect();
    let reference = gradient_at_start.iter().map(|g| -alpha * period_steps as f64 * g).collect();
    Ok((displacement, reference))
}

type CostFn = Box<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;
type VecFn = Box<dyn Fn(usize, &[f64]) -> Vec<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(usize, &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Problem assembled from closures over a fixed feasible set.
pub struct ClosureProblem {
    primal_dim: usize,
    dual_dim: usize,
    p: f64,
    d: f64,
    local_cost: CostFn,
    local_gradient: VecFn,
    output_cost: CostFn,
    output_gradient: Option<VecFn>,
    constraints: VecFn,
    constraint_jacobian: Option<MatFn>,
    model: Option<DMatrix<f64>>,
    primal_set: ProductSet,
    dual_set: DualBox,
}

impl ClosureProblem {
    /// No local cost, no output cost, no constraints.
    pub fn new(primal_set: ProductSet, p: f64, d: f64) -> Result<Self> {
        if !(p >= 0.0 && d >= 0.0) {
            return Err(Error::InvalidConfiguration(format!("regularization must be non-negative, got ({p}, {d})")));
        }
        let n = primal_set.dim();
        Ok(ClosureProblem {
            primal_dim: n,
            dual_dim: 0,
            p,
            d,
            local_cost: Box::new(|_, _| 0.0),
            local_gradient: Box::new(move |_, _| vec![0.0; n]),
            output_cost: Box::new(|_, _| 0.0),
            output_gradient: None,
            constraints: Box::new(|_, _| Vec::new()),
            constraint_jacobian: None,
            model: None,
            primal_set,
            dual_set: DualBox::new(Vec::new())?,
        })
    }

    pub fn local(
        mut self,
        cost: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(usize, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.local_cost = Box::new(cost);
        self.local_gradient = Box::new(gradient);
        self
    }

    pub fn output(
        mut self,
        cost: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
        gradient: Option<VecFn>,
    ) -> Self {
        self.output_cost = Box::new(cost);
        self.output_gradient = gradient;
        self
    }

    pub fn constrained(
        mut self,
        dual_set: DualBox,
        constraints: impl Fn(usize, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        jacobian: Option<MatFn>,
    ) -> Self {
        self.dual_dim = dual_set.dim();
        self.dual_set = dual_set;
        self.constraints = Box::new(constraints);
        self.constraint_jacobian = jacobian;
        self
    }

    pub fn with_model(mut self, model: DMatrix<f64>) -> Self {
        self.model = Some(model);
        self
    }
}

impl TimeVaryingProblem for ClosureProblem {
    fn primal_dim(&self) -> usize {
        self.primal_dim
    }
    fn dual_dim(&self) -> usize {
        self.dual_dim
    }
    fn regularization(&self) -> (f64, f64) {
        (self.p, self.d)
    }
    fn local_cost(&self, k: usize, x: &[f64]) -> f64 {
        (self.local_cost)(k, x)
    }
    fn local_gradient(&self, k: usize, x: &[f64]) -> Vec<f64> {
        (self.local_gradient)(k, x)
    }
    fn output_cost(&self, k: usize, y: &[f64]) -> f64 {
        (self.output_cost)(k, y)
    }
    fn output_cost_gradient(&self, k: usize, y: &[f64]) -> Option<Vec<f64>> {
        self.output_gradient.as_ref().map(|g| g(k, y))
    }
    fn constraints(&self, k: usize, y: &[f64]) -> Vec<f64> {
        (self.constraints)(k, y)
    }
    fn constraint_jacobian(&self, k: usize, y: &[f64]) -> Option<DMatrix<f64>> {
        self.constraint_jacobian.as_ref().map(|j| j(k, y))
    }
    fn model_matrix(&self, _k: usize) -> Option<DMatrix<f64>> {
        self.model.clone()
    }
    fn primal_set(&self, _k: usize) -> Result<ProductSet> {
        Ok(self.primal_set.clone())
    }
    fn dual_set(&self, _k: usize) -> Result<DualBox> {
        Ok(self.dual_set.clone())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::LinearPlant;
    use crate::sets::{BoxSet, PrimalSet};
    use approx::assert_abs_diff_eq;

    fn interval(lo: f64, hi: f64) -> ProductSet {
        ProductSet::single(PrimalSet::Box(BoxSet::uniform(1, lo, hi).unwrap()))
    }

    fn scalar_square(p: f64, d: f64) -> ClosureProblem {
        ClosureProblem::new(interval(-1.0, 1.0), p, d)
            .unwrap()
            .output(|_, y| y[0] * y[0], Some(Box::new(|_, y: &[f64]| vec![2.0 * y[0]])))
    }

    fn unit_signal() -> ExplorationSignal {
        // single channel, four steps per period
        ExplorationSignal::integer_cycles(4.0, &[1], std::f64::consts::SQRT_2).unwrap().with_dt(1.0).unwrap()
    }

    fn state_at(x: f64, k: usize) -> PrimalDualState {
        PrimalDualState { x: vec![x], lambda: vec![], k, t: k as f64 }
    }

    #[test]
    fn lagrangian_examples() {
        let prob = scalar_square(0.2, 0.1);
        assert_abs_diff_eq!(regularized_lagrangian(&prob, 0, &[1.0], &[], &[1.0]), 1.1, epsilon = 1e-15);
        assert_eq!(regularized_lagrangian(&prob, 0, &[0.0], &[], &[0.0]), 0.0);
        let prob = ClosureProblem::new(interval(-5.0, 5.0), 0.0, 0.0).unwrap().constrained(
            DualBox::uniform(1, 100.0).unwrap(),
            |_, y| vec![y[0] - 1.0],
            None,
        );
        assert_eq!(regularized_lagrangian(&prob, 0, &[0.0], &[3.0], &[2.0]), 3.0);
    }

    #[test]
    fn model_free_scalar_step() {
        let prob = scalar_square(0.1, 0.0);
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        // ξ at k = 1 is sin(π/2) = 1
        let signal = ExplorationSignal::integer_cycles(4.0, &[1], 1.0).unwrap();
        assert_abs_diff_eq!(signal.sample_step(1)[0], 1.0, epsilon = 1e-15);
        let sizes = StepSizes::uniform(1, 0, 0.1, 1.0, 0.01).unwrap();
        let (next, rec) =
            model_free_step(&state_at(0.5, 1), &prob, &plant, &signal, &sizes, &ProbeOptions::default()).unwrap();
        assert_abs_diff_eq!(rec.gradient_norm, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next.x[0], 0.395, epsilon = 1e-12);
        assert_eq!(next.k, 2);

        let (next, _) =
            model_free_step(&state_at(0.0, 1), &prob, &plant, &signal, &sizes, &ProbeOptions::default()).unwrap();
        assert_eq!(next.x[0], 0.0);
    }

    #[test]
    fn model_free_dual_step() {
        let prob = ClosureProblem::new(interval(-1.0, 1.0), 0.1, 0.1).unwrap().constrained(
            DualBox::uniform(1, 100.0).unwrap(),
            |_, y| vec![y[0] - 0.3],
            None,
        );
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        let signal = ExplorationSignal::integer_cycles(4.0, &[1], 1.0).unwrap();
        let sizes = StepSizes::uniform(1, 1, 0.1, 1.0, 0.01).unwrap();
        let state = PrimalDualState { x: vec![0.5], lambda: vec![0.0], k: 1, t: 1.0 };
        let (next, _) = model_free_step(&state, &prob, &plant, &signal, &sizes, &ProbeOptions::default()).unwrap();
        assert_abs_diff_eq!(next.lambda[0], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn model_based_matches_quadratic_model_free() {
        let prob = scalar_square(0.1, 0.0);
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        let sizes = StepSizes::uniform(1, 0, 0.1, 1.0, 0.01).unwrap();
        let (next, _) =
            model_based_step(&state_at(0.5, 0), &prob, &plant, &sizes, &NoiseModel::noiseless(), 1.0).unwrap();
        assert_abs_diff_eq!(next.x[0], 0.395, epsilon = 1e-12);

        let zero = LinearPlant::static_gain(DMatrix::zeros(1, 1));
        let (next, _) =
            model_based_step(&state_at(0.5, 0), &prob, &zero, &sizes, &NoiseModel::noiseless(), 1.0).unwrap();
        assert_abs_diff_eq!(next.x[0], 0.99 * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn model_based_without_gradient_is_unsupported() {
        let prob = ClosureProblem::new(interval(-1.0, 1.0), 0.1, 0.0).unwrap().output(|_, y| y[0], None);
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        let sizes = StepSizes::uniform(1, 0, 0.1, 1.0, 0.01).unwrap();
        let err = model_based_step(&state_at(0.5, 0), &prob, &plant, &sizes, &NoiseModel::noiseless(), 1.0);
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn plant_failure_aborts_step() {
        struct Failing;
        impl Plant for Failing {
            fn input_dim(&self) -> usize {
                1
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn evaluate(&self, _: &[f64], _: usize) -> Result<Vec<f64>> {
                Err(Error::PowerFlowDivergence { iterations: 50, mismatch: 1.0 })
            }
        }
        let prob = scalar_square(0.1, 0.0);
        let sizes = StepSizes::uniform(1, 0, 0.1, 1.0, 0.01).unwrap();
        let state = state_at(0.5, 3);
        let err =
            model_free_step(&state, &prob, &Failing, &unit_signal(), &sizes, &ProbeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::StepAborted { step: 3, .. }));
        assert_eq!(state, state_at(0.5, 3));
    }

    fn constrained_square(p: f64, d: f64) -> ClosureProblem {
        ClosureProblem::new(interval(-2.0, 2.0), p, d)
            .unwrap()
            .output(|_, y| y[0] * y[0], Some(Box::new(|_, y: &[f64]| vec![2.0 * y[0]])))
            .constrained(
                DualBox::uniform(1, 100.0).unwrap(),
                |_, y| vec![1.0 - y[0]],
                Some(Box::new(|_, _| DMatrix::from_element(1, 1, -1.0))),
            )
    }

    #[test]
    fn oracle_regularized_kkt() {
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        let (p, d) = (0.01, 0.01);
        let sol = saddle_point_oracle(&constrained_square(p, d), 0, &plant, None, &OracleOptions::default()).unwrap();
        // 2x + px − λ = 0, λ = (1 − x)/d
        let x_star = 1.0 / (1.0 + d * (2.0 + p));
        assert_abs_diff_eq!(x_star, 0.980296, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[0], x_star, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.lambda[0], (1.0 - x_star) / d, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.lambda[0], 1.97040, epsilon = 1e-4);
    }

    #[test]
    fn oracle_small_regularization_limit() {
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        let sol =
            saddle_point_oracle(&constrained_square(1e-4, 1e-4), 0, &plant, None, &OracleOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(sol.lambda[0], 2.0, epsilon = 1e-2);
    }

    #[test]
    fn oracle_unconstrained() {
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        let sol = saddle_point_oracle(&scalar_square(0.01, 0.0), 0, &plant, None, &OracleOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-9);
        assert!(sol.lambda.is_empty());
    }

    #[test]
    fn contraction_examples() {
        let a = TrackingAnalysis::new(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(contraction_constant(0.1, &a).unwrap(), 0.84f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(contraction_constant(1e-9, &a).unwrap(), 1.0, epsilon = 1e-8);
        assert!(contraction_constant(0.6, &a).is_err());
        assert!(contraction_constant(0.0, &a).is_err());
        assert!(TrackingAnalysis::new(2.0, 1.0).is_err());
    }

    #[test]
    fn tracking_bound_examples() {
        let a = TrackingAnalysis::new(1.0, 2.0).unwrap().with_errors(0.05, 0.01);
        assert_abs_diff_eq!(tracking_error_bound(0.1, &a).unwrap(), 0.015 / (1.0 - 0.84f64.sqrt()), epsilon = 1e-12);
        assert_abs_diff_eq!(tracking_error_bound(0.1, &a).unwrap(), 0.17968, epsilon = 1e-4);
        let exact = TrackingAnalysis::new(1.0, 2.0).unwrap();
        assert_eq!(tracking_error_bound(0.1, &exact).unwrap(), 0.0);
        let noisy = TrackingAnalysis::new(1.0, 2.0).unwrap().with_errors(0.05, 0.0);
        let b1 = tracking_error_bound(0.45, &noisy).unwrap();
        let b2 = tracking_error_bound(0.49, &noisy).unwrap();
        assert!(b2 > b1);
    }

    #[test]
    fn displacement_shape_checks() {
        let xs = vec![vec![1.0], vec![0.9], vec![0.8]];
        let (disp, reference) = period_averaged_displacement(&xs, 2, 0.1, &[0.5]).unwrap();
        assert_abs_diff_eq!(disp[0], -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(reference[0], -0.1, epsilon = 1e-15);
        assert!(period_averaged_displacement(&xs, 3, 0.1, &[0.5]).is_err());
    }

    #[test]
    fn every_period_projection_defers() {
        let prob = ClosureProblem::new(interval(-1.0, 1.0), 0.0, 0.0).unwrap().local(|_, x| -x[0], |_, _| vec![-1.0]);
        let plant = LinearPlant::static_gain(DMatrix::from_element(1, 1, 1.0));
        let signal = unit_signal();
        let sizes = StepSizes::new(vec![0.5], vec![], 0.01, ProjectMode::EveryPeriod(4)).unwrap();
        let mut state = state_at(0.9, 0);
        for k in 0..4 {
            state = model_free_step(&state, &prob, &plant, &signal, &sizes, &ProbeOptions::default()).unwrap().0;
            if k < 3 {
                assert!(state.x[0] > 1.0);
            }
        }
        assert_eq!(state.x[0], 1.0);
    }
}
