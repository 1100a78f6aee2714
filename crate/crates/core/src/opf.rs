//! Real-time optimal power flow on a distribution feeder: DER device
//! models, the problem assembly, and the gather-and-broadcast controller.

use std::sync::mpsc;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::engine::{
    self, apply_update, dual_step, estimate_gradient, explore, primal_descent, PrimalDualState, ProbeOptions,
    StepSizes, TimeVaryingProblem,
};
use crate::error::{Error, Result};
use crate::plant::{FeederPlant, Plant};
use crate::sets::{project_box_disc, BoxDiscSet, DualBox, PrimalSet, ProductSet};
use crate::signals::ExplorationSignal;

/// Default cost weights and step sizes of the reference experiment.
pub mod defaults {
    pub const PV_C_P: f64 = 1e-5;
    pub const PV_C_Q: f64 = 1e-5;
    pub const PV_C_P_REF: f64 = 1e-3;
    pub const BATTERY_C_P: f64 = 1e-4 / 6.0;
    pub const BATTERY_C_Q: f64 = 1e-4 / 6.0;
    pub const BATTERY_C_P_REF: f64 = 1e-4 / 6.0;
    pub const PV_ALPHA: f64 = 2.0;
    pub const BATTERY_ALPHA: f64 = 12.0;
    pub const VOLTAGE_ALPHA: f64 = 10.0;
    pub const BATTERY_EFFICIENCY: f64 = 0.9;
    /// Hours over which a battery's reference power would restore mid SOC.
    pub const SOC_RECOVERY_HOURS: f64 = 10.0;
    pub const S_BASE_MVA: f64 = 23.04;
    pub const PRIMAL_REG: f64 = 1e-5;
    pub const DUAL_REG: f64 = 1e-4;
}

/// `c_p p² + c_q q² + c_p•(p − p•)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub c_p: f64,
    pub c_q: f64,
    pub c_p_ref: f64,
}

impl CostWeights {
    pub fn pv() -> Self {
        CostWeights { c_p: defaults::PV_C_P, c_q: defaults::PV_C_Q, c_p_ref: defaults::PV_C_P_REF }
    }

    pub fn battery() -> Self {
        CostWeights { c_p: defaults::BATTERY_C_P, c_q: defaults::BATTERY_C_Q, c_p_ref: defaults::BATTERY_C_P_REF }
    }

    pub fn cost(&self, pq: [f64; 2], p_ref: f64) -> f64 {
        self.c_p * pq[0] * pq[0] + self.c_q * pq[1] * pq[1] + self.c_p_ref * (pq[0] - p_ref).powi(2)
    }
}

/// Grid-scale battery. `x_p > 0` charges; the network sees `−x_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    /// MWh.
    pub soc: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    /// MW.
    pub p_min: f64,
    pub p_max: f64,
    pub efficiency: f64,
    /// Hours over which the reference power steers SOC back to mid range.
    pub recovery_hours: f64,
}

impl Battery {
    pub fn validate(&self) -> Result<()> {
        let ok = self.soc_min <= self.soc
            && self.soc <= self.soc_max
            && self.p_min <= 0.0
            && 0.0 <= self.p_max
            && self.efficiency > 0.0
            && self.efficiency <= 1.0
            && self.recovery_hours > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfiguration(format!("inconsistent battery parameters {self:?}")))
        }
    }

    /// Power that would bring SOC to mid range in `recovery_hours`.
    pub fn reference_power(&self) -> f64 {
        let mid = 0.5 * (self.soc_min + self.soc_max);
        ((mid - self.soc) / self.recovery_hours).clamp(self.p_min, self.p_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DerKind {
    Battery(Battery),
    /// Available power comes from the PV profile of this device.
    Pv,
}

/// One controllable device and its local controller settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Der {
    pub label: String,
    /// Feeder node index (1-based, 0 is the slack bus).
    pub node: usize,
    pub kind: DerKind,
    /// Apparent-power rating, MVA.
    pub s_max: f64,
    pub weights: CostWeights,
    /// Step sizes for `(x_p, x_q)`.
    pub alpha: [f64; 2],
}

impl Der {
    pub fn is_battery(&self) -> bool {
        matches!(self.kind, DerKind::Battery(_))
    }

    pub fn battery(&self) -> Option<&Battery> {
        match &self.kind {
            DerKind::Battery(b) => Some(b),
            DerKind::Pv => None,
        }
    }

    /// Sign mapping `x_p` to net injection.
    pub fn p_sign(&self) -> f64 {
        if self.is_battery() {
            -1.0
        } else {
            1.0
        }
    }
}

/// `[X̲, X̄]` intersecting the power box with one-step energy headroom.
///
/// Discharge headroom is scaled by the efficiency so that the SOC update
/// below stays within bounds.
pub fn battery_power_bounds(battery: &Battery, dt_hours: f64) -> Result<(f64, f64)> {
    if !(dt_hours > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt_hours} h")));
    }
    let lower = battery.p_min.max(battery.efficiency * (battery.soc_min - battery.soc) / dt_hours);
    let upper = battery.p_max.min((battery.soc_max - battery.soc) / dt_hours);
    if lower > upper {
        return Err(Error::Internal(format!("empty battery power interval [{lower}, {upper}]")));
    }
    Ok((lower, upper))
}

/// Charging stores `η x Δt`; discharging removes `x Δt / η`.
pub fn soc_update(battery: &Battery, x_p: f64, dt_hours: f64) -> f64 {
    let delta = if x_p >= 0.0 { battery.efficiency * x_p * dt_hours } else { x_p * dt_hours / battery.efficiency };
    let soc = battery.soc + delta;
    if soc < battery.soc_min || soc > battery.soc_max {
        log::warn!("SOC {soc} MWh outside [{}, {}], clamped", battery.soc_min, battery.soc_max);
    }
    soc.clamp(battery.soc_min, battery.soc_max)
}

/// `(2c_p p + 2c_p•(p − p•), 2c_q q)`.
pub fn der_local_gradient(weights: &CostWeights, pq: [f64; 2], p_ref: f64) -> [f64; 2] {
    [2.0 * weights.c_p * pq[0] + 2.0 * weights.c_p_ref * (pq[0] - p_ref), 2.0 * weights.c_q * pq[1]]
}

/// Per-node band `[lower, upper]` in p.u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl VoltageLimits {
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::InvalidConfiguration(format!("voltage band [{lower}, {upper}] is empty")));
        }
        Ok(VoltageLimits { lower: vec![lower; n], upper: vec![upper; n] })
    }

    /// Band shrunk by `margin` on both sides.
    pub fn tightened(&self, margin: f64) -> Result<Self> {
        let lower: Vec<f64> = self.lower.iter().map(|l| l + margin).collect();
        let upper: Vec<f64> = self.upper.iter().map(|u| u - margin).collect();
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidConfiguration(format!("voltage margin {margin} empties the band")));
        }
        Ok(VoltageLimits { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

/// `(v − V̄, V̲ − v)`; positive entries are violations.
pub fn voltage_constraints(v: &[f64], limits: &VoltageLimits) -> Vec<f64> {
    debug_assert_eq!(v.len(), limits.len());
    v.iter().zip(&limits.upper).map(|(v, u)| v - u).chain(v.iter().zip(&limits.lower).map(|(v, l)| l - v)).collect()
}

/// The one scalar a coordinator broadcasts per step.
pub fn coordinator_broadcast_scalar(
    f0_plus: f64,
    f0_minus: f64,
    g_plus: &[f64],
    g_minus: &[f64],
    lambda: &[f64],
    epsilon: f64,
) -> Result<f64> {
    crate::zograd::lagrangian_probe_scalar(f0_plus, f0_minus, g_plus, g_minus, lambda, epsilon)
}

/// Local projected step of one device from the broadcast scalar.
pub fn der_local_update(
    pq: [f64; 2],
    xi: [f64; 2],
    s: f64,
    local_gradient: [f64; 2],
    alpha: [f64; 2],
    p_reg: f64,
    set: &BoxDiscSet,
) -> Result<[f64; 2]> {
    let raw = [
        primal_descent(pq[0], local_gradient[0] + xi[0] * s, alpha[0], p_reg),
        primal_descent(pq[1], local_gradient[1] + xi[1] * s, alpha[1], p_reg),
    ];
    project_box_disc(raw, set)
}

pub fn dual_update_voltage(lambda: &[f64], g: &[f64], alpha_dual: &[f64], d: f64, set: &DualBox) -> Vec<f64> {
    dual_step(lambda, g, alpha_dual, d, set)
}

/// Piecewise-linear time series with flat extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Series {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidArgument("series needs equally many (≥ 1) times and values".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("series times must be strictly increasing".into()));
        }
        Ok(Series { times, values })
    }

    pub fn constant(value: f64) -> Self {
        Series { times: vec![0.0], values: vec![value] }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn segment(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn linear(&self, t: f64) -> f64 {
        let i = self.segment(t);
        if t <= self.times[0] || i + 1 == self.times.len() {
            return if t <= self.times[0] { self.values[0] } else { self.values[i] };
        }
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }

    pub fn hold(&self, t: f64) -> f64 {
        if t < self.times[0] {
            self.values[0]
        } else {
            self.values[self.segment(t)]
        }
    }
}

/// Load at one node: MW and MVAr consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLoad {
    pub node: usize,
    pub p: Series,
    pub q: Series,
}

/// Everything outside the controller's reach, indexed by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exogenous {
    pub t_start: f64,
    /// Seconds per step.
    pub dt: f64,
    pub s_base_mva: f64,
    pub n_nodes: usize,
    pub loads: Vec<NodeLoad>,
    /// Available PV power (MW) per device; `None` for batteries.
    pub pv_available: Vec<Option<Series>>,
    /// Feeder-head reference in MW, held between breakpoints.
    pub reference: Series,
}

impl Exogenous {
    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }

    /// Net injections of uncontrolled loads, p.u.
    pub fn base_injections(&self, k: usize) -> Vec<Complex64> {
        let t = self.time(k);
        let mut s = vec![Complex64::new(0.0, 0.0); self.n_nodes];
        for load in &self.loads {
            s[load.node - 1] -= Complex64::new(load.p.linear(t), load.q.linear(t)) / self.s_base_mva;
        }
        s
    }

    /// MW available to PV device `der` at step `k`, before the rating cap.
    pub fn pv_raw(&self, der: usize, k: usize) -> f64 {
        self.pv_available.get(der).and_then(Option::as_ref).map_or(0.0, |s| s.linear(self.time(k)).max(0.0))
    }

    pub fn reference_mw(&self, k: usize) -> f64 {
        self.reference.hold(self.time(k))
    }

    pub fn reference_pu(&self, k: usize) -> f64 {
        self.reference_mw(k) / self.s_base_mva
    }
}

/// Available PV power capped by the inverter rating.
pub fn pv_available(der: &Der, index: usize, exo: &Exogenous, k: usize) -> f64 {
    exo.pv_raw(index, k).min(der.s_max)
}

/// Local reference power `p•`: available PV power, or the SOC-restoring
/// battery power.
pub fn der_reference(der: &Der, index: usize, exo: &Exogenous, k: usize) -> f64 {
    match &der.kind {
        DerKind::Battery(b) => b.reference_power(),
        DerKind::Pv => pv_available(der, index, exo, k),
    }
}

/// Operating region of a device for the input applied at step `k`.
pub fn der_set(der: &Der, index: usize, exo: &Exogenous, k: usize) -> Result<BoxDiscSet> {
    let (p_min, p_max) = match &der.kind {
        DerKind::Battery(b) => battery_power_bounds(b, exo.dt / 3600.0)?,
        DerKind::Pv => (0.0, pv_available(der, index, exo, k)),
    };
    BoxDiscSet::new(p_min, p_max, der.s_max)
}

/// Feeder OPF: track the head power reference and keep voltages in band.
///
/// Outputs are `(v_1, …, v_n, P0)` in p.u.; inputs are `(x_p, x_q)` per
/// device in MW/MVAr.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    ders: Vec<Der>,
    exo: Arc<Exogenous>,
    limits: VoltageLimits,
    p: f64,
    d: f64,
    dual_cap: f64,
    model: Option<DMatrix<f64>>,
    tracking_weight: f64,
}

impl OpfProblem {
    pub fn new(
        ders: Vec<Der>,
        exo: Arc<Exogenous>,
        limits: VoltageLimits,
        regularization: (f64, f64),
        dual_cap: f64,
    ) -> Result<Self> {
        let (p, d) = regularization;
        if !(p >= 0.0 && d >= 0.0) {
            return Err(Error::InvalidConfiguration(format!("regularization must be non-negative, got ({p}, {d})")));
        }
        if limits.len() != exo.n_nodes {
            return Err(Error::InvalidConfiguration(format!(
                "{} voltage limits for {} nodes",
                limits.len(),
                exo.n_nodes
            )));
        }
        if exo.pv_available.len() != ders.len() {
            return Err(Error::InvalidConfiguration("one PV profile slot per device is required".into()));
        }
        for der in &ders {
            if der.node == 0 || der.node > exo.n_nodes {
                return Err(Error::InvalidConfiguration(format!("device {} at invalid node {}", der.label, der.node)));
            }
            if !(der.s_max >= 0.0) || der.alpha.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::InvalidConfiguration(format!("device {} has invalid rating or steps", der.label)));
            }
            if let Some(b) = der.battery() {
                b.validate()?;
            }
        }
        Ok(OpfProblem { ders, exo, limits, p, d, dual_cap, model: None, tracking_weight: 1.0 })
    }

    /// Scales the head-power tracking cost `(P0 − P0•)²`.
    pub fn with_tracking_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidConfiguration(format!("tracking weight must be non-negative, got {weight}")));
        }
        self.tracking_weight = weight;
        Ok(self)
    }

    pub fn tracking_weight(&self) -> f64 {
        self.tracking_weight
    }

    pub fn ders(&self) -> &[Der] {
        &self.ders
    }

    pub fn exogenous(&self) -> &Arc<Exogenous> {
        &self.exo
    }

    pub fn limits(&self) -> &VoltageLimits {
        &self.limits
    }

    pub fn dual_cap(&self) -> f64 {
        self.dual_cap
    }

    /// Fix `∂y/∂x` for model-based use.
    pub fn set_model(&mut self, model: Option<DMatrix<f64>>) {
        self.model = model;
    }

    pub fn socs(&self) -> Vec<f64> {
        self.ders.iter().filter_map(|d| d.battery().map(|b| b.soc)).collect()
    }

    pub fn set_socs(&mut self, socs: &[f64]) {
        let mut it = socs.iter();
        for der in &mut self.ders {
            if let DerKind::Battery(b) = &mut der.kind {
                b.soc = *it.next().expect("one SOC per battery");
            }
        }
    }

    /// Charges batteries with the applied input.
    pub fn advance_soc(&mut self, x: &[f64]) {
        let dt_h = self.exo.dt / 3600.0;
        for (der, pq) in self.ders.iter_mut().zip(x.chunks_exact(2)) {
            if let DerKind::Battery(b) = &mut der.kind {
                b.soc = soc_update(b, pq[0], dt_h);
            }
        }
    }

    /// Setpoints with no control action: PV at available power, batteries idle.
    pub fn uncontrolled_input(&self, k: usize) -> Vec<f64> {
        self.ders
            .iter()
            .enumerate()
            .flat_map(|(i, der)| match der.kind {
                DerKind::Battery(_) => [0.0, 0.0],
                DerKind::Pv => [pv_available(der, i, &self.exo, k), 0.0],
            })
            .collect()
    }

    /// Step sizes from the per-device settings and one dual step for all
    /// voltage constraints.
    pub fn step_sizes(&self, alpha_voltage: f64, epsilon: f64) -> Result<StepSizes> {
        StepSizes::new(
            self.ders.iter().flat_map(|d| d.alpha).collect(),
            vec![alpha_voltage; self.dual_dim()],
            epsilon,
            engine::ProjectMode::EveryStep,
        )
    }

    pub fn plant(&self, feeder: Arc<crate::plant::FeederModel>) -> Result<FeederPlant> {
        let terminals =
            self.ders.iter().map(|d| crate::plant::DeviceTerminal { node: d.node, p_sign: d.p_sign() }).collect();
        let exo = Arc::clone(&self.exo);
        FeederPlant::new(feeder, terminals, Arc::new(move |k| exo.base_injections(k)))
    }
}

impl TimeVaryingProblem for OpfProblem {
    fn primal_dim(&self) -> usize {
        2 * self.ders.len()
    }

    fn dual_dim(&self) -> usize {
        2 * self.exo.n_nodes
    }

    fn regularization(&self) -> (f64, f64) {
        (self.p, self.d)
    }

    fn local_cost(&self, k: usize, x: &[f64]) -> f64 {
        self.ders
            .iter()
            .enumerate()
            .zip(x.chunks_exact(2))
            .map(|((i, der), pq)| der.weights.cost([pq[0], pq[1]], der_reference(der, i, &self.exo, k)))
            .sum()
    }

    fn local_gradient(&self, k: usize, x: &[f64]) -> Vec<f64> {
        self.ders
            .iter()
            .enumerate()
            .zip(x.chunks_exact(2))
            .flat_map(|((i, der), pq)| {
                der_local_gradient(&der.weights, [pq[0], pq[1]], der_reference(der, i, &self.exo, k))
            })
            .collect()
    }

    fn output_cost(&self, k: usize, y: &[f64]) -> f64 {
        let p0 = y[self.exo.n_nodes];
        self.tracking_weight * (p0 - self.exo.reference_pu(k)).powi(2)
    }

    fn output_cost_gradient(&self, k: usize, y: &[f64]) -> Option<Vec<f64>> {
        let n = self.exo.n_nodes;
        let mut g = vec![0.0; n + 1];
        g[n] = 2.0 * self.tracking_weight * (y[n] - self.exo.reference_pu(k));
        Some(g)
    }

    fn constraints(&self, _k: usize, y: &[f64]) -> Vec<f64> {
        voltage_constraints(&y[..self.exo.n_nodes], &self.limits)
    }

    fn constraint_jacobian(&self, _k: usize, _y: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.exo.n_nodes;
        let mut j = DMatrix::zeros(2 * n, n + 1);
        for i in 0..n {
            j[(i, i)] = 1.0;
            j[(n + i, i)] = -1.0;
        }
        Some(j)
    }

    fn model_matrix(&self, _k: usize) -> Option<DMatrix<f64>> {
        self.model.clone()
    }

    fn primal_set(&self, k: usize) -> Result<ProductSet> {
        let blocks = self
            .ders
            .iter()
            .enumerate()
            .map(|(i, der)| der_set(der, i, &self.exo, k).map(PrimalSet::BoxDisc))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProductSet::new(blocks))
    }

    fn dual_set(&self, _k: usize) -> Result<DualBox> {
        DualBox::uniform(self.dual_dim(), self.dual_cap)
    }
}

/// Everything observed and decided during one control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfStepRecord {
    pub k: usize,
    /// Seconds.
    pub t: f64,
    /// Input applied during the step.
    pub x: Vec<f64>,
    /// Battery SOC while `x` was applied.
    pub soc: Vec<f64>,
    /// Noiseless output at `x`.
    pub y: Vec<f64>,
    /// Multipliers after the step.
    pub lambda: Vec<f64>,
    /// Broadcast scalar.
    pub s: f64,
}

/// Settings shared by the monolithic and the distributed loops.
#[derive(Debug, Clone)]
pub struct ControlLoop {
    pub signal: ExplorationSignal,
    pub sizes: StepSizes,
    pub probe: ProbeOptions,
}

impl ControlLoop {
    /// One step on the stacked decision vector.
    ///
    /// Batteries are charged with the applied input before projecting, so
    /// the new iterate lands in the set in force when it is applied.
    pub fn monolithic_step(
        &self,
        problem: &mut OpfProblem,
        plant: &FeederPlant,
        state: &PrimalDualState,
    ) -> Result<(PrimalDualState, OpfStepRecord)> {
        let k = state.k;
        let exploration = explore(state, plant, &self.signal, self.sizes.epsilon, &self.probe)?;
        let s = engine::probe_scalar(problem, k, &state.lambda, &exploration, self.sizes.epsilon)?;
        let gradient = estimate_gradient(problem, state, &exploration, self.sizes.epsilon)?;
        let soc = problem.socs();
        problem.advance_soc(&state.x);
        let set = problem.primal_set(k + 1)?;
        let (next, _) =
            apply_update(state, problem, &gradient, &exploration.y_nominal, &self.sizes, &set, self.signal.dt())?;
        let y = applied_output(&exploration, plant, state)?;
        let record =
            OpfStepRecord { k, t: problem.exo.time(k), x: state.x.clone(), soc, y, lambda: next.lambda.clone(), s };
        Ok((next, record))
    }

    /// Runs `steps` monolithic steps, handing every record to `sink`.
    pub fn run_monolithic(
        &self,
        problem: &mut OpfProblem,
        plant: &FeederPlant,
        initial: PrimalDualState,
        steps: usize,
        mut sink: impl FnMut(&OpfStepRecord) -> Result<()>,
    ) -> Result<PrimalDualState> {
        let mut state = initial;
        for _ in 0..steps {
            let (next, record) = self.monolithic_step(problem, plant, &state)?;
            sink(&record)?;
            state = next;
        }
        Ok(state)
    }

    /// Runs `steps` gather-and-broadcast rounds with one thread per device.
    ///
    /// Each round: agents send their probe points, the coordinator measures
    /// the feeder and broadcasts the scalar `s`, agents update locally. The
    /// coordinator keeps the multipliers.
    pub fn run_distributed(
        &self,
        problem: &mut OpfProblem,
        plant: &FeederPlant,
        initial: PrimalDualState,
        steps: usize,
        mut sink: impl FnMut(&OpfStepRecord) -> Result<()>,
    ) -> Result<PrimalDualState> {
        let n_der = problem.ders.len();
        if initial.x.len() != 2 * n_der || initial.lambda.len() != problem.dual_dim() {
            return Err(Error::InvalidArgument("initial state does not match the problem".into()));
        }
        self.sizes.validate()?;
        let (_, d) = problem.regularization();
        let dual_set = problem.dual_set(initial.k)?;

        std::thread::scope(|scope| -> Result<PrimalDualState> {
            let (reply_tx, reply_rx) = mpsc::channel::<(usize, Result<AgentReply>)>();
            let mut commands = Vec::with_capacity(n_der);
            for (i, der) in problem.ders.iter().enumerate() {
                let (tx, rx) = mpsc::channel::<AgentCommand>();
                let agent = Agent {
                    index: i,
                    der: der.clone(),
                    exo: Arc::clone(&problem.exo),
                    signal: self.signal.clone(),
                    epsilon: self.sizes.epsilon,
                    p_reg: problem.p,
                    pq: [initial.x[2 * i], initial.x[2 * i + 1]],
                };
                let reply = reply_tx.clone();
                scope.spawn(move || agent.serve(rx, reply));
                commands.push(tx);
            }
            drop(reply_tx);

            let gather = |expect: usize| -> Result<Vec<AgentReply>> {
                let mut slots: Vec<Option<AgentReply>> = vec![None; expect];
                for _ in 0..expect {
                    let (i, reply) = reply_rx.recv().map_err(|_| Error::Internal("device agent hung up".into()))?;
                    slots[i] = Some(reply?);
                }
                Ok(slots.into_iter().map(|s| s.expect("every agent replies once")).collect())
            };
            let send = |i: usize, cmd: AgentCommand| -> Result<()> {
                commands[i].send(cmd).map_err(|_| Error::Internal("device agent hung up".into()))
            };

            let mut state = initial;
            for _ in 0..steps {
                let k = state.k;
                for i in 0..n_der {
                    send(i, AgentCommand::Explore { k })?;
                }
                let probes = gather(n_der)?;
                let mut x = Vec::with_capacity(2 * n_der);
                let mut x_plus = Vec::with_capacity(2 * n_der);
                let mut x_minus = Vec::with_capacity(2 * n_der);
                for reply in &probes {
                    let AgentReply::Probe { nominal, plus, minus } = reply else {
                        return Err(Error::Internal("expected probe reply".into()));
                    };
                    x.extend(nominal);
                    x_plus.extend(plus);
                    x_minus.extend(minus);
                }
                debug_assert_eq!(x, state.x);

                let exploration = measure_probes(plant, &self.probe, k, &x, &x_plus, &x_minus)?;
                let s = engine::probe_scalar(problem, k, &state.lambda, &exploration, self.sizes.epsilon)?;
                let g = problem.constraints(k, &exploration.y_nominal);
                let lambda = dual_update_voltage(&state.lambda, &g, &self.sizes.alpha_dual, d, &dual_set);

                let soc = problem.socs();
                for (i, alpha) in self.sizes.alpha.chunks_exact(2).enumerate() {
                    send(i, AgentCommand::Broadcast { k, s, alpha: [alpha[0], alpha[1]] })?;
                }
                let updates = gather(n_der)?;
                let mut next_x = Vec::with_capacity(2 * n_der);
                let mut next_soc = Vec::new();
                for reply in updates {
                    let AgentReply::Updated { pq, soc } = reply else {
                        return Err(Error::Internal("expected update reply".into()));
                    };
                    next_x.extend(pq);
                    next_soc.extend(soc);
                }
                problem.set_socs(&next_soc);

                let y = applied_output(&exploration, plant, &state)?;
                sink(&OpfStepRecord { k, t: problem.exo.time(k), x, soc, y, lambda: lambda.clone(), s })?;
                state = PrimalDualState { x: next_x, lambda, k: k + 1, t: (k + 1) as f64 * self.signal.dt() };
            }
            Ok(state)
        })
    }
}

fn applied_output(exploration: &engine::Exploration, plant: &FeederPlant, state: &PrimalDualState) -> Result<Vec<f64>> {
    match &exploration.y_applied {
        Some(y) => Ok(y.clone()),
        None => {
            plant.evaluate(&state.x, state.k).map_err(|e| Error::StepAborted { step: state.k, source: Box::new(e) })
        }
    }
}

/// Coordinator side of the exploration phase, on agent-provided points.
fn measure_probes(
    plant: &FeederPlant,
    probe: &ProbeOptions,
    k: usize,
    x: &[f64],
    x_plus: &[f64],
    x_minus: &[f64],
) -> Result<engine::Exploration> {
    use crate::plant::measure;
    let evaluate = |x: &[f64]| plant.evaluate(x, k).map_err(|e| Error::StepAborted { step: k, source: Box::new(e) });
    let y_plus = measure(&evaluate(x_plus)?, &probe.noise, k, engine::SLOT_PLUS);
    let y_minus = measure(&evaluate(x_minus)?, &probe.noise, k, engine::SLOT_MINUS);
    let (y_nominal, y_applied) = match probe.third {
        engine::ThirdMeasurement::Independent => {
            let y = evaluate(x)?;
            (measure(&y, &probe.noise, k, engine::SLOT_NOMINAL), Some(y))
        }
        engine::ThirdMeasurement::Average => (y_plus.iter().zip(&y_minus).map(|(a, b)| 0.5 * (a + b)).collect(), None),
    };
    // the coordinator never sees ξ; the scalar path does not need it
    Ok(engine::Exploration { xi: Vec::new(), y_plus, y_minus, y_nominal, y_applied })
}

enum AgentCommand {
    Explore { k: usize },
    Broadcast { k: usize, s: f64, alpha: [f64; 2] },
}

#[derive(Clone)]
enum AgentReply {
    Probe { nominal: [f64; 2], plus: [f64; 2], minus: [f64; 2] },
    Updated { pq: [f64; 2], soc: Option<f64> },
}

/// Local controller of one device; sees only its own data and `s`.
struct Agent {
    index: usize,
    der: Der,
    exo: Arc<Exogenous>,
    signal: ExplorationSignal,
    epsilon: f64,
    p_reg: f64,
    pq: [f64; 2],
}

impl Agent {
    fn probe(&self, k: usize) -> [f64; 2] {
        let t = k as f64 * self.signal.dt();
        [self.signal.sample_channel(2 * self.index, t), self.signal.sample_channel(2 * self.index + 1, t)]
    }

    fn serve(mut self, commands: mpsc::Receiver<AgentCommand>, replies: mpsc::Sender<(usize, Result<AgentReply>)>) {
        for cmd in commands {
            let reply = match cmd {
                AgentCommand::Explore { k } => {
                    let xi = self.probe(k);
                    let (e, x) = (self.epsilon, self.pq);
                    Ok(AgentReply::Probe {
                        nominal: x,
                        plus: [x[0] + e * xi[0], x[1] + e * xi[1]],
                        minus: [x[0] - e * xi[0], x[1] - e * xi[1]],
                    })
                }
                AgentCommand::Broadcast { k, s, alpha } => self.update(k, s, alpha),
            };
            if replies.send((self.index, reply)).is_err() {
                return;
            }
        }
    }

    fn update(&mut self, k: usize, s: f64, alpha: [f64; 2]) -> Result<AgentReply> {
        let xi = self.probe(k);
        let gradient =
            der_local_gradient(&self.der.weights, self.pq, der_reference(&self.der, self.index, &self.exo, k));
        let dt_h = self.exo.dt / 3600.0;
        let soc = if let DerKind::Battery(b) = &mut self.der.kind {
            b.soc = soc_update(b, self.pq[0], dt_h);
            Some(b.soc)
        } else {
            None
        };
        let set = der_set(&self.der, self.index, &self.exo, k + 1)?;
        self.pq = der_local_update(self.pq, xi, s, gradient, alpha, self.p_reg, &set)?;
        Ok(AgentReply::Updated { pq: self.pq, soc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn battery(soc: f64, efficiency: f64) -> Battery {
        Battery { soc, soc_min: 0.0, soc_max: 30.0, p_min: -10.0, p_max: 10.0, efficiency, recovery_hours: 10.0 }
    }

    const SECOND: f64 = 1.0 / 3600.0;

    #[test]
    fn battery_bounds_examples() {
        let (_, hi) = battery_power_bounds(&battery(29.999, 1.0), SECOND).unwrap();
        assert_abs_diff_eq!(hi, 3.6, epsilon = 1e-9);
        assert_eq!(battery_power_bounds(&battery(15.0, 0.9), SECOND).unwrap(), (-10.0, 10.0));
        let (lo, _) = battery_power_bounds(&battery(0.0, 0.9), SECOND).unwrap();
        assert_eq!(lo, 0.0);
        assert!(battery_power_bounds(&battery(15.0, 0.9), 0.0).is_err());
    }

    #[test]
    fn soc_examples() {
        assert_abs_diff_eq!(soc_update(&battery(15.0, 1.0), 3.6, SECOND), 15.001, epsilon = 1e-12);
        assert_eq!(soc_update(&battery(15.0, 0.9), 0.0, SECOND), 15.0);
        assert_abs_diff_eq!(soc_update(&battery(15.0, 0.9), -9.0, SECOND), 15.0 - 10.0 / 3600.0, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_loses_energy() {
        let mut b = battery(15.0, 0.9);
        for _ in 0..100 {
            b.soc = soc_update(&b, 5.0, SECOND);
        }
        for _ in 0..100 {
            b.soc = soc_update(&b, -5.0, SECOND);
        }
        assert!(b.soc < 15.0);
    }

    #[test]
    fn energy_headroom_keeps_soc_in_bounds() {
        for &soc in &[0.0, 1e-4, 0.002, 29.998, 29.9999, 30.0] {
            let b = battery(soc, 0.9);
            let (lo, hi) = battery_power_bounds(&b, SECOND).unwrap();
            for x in [lo, hi] {
                let next = b.soc + if x >= 0.0 { 0.9 * x * SECOND } else { x * SECOND / 0.9 };
                assert!((-1e-12..=30.0 + 1e-12).contains(&next), "soc {soc}, x {x}, next {next}");
            }
        }
    }

    #[test]
    fn local_gradient_examples() {
        let g = der_local_gradient(&CostWeights::pv(), [0.5, 0.0], 1.0);
        assert_abs_diff_eq!(g[0], -9.9e-4, epsilon = 1e-15);
        assert_eq!(g[1], 0.0);
        let w = CostWeights { c_p: 0.0, c_q: 1.0, c_p_ref: 1.0 };
        assert_eq!(der_local_gradient(&w, [0.7, 0.0], 0.7), [0.0, 0.0]);
        let zero = CostWeights { c_p: 0.0, c_q: 0.0, c_p_ref: 0.0 };
        assert_eq!(der_local_gradient(&zero, [0.3, 0.2], 1.0), [0.0, 0.0]);
    }

    #[test]
    fn voltage_constraint_examples() {
        let lim = VoltageLimits::uniform(1, 0.96, 1.04).unwrap();
        let g = voltage_constraints(&[0.95], &lim);
        assert_abs_diff_eq!(g[0], -0.09, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.01, epsilon = 1e-12);
        let g = voltage_constraints(&[1.0], &lim);
        assert_abs_diff_eq!(g[0], -0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -0.04, epsilon = 1e-12);
        let g = voltage_constraints(&[1.04], &lim);
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -0.08, epsilon = 1e-12);
    }

    #[test]
    fn broadcast_scalar_examples() {
        assert_abs_diff_eq!(
            coordinator_broadcast_scalar(1.21, 0.81, &[], &[], &[], 0.1).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert_eq!(coordinator_broadcast_scalar(0.5, 0.5, &[0.1], &[0.1], &[3.0], 0.1).unwrap(), 0.0);
        assert_abs_diff_eq!(
            coordinator_broadcast_scalar(0.0, 0.0, &[0.01], &[0.0], &[2.0], 0.05).unwrap(),
            0.2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn local_update_examples() {
        let set = BoxDiscSet::new(-10.0, 10.0, 12.0).unwrap();
        let pq = der_local_update([0.0, 0.0], [1.0, 0.0], 2.0, [0.0, 0.0], [0.1, 0.1], 0.0, &set).unwrap();
        assert_abs_diff_eq!(pq[0], -0.2, epsilon = 1e-15);
        assert_eq!(pq[1], 0.0);

        let night = BoxDiscSet::new(0.0, 0.0, 0.2).unwrap();
        for s in [-5.0, 0.0, 5.0] {
            let pq = der_local_update([0.0, 0.05], [1.0, 1.0], s, [0.0, 0.0], [2.0, 2.0], 0.0, &night).unwrap();
            assert_eq!(pq[0], 0.0);
        }

        let pq = der_local_update([0.3, -0.4], [1.0, -1.0], 0.0, [0.0, 0.0], [2.0, 2.0], 0.0, &set).unwrap();
        assert_eq!(pq, [0.3, -0.4]);
    }

    #[test]
    fn dual_update_examples() {
        let cap = DualBox::uniform(1, 100.0).unwrap();
        assert_abs_diff_eq!(dual_update_voltage(&[0.0], &[0.01], &[10.0], 1e-4, &cap)[0], 0.1, epsilon = 1e-15);
        assert_eq!(dual_update_voltage(&[0.0], &[-0.02], &[10.0], 1e-4, &cap), vec![0.0]);
        assert_abs_diff_eq!(dual_update_voltage(&[1.0], &[0.0], &[10.0], 0.01, &cap)[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn series_interpolation() {
        let s = Series::new(vec![0.0, 10.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(s.linear(-5.0), 1.0);
        assert_eq!(s.linear(5.0), 2.0);
        assert_eq!(s.linear(20.0), 3.0);
        assert_eq!(s.hold(9.9), 1.0);
        assert_eq!(s.hold(10.0), 3.0);
        assert!(Series::new(vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
    }
}
