//! Scenario files, data ingestion, closed-loop runs, metrics and sweeps.
//!
//! A scenario is one TOML file pointing at CSV tables for the feeder, the
//! device fleet and the load/PV profiles. Relative paths resolve against
//! the directory of the scenario file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    saddle_point_oracle, OracleOptions, PrimalDualState, ProbeOptions, ThirdMeasurement, TimeVaryingProblem,
};
use crate::error::{Error, Result};
use crate::opf::{
    battery_power_bounds, defaults, pv_available, Battery, ControlLoop, CostWeights, Der, DerKind, Exogenous, NodeLoad,
    OpfProblem, OpfStepRecord, Series, VoltageLimits,
};
use crate::plant::{numerical_jacobian, FeederModel, LinearPlant, NoiseModel, Plant};
use crate::signals::{assign_frequencies, make_sinusoid_bank, ExplorationSignal, FrequencyMode};

/// Input perturbation used to linearize the feeder, MW or MVAr.
pub const LINEARIZATION_STEP: f64 = 1e-2;

/// Probe radius in MW for a given base: `0.001·√2·S_base`.
pub fn default_epsilon(s_base_mva: f64) -> f64 {
    0.001 * std::f64::consts::SQRT_2 * s_base_mva
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Where `run` writes the trace and the metrics.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub time: TimeGrid,
    pub feeder: FeederConfig,
    pub fleet: FleetConfig,
    pub profiles: ProfilesConfig,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub voltage: VoltageConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default = "one")]
    pub dt: f64,
}

fn one() -> f64 {
    1.0
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        ((self.t_end - self.t_start) / self.dt + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederConfig {
    /// `from,to,r_pu,x_pu` table.
    pub file: PathBuf,
    pub slack: String,
    #[serde(default = "default_s_base")]
    pub s_base_mva: f64,
    #[serde(default = "one")]
    pub slack_voltage: f64,
}

fn default_s_base() -> f64 {
    defaults::S_BASE_MVA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    /// Device table; rows are appended after any inline `devices`.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default = "default_recovery")]
    pub soc_recovery_hours: f64,
}

fn default_recovery() -> f64 {
    defaults::SOC_RECOVERY_HOURS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Battery,
    Pv,
}

/// One fleet row. Blank cost weights and step sizes take the defaults of
/// the device kind when the scenario is loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub node: String,
    pub kind: DeviceKind,
    #[serde(default)]
    pub label: Option<String>,
    pub s_max_mva: f64,
    #[serde(default)]
    pub p_min_mw: Option<f64>,
    #[serde(default)]
    pub p_max_mw: Option<f64>,
    #[serde(default)]
    pub soc_min_mwh: Option<f64>,
    #[serde(default)]
    pub soc_max_mwh: Option<f64>,
    #[serde(default)]
    pub soc_init_mwh: Option<f64>,
    #[serde(default)]
    pub efficiency: Option<f64>,
    #[serde(default)]
    pub c_p: Option<f64>,
    #[serde(default)]
    pub c_q: Option<f64>,
    #[serde(default)]
    pub c_p_ref: Option<f64>,
    #[serde(default)]
    pub alpha_p: Option<f64>,
    #[serde(default)]
    pub alpha_q: Option<f64>,
}

impl DeviceSpec {
    fn fill_defaults(&mut self) {
        let (weights, alpha) = match self.kind {
            DeviceKind::Pv => (CostWeights::pv(), defaults::PV_ALPHA),
            DeviceKind::Battery => (CostWeights::battery(), defaults::BATTERY_ALPHA),
        };
        self.c_p.get_or_insert(weights.c_p);
        self.c_q.get_or_insert(weights.c_q);
        self.c_p_ref.get_or_insert(weights.c_p_ref);
        self.alpha_p.get_or_insert(alpha);
        self.alpha_q.get_or_insert(alpha);
        if self.kind == DeviceKind::Battery {
            self.efficiency.get_or_insert(defaults::BATTERY_EFFICIENCY);
        }
    }

    fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| match self.kind {
            DeviceKind::Battery => format!("bat{}", self.node),
            DeviceKind::Pv => format!("pv{}", self.node),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesConfig {
    /// `t_seconds,node,p_MW,q_MVAr` table, linearly interpolated.
    pub loads: PathBuf,
    /// `t_seconds,node,p_available_MW` table; PV devices without rows
    /// have no available power.
    #[serde(default)]
    pub pv: Option<PathBuf>,
}

/// Head-power reference as `[t_seconds, MW]` breakpoints, held between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    /// Probe radius, MW. Defaults to `0.001·√2·S_base`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_primal_reg")]
    pub p: f64,
    #[serde(default = "default_dual_reg")]
    pub d: f64,
    #[serde(default = "default_dual_cap")]
    pub dual_cap: f64,
    #[serde(default = "default_alpha_voltage")]
    pub alpha_voltage: f64,
    #[serde(default = "one")]
    pub tracking_weight: f64,
    #[serde(default)]
    pub third_measurement: ThirdMeasurement,
    #[serde(default)]
    pub frequencies: FrequencyConfig,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Run the single-threaded stepper instead of one thread per device.
    #[serde(default)]
    pub monolithic: bool,
}

fn default_primal_reg() -> f64 {
    defaults::PRIMAL_REG
}
fn default_dual_reg() -> f64 {
    defaults::DUAL_REG
}
fn default_dual_cap() -> f64 {
    100.0
}
fn default_alpha_voltage() -> f64 {
    defaults::VOLTAGE_ALPHA
}
fn default_amplitude() -> f64 {
    std::f64::consts::SQRT_2
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            epsilon: None,
            p: default_primal_reg(),
            d: default_dual_reg(),
            dual_cap: default_dual_cap(),
            alpha_voltage: default_alpha_voltage(),
            tracking_weight: 1.0,
            third_measurement: ThirdMeasurement::default(),
            frequencies: FrequencyConfig::default(),
            amplitude: default_amplitude(),
            monolithic: false,
        }
    }
}

/// Two channels per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FrequencyConfig {
    Band { f_min: f64, f_max: f64 },
    IntegerCycles { period: f64, multiples: Vec<u32> },
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        FrequencyConfig::Band { f_min: 1.0 / 26.0, f_max: 1.0 / 7.1 }
    }
}

impl FrequencyConfig {
    fn mode(&self) -> FrequencyMode {
        match self {
            FrequencyConfig::Band { f_min, f_max } => FrequencyMode::Band { f_min: *f_min, f_max: *f_max },
            FrequencyConfig::IntegerCycles { period, multiples } => {
                FrequencyMode::IntegerCycles { period: *period, multiples: multiples.clone() }
            }
        }
    }
}

/// Measurement noise, p.u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma() -> f64 {
    1e-3
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma: default_sigma(), seed: 0 }
    }
}

/// Evaluation band; the controller enforces it shrunk by `control_margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltageConfig {
    #[serde(default = "default_v_lower")]
    pub lower: f64,
    #[serde(default = "default_v_upper")]
    pub upper: f64,
    #[serde(default = "default_margin")]
    pub control_margin: f64,
}

fn default_v_lower() -> f64 {
    0.96
}
fn default_v_upper() -> f64 {
    1.04
}
fn default_margin() -> f64 {
    0.002
}

impl Default for VoltageConfig {
    fn default() -> Self {
        VoltageConfig { lower: default_v_lower(), upper: default_v_upper(), control_margin: default_margin() }
    }
}

impl ScenarioConfig {
    /// Parses a scenario from TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, origin: &Path) -> Result<Self> {
        let deserializer = toml::Deserializer::new(text);
        let mut config: ScenarioConfig = serde_path_to_error::deserialize(deserializer).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().message().to_string();
            Error::parse(origin, if path == "." { inner } else { format!("at `{path}`: {inner}") })
        })?;
        config.resolve_paths(base_dir);
        if let Some(file) = config.fleet.file.clone() {
            config.fleet.devices.extend(read_fleet(&file)?);
            config.fleet.file = None;
        }
        for device in &mut config.fleet.devices {
            device.fill_defaults();
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.output_dir);
        resolve(&mut self.feeder.file);
        resolve(&mut self.profiles.loads);
        if let Some(p) = &mut self.fleet.file {
            resolve(p);
        }
        if let Some(p) = &mut self.profiles.pv {
            resolve(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        let t = &self.time;
        if !(t.dt > 0.0 && t.dt.is_finite()) {
            return bad(format!("time.dt must be positive, got {}", t.dt));
        }
        if !(t.t_end > t.t_start) || t.steps() == 0 {
            return bad(format!("time grid [{}, {}] holds no step of {} s", t.t_start, t.t_end, t.dt));
        }
        if let Some(eps) = self.algorithm.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return bad(format!("algorithm.epsilon must be positive, got {eps}"));
            }
        }
        if !(self.feeder.s_base_mva > 0.0) {
            return bad(format!("feeder.s_base_mva must be positive, got {}", self.feeder.s_base_mva));
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return bad(format!("noise.sigma must be non-negative, got {}", self.noise.sigma));
        }
        let v = &self.voltage;
        if !(v.control_margin >= 0.0 && v.lower + v.control_margin < v.upper - v.control_margin) {
            return bad(format!("empty voltage band [{}, {}] with margin {}", v.lower, v.upper, v.control_margin));
        }
        if self.reference.points.is_empty() {
            return bad("reference.points needs at least one [t, MW] pair".into());
        }
        if !(self.algorithm.dual_cap >= 0.0) || !(self.algorithm.alpha_voltage > 0.0) {
            return bad("algorithm.dual_cap must be non-negative and alpha_voltage positive".into());
        }
        for path in [&self.feeder.file, &self.profiles.loads].into_iter().chain(self.profiles.pv.as_ref()) {
            if !path.is_file() {
                return bad(format!("file {} does not exist", path.display()));
            }
        }
        let mut labels = std::collections::HashSet::new();
        for device in &self.fleet.devices {
            if !labels.insert(device.label()) {
                return bad(format!("duplicate device label {}", device.label()));
            }
        }
        Ok(())
    }

    /// Probe radius in MW.
    pub fn epsilon(&self) -> f64 {
        self.algorithm.epsilon.unwrap_or_else(|| default_epsilon(self.feeder.s_base_mva))
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    ScenarioConfig::from_toml_str(&text, base, path)
}

fn read_fleet(path: &Path) -> Result<Vec<DeviceSpec>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    rdr.deserialize().map(|row| row.map_err(|e| Error::parse(path, e.to_string()))).collect()
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    rdr.deserialize().map(|row| row.map_err(|e| Error::parse(path, e.to_string()))).collect()
}

/// Per-node series, keyed by label in order of first appearance.
fn group_series<R>(
    path: &Path,
    rows: &[R],
    key: impl Fn(&R) -> (&str, f64),
    values: impl Fn(&R) -> Vec<f64>,
    width: usize,
) -> Result<Vec<(String, Vec<Series>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut data: HashMap<String, (Vec<f64>, Vec<Vec<f64>>)> = HashMap::new();
    for row in rows {
        let (node, t) = key(row);
        let entry = data.entry(node.to_string()).or_insert_with(|| {
            order.push(node.to_string());
            (Vec::new(), vec![Vec::new(); width])
        });
        entry.0.push(t);
        for (column, v) in entry.1.iter_mut().zip(values(row)) {
            column.push(v);
        }
    }
    order
        .into_iter()
        .map(|node| {
            let (times, columns) = data.remove(&node).expect("grouped node");
            let series = columns
                .into_iter()
                .map(|v| Series::new(times.clone(), v))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::parse(path, format!("node {node}: {e}")))?;
            Ok((node, series))
        })
        .collect()
}

/// A scenario with its tables loaded and its devices placed on the feeder.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub feeder: Arc<FeederModel>,
    pub ders: Vec<Der>,
    pub exogenous: Arc<Exogenous>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(load_scenario(path)?)
    }

    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let fc = &config.feeder;
        let feeder = Arc::new(FeederModel::from_csv(&fc.file, &fc.slack, fc.s_base_mva, fc.slack_voltage)?);
        let node_of = |label: &str, what: &str| -> Result<usize> {
            match feeder.node_index(label) {
                Some(0) => Err(Error::InvalidConfiguration(format!("{what} at the slack bus {label}"))),
                Some(i) => Ok(i),
                None => Err(Error::InvalidConfiguration(format!("{what} at unknown node {label}"))),
            }
        };

        let ders = config
            .fleet
            .devices
            .iter()
            .map(|spec| build_der(spec, node_of(&spec.node, "device")?, config.fleet.soc_recovery_hours))
            .collect::<Result<Vec<_>>>()?;

        #[derive(Deserialize)]
        struct LoadRow {
            t_seconds: f64,
            node: String,
            #[serde(rename = "p_MW")]
            p: f64,
            #[serde(rename = "q_MVAr")]
            q: f64,
        }
        let path = &config.profiles.loads;
        let rows: Vec<LoadRow> = read_csv_rows(path)?;
        let loads = group_series(path, &rows, |r| (&r.node, r.t_seconds), |r| vec![r.p, r.q], 2)?
            .into_iter()
            .map(|(node, mut series)| {
                let q = series.pop().expect("two columns");
                let p = series.pop().expect("two columns");
                Ok(NodeLoad { node: node_of(&node, "load")?, p, q })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut pv_by_node: HashMap<String, Series> = HashMap::new();
        if let Some(path) = &config.profiles.pv {
            #[derive(Deserialize)]
            struct PvRow {
                t_seconds: f64,
                node: String,
                #[serde(rename = "p_available_MW")]
                p: f64,
            }
            let rows: Vec<PvRow> = read_csv_rows(path)?;
            for (node, mut series) in group_series(path, &rows, |r| (&r.node, r.t_seconds), |r| vec![r.p], 1)? {
                node_of(&node, "PV profile")?;
                pv_by_node.insert(node, series.pop().expect("one column"));
            }
        }
        let pv_available = config
            .fleet
            .devices
            .iter()
            .map(|spec| match spec.kind {
                DeviceKind::Pv => Some(pv_by_node.get(&spec.node).cloned().unwrap_or_else(|| Series::constant(0.0))),
                DeviceKind::Battery => None,
            })
            .collect();

        let (times, values): (Vec<f64>, Vec<f64>) = config.reference.points.iter().map(|p| (p[0], p[1])).unzip();
        let reference =
            Series::new(times, values).map_err(|e| Error::InvalidConfiguration(format!("reference.points: {e}")))?;

        let exogenous = Arc::new(Exogenous {
            t_start: config.time.t_start,
            dt: config.time.dt,
            s_base_mva: fc.s_base_mva,
            n_nodes: feeder.n_nodes(),
            loads,
            pv_available,
            reference,
        });
        Ok(Scenario { config, feeder, ders, exogenous })
    }

    pub fn steps(&self) -> usize {
        self.config.time.steps()
    }

    /// Band used for evaluation (AVV, violation durations).
    pub fn evaluation_limits(&self) -> Result<VoltageLimits> {
        VoltageLimits::uniform(self.feeder.n_nodes(), self.config.voltage.lower, self.config.voltage.upper)
    }

    /// The OPF instance seen by the controller.
    pub fn problem(&self) -> Result<OpfProblem> {
        let a = &self.config.algorithm;
        let limits = self.evaluation_limits()?.tightened(self.config.voltage.control_margin)?;
        OpfProblem::new(self.ders.clone(), Arc::clone(&self.exogenous), limits, (a.p, a.d), a.dual_cap)?
            .with_tracking_weight(a.tracking_weight)
    }

    pub fn signal(&self) -> Result<ExplorationSignal> {
        let a = &self.config.algorithm;
        let n = 2 * self.ders.len();
        let frequencies = assign_frequencies(n, &a.frequencies.mode())?;
        make_sinusoid_bank(n, &frequencies, a.amplitude)?.with_dt(self.config.time.dt)
    }

    pub fn control_loop(&self, problem: &OpfProblem) -> Result<ControlLoop> {
        let sizes = problem.step_sizes(self.config.algorithm.alpha_voltage, self.config.epsilon())?;
        let noise = NoiseModel::new(self.config.noise.sigma, self.config.noise.seed)?;
        Ok(ControlLoop {
            signal: self.signal()?,
            sizes,
            probe: ProbeOptions { third: self.config.algorithm.third_measurement, noise },
        })
    }

    /// Uncontrolled setpoints projected onto the first operating region,
    /// with zero multipliers.
    pub fn initial_state(&self, problem: &OpfProblem) -> Result<PrimalDualState> {
        let x = problem.primal_set(0)?.project(&problem.uncontrolled_input(0))?;
        Ok(PrimalDualState::new(x, vec![0.0; problem.dual_dim()]))
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut s = self.clone();
        s.config.noise.sigma = sigma;
        s
    }
}

fn build_der(spec: &DeviceSpec, node: usize, recovery_hours: f64) -> Result<Der> {
    let missing = |field: &str| Error::InvalidConfiguration(format!("device {} lacks {field}", spec.label()));
    let weights = CostWeights {
        c_p: spec.c_p.ok_or_else(|| missing("c_p"))?,
        c_q: spec.c_q.ok_or_else(|| missing("c_q"))?,
        c_p_ref: spec.c_p_ref.ok_or_else(|| missing("c_p_ref"))?,
    };
    let kind = match spec.kind {
        DeviceKind::Pv => DerKind::Pv,
        DeviceKind::Battery => DerKind::Battery(Battery {
            soc: spec.soc_init_mwh.ok_or_else(|| missing("soc_init_mwh"))?,
            soc_min: spec.soc_min_mwh.ok_or_else(|| missing("soc_min_mwh"))?,
            soc_max: spec.soc_max_mwh.ok_or_else(|| missing("soc_max_mwh"))?,
            p_min: spec.p_min_mw.unwrap_or(-spec.s_max_mva),
            p_max: spec.p_max_mw.unwrap_or(spec.s_max_mva),
            efficiency: spec.efficiency.ok_or_else(|| missing("efficiency"))?,
            recovery_hours,
        }),
    };
    Ok(Der {
        label: spec.label(),
        node,
        kind,
        s_max: spec.s_max_mva,
        weights,
        alpha: [spec.alpha_p.ok_or_else(|| missing("alpha_p"))?, spec.alpha_q.ok_or_else(|| missing("alpha_q"))?],
    })
}

/// `√((1/K) Σ ((P0 − P0•)/P0•)²)`.
pub fn nrmse(p0: &[f64], reference: &[f64]) -> Result<f64> {
    if p0.len() != reference.len() {
        return Err(Error::InvalidArgument(format!("{} samples against {} references", p0.len(), reference.len())));
    }
    if p0.is_empty() {
        return Err(Error::UndefinedMetric("empty trace".into()));
    }
    let mut sum = 0.0;
    for (k, (&p, &r)) in p0.iter().zip(reference).enumerate() {
        if r == 0.0 {
            return Err(Error::UndefinedMetric(format!("zero reference at sample {k}")));
        }
        sum += ((p - r) / r).powi(2);
    }
    Ok((sum / p0.len() as f64).sqrt())
}

/// `Σᵢ [vᵢ − V̄ᵢ]₊ + [V̲ᵢ − vᵢ]₊` for one step.
pub fn step_violation(v: &[f64], limits: &VoltageLimits) -> f64 {
    v.iter()
        .zip(limits.lower.iter().zip(&limits.upper))
        .map(|(&v, (&lo, &hi))| (v - hi).max(0.0) + (lo - v).max(0.0))
        .sum()
}

/// `(1/NK) ΣₖΣᵢ ([vᵢ − V̄ᵢ]₊ + [V̲ᵢ − vᵢ]₊)` over per-step voltage vectors.
pub fn avv(v: &[Vec<f64>], limits: &VoltageLimits) -> Result<f64> {
    if let Some(row) = v.iter().find(|row| row.len() != limits.len()) {
        return Err(Error::InvalidArgument(format!("{} voltages for {} limits", row.len(), limits.len())));
    }
    let sums: Vec<f64> = v.iter().map(|row| step_violation(row, limits)).collect();
    Ok(avv_from_step_sums(&sums, limits.len()))
}

/// AVV from per-step violation sums over `nodes` nodes.
pub fn avv_from_step_sums(sums: &[f64], nodes: usize) -> f64 {
    if sums.is_empty() || nodes == 0 {
        return 0.0;
    }
    sums.iter().sum::<f64>() / (nodes * sums.len()) as f64
}

/// Longest run of consecutive steps with a positive violation, in steps.
pub fn longest_violation(sums: &[f64]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for &s in sums {
        run = if s > 0.0 { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nrmse: f64,
    /// p.u.
    pub avv: f64,
    /// Same metrics with the devices left at their uncontrolled setpoints.
    pub baseline_nrmse: f64,
    pub baseline_avv: f64,
    pub steps: usize,
    pub nodes: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Seconds.
    pub longest_violation: f64,
    pub baseline_longest_violation: f64,
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    /// Compares every metric except the wall-clock time.
    pub fn max_metric_difference(&self, other: &MetricsReport) -> f64 {
        [
            (self.nrmse, other.nrmse),
            (self.avv, other.avv),
            (self.baseline_nrmse, other.baseline_nrmse),
            (self.baseline_avv, other.baseline_avv),
            (self.v_min, other.v_min),
            (self.v_max, other.v_max),
            (self.longest_violation, other.longest_violation),
            (self.baseline_longest_violation, other.baseline_longest_violation),
        ]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(if self.steps == other.steps && self.nodes == other.nodes { 0.0 } else { f64::INFINITY }, f64::max)
    }
}

/// Columns shared by the run and the offline recomputation.
#[derive(Debug, Clone, Default)]
struct TraceSeries {
    p0: Vec<f64>,
    reference: Vec<f64>,
    voltages: Vec<Vec<f64>>,
    baseline_p0: Vec<f64>,
    baseline_violation: Vec<f64>,
}

impl TraceSeries {
    fn report(&self, limits: &VoltageLimits, dt: f64, wall_clock_seconds: f64) -> Result<MetricsReport> {
        let sums: Vec<f64> = self.voltages.iter().map(|v| step_violation(v, limits)).collect();
        let (v_min, v_max) = self
            .voltages
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(MetricsReport {
            nrmse: nrmse(&self.p0, &self.reference)?,
            avv: avv(&self.voltages, limits)?,
            baseline_nrmse: nrmse(&self.baseline_p0, &self.reference)?,
            baseline_avv: avv_from_step_sums(&self.baseline_violation, limits.len()),
            steps: self.p0.len(),
            nodes: limits.len(),
            v_min,
            v_max,
            longest_violation: longest_violation(&sums) as f64 * dt,
            baseline_longest_violation: longest_violation(&self.baseline_violation) as f64 * dt,
            wall_clock_seconds,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write `trace.csv` and `metrics.json` here.
    pub output_dir: Option<PathBuf>,
    /// Keep every step record in memory.
    pub keep_records: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSample {
    pub p0: f64,
    pub v_min: f64,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    /// Empty unless requested.
    pub records: Vec<OpfStepRecord>,
    pub baseline: Vec<BaselineSample>,
}

struct TraceWriter {
    out: csv::Writer<BufWriter<File>>,
    path: PathBuf,
}

impl TraceWriter {
    fn create(path: PathBuf, feeder: &FeederModel, ders: &[Der]) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = csv::Writer::from_writer(BufWriter::new(file));
        let mut header: Vec<String> =
            ["k", "t", "p0", "p0_ref", "v_min", "v_max"].iter().map(|s| s.to_string()).collect();
        header.extend(feeder.labels()[1..].iter().map(|l| format!("v_{l}")));
        for der in ders {
            header.push(format!("p_{}", der.label));
            header.push(format!("q_{}", der.label));
        }
        header.extend(ders.iter().filter(|d| d.is_battery()).map(|d| format!("soc_{}", d.label)));
        header.extend(
            ["lambda_norm", "lambda_max", "s", "baseline_p0", "baseline_v_min", "baseline_violation"].map(String::from),
        );
        out.write_record(&header).map_err(|e| Error::parse(&path, e.to_string()))?;
        Ok(TraceWriter { out, path })
    }

    fn row(&mut self, record: &OpfStepRecord, reference: f64, baseline: &BaselineSample) -> Result<()> {
        let n = record.y.len() - 1;
        let v = &record.y[..n];
        let mut fields: Vec<String> = vec![record.k.to_string()];
        let lambda_norm = record.lambda.iter().map(|l| l * l).sum::<f64>().sqrt();
        let lambda_max = record.lambda.iter().copied().fold(0.0, f64::max);
        let numbers = [record.t, record.y[n], reference, min(v), max(v)]
            .into_iter()
            .chain(v.iter().copied())
            .chain(record.x.iter().copied())
            .chain(record.soc.iter().copied())
            .chain([lambda_norm, lambda_max, record.s, baseline.p0, baseline.v_min, baseline.violation]);
        fields.extend(numbers.map(|x| x.to_string()));
        self.out.write_record(&fields).map_err(|e| Error::parse(&self.path, e.to_string()))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Runs the closed loop over the scenario's time grid together with the
/// uncontrolled baseline.
///
/// On a failed step the trace holds every completed step and the error
/// names the failing one.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunOutput> {
    let started = Instant::now();
    let steps = scenario.steps();
    let limits = scenario.evaluation_limits()?;
    let mut problem = scenario.problem()?;
    let plant = problem.plant(Arc::clone(&scenario.feeder))?;
    let baseline_problem = scenario.problem()?;

    let mut writer = match &options.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(TraceWriter::create(dir.join("trace.csv"), &scenario.feeder, &scenario.ders)?)
        }
        None => None,
    };
    let mut series = TraceSeries::default();
    let mut records = Vec::new();
    let mut baseline = Vec::with_capacity(steps);

    let mut sink = |record: &OpfStepRecord| -> Result<()> {
        let k = record.k;
        let reference = scenario.exogenous.reference_pu(k);
        let y_base = plant
            .evaluate(&baseline_problem.uncontrolled_input(k), k)
            .map_err(|e| Error::StepAborted { step: k, source: Box::new(e) })?;
        let n = limits.len();
        let sample = BaselineSample {
            p0: y_base[n],
            v_min: min(&y_base[..n]),
            violation: step_violation(&y_base[..n], &limits),
        };
        if let Some(w) = writer.as_mut() {
            w.row(record, reference, &sample)?;
        }
        series.p0.push(record.y[n]);
        series.reference.push(reference);
        series.voltages.push(record.y[..n].to_vec());
        series.baseline_p0.push(sample.p0);
        series.baseline_violation.push(sample.violation);
        baseline.push(sample);
        if options.keep_records {
            records.push(record.clone());
        }
        Ok(())
    };

    let outcome = if scenario.ders.is_empty() {
        run_open_loop(&problem, &plant, steps, &mut sink)
    } else {
        let control = scenario.control_loop(&problem)?;
        let initial = scenario.initial_state(&problem)?;
        if scenario.config.algorithm.monolithic {
            control.run_monolithic(&mut problem, &plant, initial, steps, &mut sink).map(|_| ())
        } else {
            control.run_distributed(&mut problem, &plant, initial, steps, &mut sink).map(|_| ())
        }
    };
    if let Some(w) = writer.take() {
        w.finish()?;
    }
    outcome?;

    let metrics = series.report(&limits, scenario.config.time.dt, started.elapsed().as_secs_f64())?;
    if let Some(dir) = &options.output_dir {
        write_json(&dir.join("metrics.json"), &metrics)?;
    }
    Ok(RunOutput { metrics, records, baseline })
}

/// No devices: the feeder is only observed.
fn run_open_loop(
    problem: &OpfProblem,
    plant: &dyn Plant,
    steps: usize,
    sink: &mut impl FnMut(&OpfStepRecord) -> Result<()>,
) -> Result<()> {
    for k in 0..steps {
        let y = plant.evaluate(&[], k).map_err(|e| Error::StepAborted { step: k, source: Box::new(e) })?;
        let record = OpfStepRecord {
            k,
            t: problem.exogenous().time(k),
            x: Vec::new(),
            soc: Vec::new(),
            y,
            lambda: vec![0.0; problem.dual_dim()],
            s: 0.0,
        };
        sink(&record)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Recomputes the metrics of a run from its trace file.
pub fn metrics_from_trace(path: &Path, scenario: &Scenario) -> Result<MetricsReport> {
    let limits = scenario.evaluation_limits()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    let column = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::parse(path, format!("missing column {name}")))
    };
    let p0 = column("p0")?;
    let reference = column("p0_ref")?;
    let voltage_columns =
        scenario.feeder.labels()[1..].iter().map(|l| column(&format!("v_{l}"))).collect::<Result<Vec<_>>>()?;
    let baseline_p0 = column("baseline_p0")?;
    let baseline_violation = column("baseline_violation")?;

    let mut series = TraceSeries::default();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(path, format!("bad number in column {} of row {:?}", i, row.position())))
        };
        series.p0.push(field(p0)?);
        series.reference.push(field(reference)?);
        series.voltages.push(voltage_columns.iter().map(|&i| field(i)).collect::<Result<_>>()?);
        series.baseline_p0.push(field(baseline_p0)?);
        series.baseline_violation.push(field(baseline_violation)?);
    }
    series.report(&limits, scenario.config.time.dt, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub nrmse: f64,
    pub avv: f64,
}

/// One run per noise level, in parallel; every run keeps the scenario seed.
pub fn noise_sweep(scenario: &Scenario, sigmas: &[f64]) -> Result<Vec<SweepRow>> {
    sigmas
        .par_iter()
        .map(|&sigma| {
            let run = run_scenario(&scenario.with_sigma(sigma), &RunOptions::default())?;
            Ok(SweepRow { sigma, nrmse: run.metrics.nrmse, avv: run.metrics.avv })
        })
        .collect()
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for row in rows {
        out.serialize(row).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Feeder response around the uncontrolled operating point of step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub k: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `∂y/∂x`, outputs by inputs.
    pub jacobian: DMatrix<f64>,
}

impl Linearization {
    /// `y ≈ y(x₀) + J (x − x₀)` as a static plant.
    pub fn plant(&self) -> Result<LinearPlant> {
        let offset = DVector::from_column_slice(&self.y) - &self.jacobian * DVector::from_column_slice(&self.x);
        LinearPlant::new(self.jacobian.clone(), DMatrix::zeros(self.y.len(), 0), offset, Vec::new())
    }
}

pub fn linearize(scenario: &Scenario, k: usize) -> Result<Linearization> {
    if k >= scenario.steps() {
        return Err(Error::InvalidArgument(format!("step {k} outside a run of {} steps", scenario.steps())));
    }
    let problem = scenario.problem()?;
    let plant = problem.plant(Arc::clone(&scenario.feeder))?;
    let x = problem.uncontrolled_input(k);
    let y = plant.evaluate(&x, k)?;
    let jacobian = numerical_jacobian(&plant, &x, k, LINEARIZATION_STEP)?;
    Ok(Linearization { k, x, y, jacobian })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPoint {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iterations: usize,
}

/// Saddle points of the linearized problem every `stride` steps, with
/// battery SOC frozen at its initial value.
///
/// The oracle iterates with the controller's per-device step sizes and is
/// warm-started from the previous point.
pub fn solve_target_trajectory(scenario: &Scenario, stride: usize) -> Result<Vec<TargetPoint>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least one step".into()));
    }
    let mut problem = scenario.problem()?;
    let sizes = problem.step_sizes(scenario.config.algorithm.alpha_voltage, scenario.config.epsilon())?;
    let options = OracleOptions { sizes: Some(sizes), max_iterations: 2_000_000, ..OracleOptions::default() };
    let mut points: Vec<TargetPoint> = Vec::new();
    for k in (0..scenario.steps()).step_by(stride) {
        let lin = linearize(scenario, k)?;
        let plant = lin.plant()?;
        problem.set_model(Some(lin.jacobian.clone()));
        let start = match points.last() {
            Some(p) => PrimalDualState::new(p.x.clone(), p.lambda.clone()),
            None => PrimalDualState::new(lin.x.clone(), vec![0.0; problem.dual_dim()]),
        };
        let solution = saddle_point_oracle(&problem, k, &plant, Some(&start), &options)
            .map_err(|e| Error::StepAborted { step: k, source: Box::new(e) })?;
        log::debug!("target at step {k}: {} iterations", solution.iterations);
        points.push(TargetPoint {
            k,
            t: scenario.exogenous.time(k),
            x: solution.x,
            lambda: solution.lambda,
            iterations: solution.iterations,
        });
    }
    Ok(points)
}

pub fn write_target(path: &Path, scenario: &Scenario, points: &[TargetPoint]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = vec!["k".to_string(), "t".to_string(), "iterations".to_string()];
    for der in &scenario.ders {
        header.push(format!("p_{}", der.label));
        header.push(format!("q_{}", der.label));
    }
    header.push("lambda_max".into());
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for p in points {
        let mut fields = vec![p.k.to_string(), p.t.to_string(), p.iterations.to_string()];
        fields.extend(p.x.iter().map(f64::to_string));
        fields.push(p.lambda.iter().copied().fold(0.0, f64::max).to_string());
        writeln!(out, "{}", fields.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Largest excursion of each feasibility condition over a run, zero when
/// satisfied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// MWh.
    pub soc: f64,
    /// MW, battery power window including energy headroom.
    pub battery_box: f64,
    /// MW, `[0, available]` for PV.
    pub pv_box: f64,
    /// MVA.
    pub disc: f64,
    pub dual: f64,
}

impl FeasibilityReport {
    pub fn worst(&self) -> f64 {
        [self.soc, self.battery_box, self.pv_box, self.disc, self.dual].into_iter().fold(0.0, f64::max)
    }
}

/// Checks recorded steps against the device and multiplier constraints.
pub fn check_feasibility(scenario: &Scenario, records: &[OpfStepRecord]) -> Result<FeasibilityReport> {
    let mut report = FeasibilityReport::default();
    let dt_hours = scenario.config.time.dt / 3600.0;
    let cap = scenario.config.algorithm.dual_cap;
    for record in records {
        let mut socs = record.soc.iter();
        for (i, (der, pq)) in scenario.ders.iter().zip(record.x.chunks_exact(2)).enumerate() {
            let (p, q) = (pq[0], pq[1]);
            report.disc = report.disc.max(p.hypot(q) - der.s_max);
            match &der.kind {
                DerKind::Battery(b) => {
                    let soc = *socs.next().ok_or_else(|| Error::InvalidArgument("missing SOC in record".into()))?;
                    report.soc = report.soc.max(b.soc_min - soc).max(soc - b.soc_max);
                    let (lo, hi) = battery_power_bounds(&Battery { soc, ..b.clone() }, dt_hours)?;
                    report.battery_box = report.battery_box.max(lo - p).max(p - hi);
                }
                DerKind::Pv => {
                    let avail = pv_available(der, i, &scenario.exogenous, record.k);
                    report.pv_box = report.pv_box.max(-p).max(p - avail);
                }
            }
        }
        for &l in &record.lambda {
            report.dual = report.dual.max(-l).max(l - cap);
        }
    }
    Ok(report)
}
