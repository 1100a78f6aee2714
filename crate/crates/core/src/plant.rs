//! Physical systems evaluated by measurement: a linear time-varying plant,
//! a single-phase AC distribution feeder, and multiplicative sensor noise.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PF_TOLERANCE: f64 = 1e-10;
pub const PF_MAX_ITERATIONS: usize = 50;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Noise streams per step; slots `0..STREAMS_PER_STEP` are available.
pub const STREAMS_PER_STEP: u64 = 8;

/// Input-output map of a physical system at step `k`.
///
/// Exogenous inputs are fixed by `k`, so repeated calls with the same `k`
/// see the same disturbance.
pub trait Plant: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, x: &[f64], k: usize) -> Result<Vec<f64>>;

    /// Exact input-output sensitivity, when the plant knows it.
    fn linear_model(&self, _k: usize) -> Option<DMatrix<f64>> {
        None
    }
}

/// `y = C x + D w⁽ᵏ⁾ + y0`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    gain: DMatrix<f64>,
    disturbance: DMatrix<f64>,
    offset: DVector<f64>,
    exogenous: Vec<DVector<f64>>,
}

impl LinearPlant {
    pub fn new(
        gain: DMatrix<f64>,
        disturbance: DMatrix<f64>,
        offset: DVector<f64>,
        exogenous: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let m = gain.nrows();
        if disturbance.nrows() != m || offset.len() != m {
            return Err(Error::InvalidArgument(format!(
                "output dimension mismatch: gain {m}, disturbance {}, offset {}",
                disturbance.nrows(),
                offset.len()
            )));
        }
        if let Some(w) = exogenous.iter().find(|w| w.len() != disturbance.ncols()) {
            return Err(Error::InvalidArgument(format!(
                "exogenous vector of length {} for a disturbance matrix with {} columns",
                w.len(),
                disturbance.ncols()
            )));
        }
        Ok(LinearPlant { gain, disturbance, offset, exogenous })
    }

    /// Disturbance-free `y = C x`.
    pub fn static_gain(gain: DMatrix<f64>) -> Self {
        let m = gain.nrows();
        LinearPlant { gain, disturbance: DMatrix::zeros(m, 0), offset: DVector::zeros(m), exogenous: Vec::new() }
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

impl Plant for LinearPlant {
    fn input_dim(&self) -> usize {
        self.gain.ncols()
    }

    fn output_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn evaluate(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input of length {} for a plant with {} inputs",
                x.len(),
                self.input_dim()
            )));
        }
        let mut y = &self.gain * DVector::from_column_slice(x) + &self.offset;
        if self.disturbance.ncols() > 0 {
            let w = self.exogenous.get(k).ok_or_else(|| {
                Error::InvalidArgument(format!("step {k} beyond exogenous trajectory of {}", self.exogenous.len()))
            })?;
            y += &self.disturbance * w;
        }
        Ok(y.as_slice().to_vec())
    }

    fn linear_model(&self, _k: usize) -> Option<DMatrix<f64>> {
        Some(self.gain.clone())
    }
}

/// Series branch between two nodes, impedance in p.u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// Single-phase network; node 0 is the slack bus at fixed voltage.
#[derive(Debug, Clone)]
pub struct FeederModel {
    labels: Vec<String>,
    lines: Vec<Line>,
    s_base_mva: f64,
    slack_voltage: f64,
    admittance: DMatrix<Complex64>,
}

/// Converged operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// Magnitudes at nodes `1..=n`.
    pub voltages: Vec<f64>,
    /// Angles (rad) at nodes `1..=n`.
    pub angles: Vec<f64>,
    /// Active power drawn from the substation, p.u.
    pub p0: f64,
    pub q0: f64,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl FeederModel {
    /// `labels[0]` names the slack bus; line endpoints index into `labels`.
    pub fn new(labels: Vec<String>, lines: Vec<Line>, s_base_mva: f64, slack_voltage: f64) -> Result<Self> {
        let n = labels.len();
        if n < 2 {
            return Err(Error::InvalidConfiguration("feeder needs a slack bus and at least one node".into()));
        }
        if !(s_base_mva > 0.0) {
            return Err(Error::InvalidConfiguration(format!("base power must be positive, got {s_base_mva}")));
        }
        if !(slack_voltage > 0.0) {
            return Err(Error::InvalidConfiguration(format!("slack voltage must be positive, got {slack_voltage}")));
        }
        let mut admittance = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for line in &lines {
            if line.from >= n || line.to >= n || line.from == line.to {
                return Err(Error::InvalidConfiguration(format!(
                    "line {}-{} has invalid endpoints",
                    line.from, line.to
                )));
            }
            if !(line.r >= 0.0) || line.r == 0.0 && line.x == 0.0 {
                return Err(Error::InvalidConfiguration(format!(
                    "line {}-{} has invalid impedance {} + j{}",
                    labels[line.from], labels[line.to], line.r, line.x
                )));
            }
            let y = Complex64::new(1.0, 0.0) / Complex64::new(line.r, line.x);
            admittance[(line.from, line.from)] += y;
            admittance[(line.to, line.to)] += y;
            admittance[(line.from, line.to)] -= y;
            admittance[(line.to, line.from)] -= y;
        }
        let feeder = FeederModel { labels, lines, s_base_mva, slack_voltage, admittance };
        if let Some(i) = feeder.unreachable_node() {
            return Err(Error::InvalidConfiguration(format!(
                "node {} is not connected to the slack bus",
                feeder.labels[i]
            )));
        }
        Ok(feeder)
    }

    /// Reads a `from,to,r_pu,x_pu` table. Remaining nodes are numbered in
    /// order of first appearance.
    pub fn from_csv(path: &Path, slack_label: &str, s_base_mva: f64, slack_voltage: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, path, slack_label, s_base_mva, slack_voltage)
    }

    pub fn from_csv_str(text: &str, slack_label: &str, s_base_mva: f64, slack_voltage: f64) -> Result<Self> {
        Self::from_reader(text.as_bytes(), Path::new("<feeder>"), slack_label, s_base_mva, slack_voltage)
    }

    fn from_reader(
        reader: impl std::io::Read,
        path: &Path,
        slack_label: &str,
        s_base_mva: f64,
        slack_voltage: f64,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            from: String,
            to: String,
            r_pu: f64,
            x_pu: f64,
        }
        let mut labels = vec![slack_label.to_string()];
        let mut index: HashMap<String, usize> = HashMap::from([(slack_label.to_string(), 0)]);
        let mut lines = Vec::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
            let mut id = |label: String| {
                *index.entry(label.clone()).or_insert_with(|| {
                    labels.push(label);
                    labels.len() - 1
                })
            };
            let (from, to) = (id(row.from), id(row.to));
            lines.push(Line { from, to, r: row.r_pu, x: row.x_pu });
        }
        Self::new(labels, lines, s_base_mva, slack_voltage)
    }

    /// Number of non-slack nodes.
    pub fn n_nodes(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Internal index of a node label (0 is the slack bus).
    pub fn node_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn s_base_mva(&self) -> f64 {
        self.s_base_mva
    }

    pub fn slack_voltage(&self) -> f64 {
        self.slack_voltage
    }

    fn unreachable_node(&self) -> Option<usize> {
        let n = self.labels.len();
        let mut adjacency = vec![Vec::new(); n];
        for l in &self.lines {
            adjacency[l.from].push(l.to);
            adjacency[l.to].push(l.from);
        }
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(i) = queue.pop_front() {
            for &j in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().position(|s| !s)
    }

    /// Complex power injected at every node for the given voltages.
    fn injected_power(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = v.len();
        (0..n)
            .map(|i| {
                let current: Complex64 = (0..n).map(|j| self.admittance[(i, j)] * v[j]).sum();
                v[i] * current.conj()
            })
            .collect()
    }

    /// Newton-Raphson in polar coordinates from a flat start.
    ///
    /// `injections[i]` is the net complex injection (generation minus load)
    /// at node `i + 1`, in p.u.
    pub fn solve_power_flow(&self, injections: &[Complex64]) -> Result<PowerFlowSolution> {
        let n = self.n_nodes();
        if injections.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} injections for a feeder with {n} non-slack nodes",
                injections.len()
            )));
        }
        let mut mag = vec![1.0; n + 1];
        let mut ang = vec![0.0; n + 1];
        mag[0] = self.slack_voltage;

        let mut iterations = 0;
        loop {
            let v: Vec<Complex64> = (0..=n).map(|i| Complex64::from_polar(mag[i], ang[i])).collect();
            let s = self.injected_power(&v);
            let mismatch: Vec<f64> = (1..=n)
                .map(|i| s[i].re - injections[i - 1].re)
                .chain((1..=n).map(|i| s[i].im - injections[i - 1].im))
                .collect();
            let max_mismatch = mismatch.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
            if !max_mismatch.is_finite() {
                return Err(Error::PowerFlowDivergence { iterations, mismatch: max_mismatch });
            }
            if max_mismatch < PF_TOLERANCE {
                return Ok(PowerFlowSolution {
                    voltages: mag[1..].to_vec(),
                    angles: ang[1..].to_vec(),
                    p0: s[0].re,
                    q0: s[0].im,
                    iterations,
                    max_mismatch,
                });
            }
            if iterations == PF_MAX_ITERATIONS {
                return Err(Error::PowerFlowDivergence { iterations, mismatch: max_mismatch });
            }
            let jac = self.polar_jacobian(&v);
            let step = jac
                .lu()
                .solve(&DVector::from_vec(mismatch))
                .ok_or(Error::PowerFlowDivergence { iterations, mismatch: max_mismatch })?;
            for i in 1..=n {
                ang[i] -= step[i - 1];
                mag[i] -= step[n + i - 1];
            }
            iterations += 1;
        }
    }

    /// Derivatives of `(P, Q)` at nodes `1..=n` with respect to `(θ, |V|)`
    /// at nodes `1..=n`.
    fn polar_jacobian(&self, v: &[Complex64]) -> DMatrix<f64> {
        let n = self.n_nodes();
        let y = &self.admittance;
        let current: Vec<Complex64> = (0..=n).map(|i| (0..=n).map(|j| y[(i, j)] * v[j]).sum()).collect();
        let unit: Vec<Complex64> = v.iter().map(|vi| vi / vi.norm()).collect();
        let j = Complex64::i();
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        for a in 1..=n {
            for b in 1..=n {
                // dS_a/dθ_b and dS_a/d|V|_b
                let diag = if a == b { 1.0 } else { 0.0 };
                let d_angle = j * v[a] * (current[a] * diag - y[(a, b)] * v[b]).conj();
                let d_mag = v[a] * (y[(a, b)] * unit[b]).conj() + current[a].conj() * unit[b] * diag;
                jac[(a - 1, b - 1)] = d_angle.re;
                jac[(a - 1, n + b - 1)] = d_mag.re;
                jac[(n + a - 1, b - 1)] = d_angle.im;
                jac[(n + a - 1, n + b - 1)] = d_mag.im;
            }
        }
        jac
    }
}

/// Relative Gaussian sensor error: `ŷᵢ = yᵢ (1 + Wᵢ)`, `Wᵢ ~ N(0, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("noise level must be non-negative, got {sigma}")));
        }
        Ok(NoiseModel { sigma, seed })
    }

    pub fn noiseless() -> Self {
        NoiseModel { sigma: 0.0, seed: 0 }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::noiseless()
    }
}

/// Measures `y` with draws reproducible per `(seed, step, slot)`.
pub fn measure(y: &[f64], noise: &NoiseModel, step: usize, slot: u64) -> Vec<f64> {
    if noise.sigma == 0.0 {
        return y.to_vec();
    }
    debug_assert!(slot < STREAMS_PER_STEP);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(step as u64 * STREAMS_PER_STEP + slot);
    let normal = Normal::new(0.0, noise.sigma).expect("sigma validated finite and non-negative");
    y.iter().map(|v| v * (1.0 + normal.sample(&mut rng))).collect()
}

/// Central-difference sensitivity `∂y/∂x` at `x0`.
pub fn numerical_jacobian(plant: &dyn Plant, x0: &[f64], k: usize, step: f64) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("difference step must be positive, got {step}")));
    }
    let m = plant.output_dim();
    let mut jac = DMatrix::zeros(m, x0.len());
    let mut x = x0.to_vec();
    for col in 0..x0.len() {
        x[col] = x0[col] + step;
        let up = plant.evaluate(&x, k)?;
        x[col] = x0[col] - step;
        let down = plant.evaluate(&x, k)?;
        x[col] = x0[col];
        for row in 0..m {
            jac[(row, col)] = (up[row] - down[row]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Node injections that do not depend on the controlled inputs, in p.u.
pub type BaseInjections = Arc<dyn Fn(usize) -> Vec<Complex64> + Send + Sync>;

/// Where a controllable device connects, and how its inputs enter the node
/// balance: injection = `p_sign · x_p + j · x_q`, scaled by `1 / S_base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceTerminal {
    pub node: usize,
    pub p_sign: f64,
}

/// Feeder seen as a plant: inputs are `(x_p, x_q)` pairs per device in
/// MW/MVAr; outputs are `(v_1, …, v_n, P0)` in p.u.
#[derive(Clone)]
pub struct FeederPlant {
    feeder: Arc<FeederModel>,
    terminals: Vec<DeviceTerminal>,
    base: BaseInjections,
}

impl FeederPlant {
    pub fn new(feeder: Arc<FeederModel>, terminals: Vec<DeviceTerminal>, base: BaseInjections) -> Result<Self> {
        if let Some(t) = terminals.iter().find(|t| t.node == 0 || t.node > feeder.n_nodes()) {
            return Err(Error::InvalidConfiguration(format!("device terminal at invalid node index {}", t.node)));
        }
        Ok(FeederPlant { feeder, terminals, base })
    }

    pub fn feeder(&self) -> &FeederModel {
        &self.feeder
    }

    pub fn terminals(&self) -> &[DeviceTerminal] {
        &self.terminals
    }

    pub fn injections(&self, x: &[f64], k: usize) -> Result<Vec<Complex64>> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input of length {} for {} devices",
                x.len(),
                self.terminals.len()
            )));
        }
        let mut s = (self.base)(k);
        if s.len() != self.feeder.n_nodes() {
            return Err(Error::Internal(format!(
                "base injections have {} entries for {} nodes",
                s.len(),
                self.feeder.n_nodes()
            )));
        }
        let scale = 1.0 / self.feeder.s_base_mva;
        for (t, pq) in self.terminals.iter().zip(x.chunks_exact(2)) {
            s[t.node - 1] += Complex64::new(t.p_sign * pq[0], pq[1]) * scale;
        }
        Ok(s)
    }

    pub fn solve(&self, x: &[f64], k: usize) -> Result<PowerFlowSolution> {
        self.feeder.solve_power_flow(&self.injections(x, k)?)
    }
}

impl std::fmt::Debug for FeederPlant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeederPlant")
            .field("nodes", &self.feeder.n_nodes())
            .field("terminals", &self.terminals)
            .finish_non_exhaustive()
    }
}

impl Plant for FeederPlant {
    fn input_dim(&self) -> usize {
        2 * self.terminals.len()
    }

    fn output_dim(&self) -> usize {
        self.feeder.n_nodes() + 1
    }

    fn evaluate(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let sol = self.solve(x, k)?;
        let mut y = sol.voltages;
        y.push(sol.p0);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_bus(r: f64, x: f64) -> FeederModel {
        FeederModel::new(vec!["0".into(), "1".into()], vec![Line { from: 0, to: 1, r, x }], 1.0, 1.0).unwrap()
    }

    /// Receiving-end magnitude from `|V|⁴ + (2(rP + xQ) − 1)|V|² + (r² + x²)(P² + Q²) = 0`
    /// with `(P, Q)` the consumed power and a 1 p.u. source.
    fn two_bus_closed_form(r: f64, x: f64, p_load: f64, q_load: f64) -> f64 {
        let b = 2.0 * (r * p_load + x * q_load) - 1.0;
        let c = (r * r + x * x) * (p_load * p_load + q_load * q_load);
        ((-b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
    }

    #[test]
    fn linear_plant_examples() {
        let p = LinearPlant::static_gain(DMatrix::from_element(1, 1, 2.0));
        assert_eq!(p.evaluate(&[3.0], 0).unwrap(), vec![6.0]);

        let p = LinearPlant::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            vec![DVector::from_vec(vec![1.0, -1.0])],
        )
        .unwrap();
        assert_eq!(p.evaluate(&[0.0, 0.0], 0).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(p.evaluate(&[0.0, 0.0], 1), Err(Error::InvalidArgument(_))));

        let p = LinearPlant::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DVector::from_vec(vec![5.0]),
            vec![DVector::zeros(1)],
        )
        .unwrap();
        assert_eq!(p.evaluate(&[0.0], 0).unwrap(), vec![5.0]);
    }

    #[test]
    fn flat_no_load() {
        let f = two_bus(0.0, 0.1);
        let sol = f.solve_power_flow(&[Complex64::new(0.0, 0.0)]).unwrap();
        assert_eq!(sol.voltages, vec![1.0]);
        assert_eq!(sol.p0, 0.0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn two_bus_lossless_matches_closed_form() {
        let f = two_bus(0.0, 0.1);
        let sol = f.solve_power_flow(&[Complex64::new(-0.1, 0.0)]).unwrap();
        let want = two_bus_closed_form(0.0, 0.1, 0.1, 0.0);
        assert_abs_diff_eq!(want, 0.999_949_987, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.voltages[0], want, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.p0, 0.1, epsilon = 1e-10);
    }

    #[test]
    fn two_bus_with_reactive_load_matches_closed_form() {
        let f = two_bus(0.03, 0.1);
        let sol = f.solve_power_flow(&[Complex64::new(-0.3, -0.2)]).unwrap();
        assert_abs_diff_eq!(sol.voltages[0], two_bus_closed_form(0.03, 0.1, 0.3, 0.2), epsilon = 1e-10);
    }

    #[test]
    fn lossy_line_draws_more_than_load() {
        let f = two_bus(0.05, 0.1);
        let sol = f.solve_power_flow(&[Complex64::new(-0.1, 0.0)]).unwrap();
        assert!(sol.p0 > 0.1);
        // bracket the receiving voltage by bisection on the closed form residual
        let residual = |v: f64| {
            let b = 2.0 * (0.05 * 0.1) - 1.0;
            v.powi(4) + b * v * v + (0.05f64.powi(2) + 0.01) * 0.01
        };
        let (mut lo, mut hi) = (0.5, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert_abs_diff_eq!(sol.voltages[0], 0.5 * (lo + hi), epsilon = 1e-10);
        // losses are I²r with |I| = 0.1 / |V|
        let loss = 0.05 * (0.1 / sol.voltages[0]).powi(2);
        assert_abs_diff_eq!(sol.p0, 0.1 + loss, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_topology() {
        let labels = vec!["0".to_string(), "1".into(), "2".into()];
        let err = FeederModel::new(labels, vec![Line { from: 0, to: 1, r: 0.0, x: 0.1 }], 1.0, 1.0);
        assert!(matches!(err, Err(Error::InvalidConfiguration(_))));
        let err =
            FeederModel::new(vec!["0".into(), "1".into()], vec![Line { from: 0, to: 1, r: -0.1, x: 0.1 }], 1.0, 1.0);
        assert!(err.is_err());
    }

    #[test]
    fn infeasible_load_diverges() {
        let f = two_bus(0.0, 0.1);
        let err = f.solve_power_flow(&[Complex64::new(-20.0, -20.0)]).unwrap_err();
        assert!(matches!(err, Error::PowerFlowDivergence { .. }));
    }

    #[test]
    fn parses_csv_with_labels() {
        let text = "from,to,r_pu,x_pu\n799,701,0.01,0.02\n701,702,0.01,0.02\n";
        let f = FeederModel::from_csv_str(text, "799", 23.04, 1.0).unwrap();
        assert_eq!(f.n_nodes(), 2);
        assert_eq!(f.node_index("702"), Some(2));
        assert!(FeederModel::from_csv_str("from,to,r_pu\n1,2,0.1\n", "1", 1.0, 1.0).is_err());
    }

    #[test]
    fn noise_examples() {
        let y = vec![1.0, 2.0];
        assert_eq!(measure(&y, &NoiseModel::noiseless(), 3, 0), y);
        let noise = NoiseModel::new(0.5, 7).unwrap();
        assert_eq!(measure(&[0.0], &noise, 0, 0), vec![0.0]);
        assert_eq!(measure(&y, &noise, 5, 2), measure(&y, &noise, 5, 2));
        assert_ne!(measure(&y, &noise, 5, 2), measure(&y, &noise, 5, 1));
        assert!(NoiseModel::new(-0.1, 0).is_err());
    }

    #[test]
    fn noise_standard_deviation() {
        let noise = NoiseModel::new(0.001, 11).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|k| measure(&[1.0], &noise, k, 0)[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std / 0.001 - 1.0).abs() < 0.05, "sample std {std}");
    }

    #[test]
    fn jacobian_of_linear_plant() {
        let p = LinearPlant::static_gain(DMatrix::from_element(1, 1, 2.0));
        let j = numerical_jacobian(&p, &[0.3], 0, DEFAULT_FD_STEP).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 2.0, epsilon = 1e-9);
        let j2 = numerical_jacobian(&p, &[0.3], 0, DEFAULT_FD_STEP / 2.0).unwrap();
        assert_abs_diff_eq!(j2[(0, 0)], j[(0, 0)], epsilon = 1e-9);
    }

    #[test]
    fn head_power_sensitivity_at_no_load() {
        let f = Arc::new(two_bus(0.0, 0.1));
        let base: BaseInjections = Arc::new(|_| vec![Complex64::new(0.0, 0.0)]);
        let plant = FeederPlant::new(f, vec![DeviceTerminal { node: 1, p_sign: 1.0 }], base).unwrap();
        let j = numerical_jacobian(&plant, &[0.0, 0.0], 0, DEFAULT_FD_STEP).unwrap();
        assert_abs_diff_eq!(j[(1, 0)], -1.0, epsilon = 1e-6);
        // voltage rises with reactive injection on an inductive line
        assert!(j[(0, 1)] > 0.0);
    }
}
