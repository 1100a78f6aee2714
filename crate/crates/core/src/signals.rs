//! Deterministic exploration signals.
//!
//! A bank of sinusoids `ξ_i(t) = a·sin(2π f_i t)` with pairwise distinct
//! frequencies. With `a = √2` the time-averaged outer product `ξ ξᵀ` over a
//! common period is the identity matrix; for incommensurate frequencies the
//! average only approaches the identity as `O(1/horizon)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Default probe amplitude, chosen so that each channel has unit mean square.
pub const DEFAULT_AMPLITUDE: f64 = SQRT_2;

/// Largest number of base-frequency cycles searched when looking for a
/// common period. Frequency sets whose common period needs more cycles of
/// the slowest channel are treated as incommensurate.
pub const MAX_BASE_CYCLES: u32 = 64;

/// Smallest spacing allowed between two band-mode frequencies (Hz).
pub const MIN_BAND_SPACING: f64 = 1e-9;

const PERIOD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSignal {
    amplitude: f64,
    frequencies: Vec<f64>,
    period: Option<f64>,
    dt: f64,
}

/// How per-channel frequencies are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FrequencyMode {
    /// `f_i = m_i / T`; every channel completes `m_i` cycles in `T` seconds.
    IntegerCycles { period: f64, multiples: Vec<u32> },
    /// `n` equally spaced frequencies in `[f_min, f_max]`.
    Band { f_min: f64, f_max: f64 },
}

/// Builds a sinusoid bank. The common period is populated when every
/// frequency is a rational multiple of the slowest one (see
/// [`MAX_BASE_CYCLES`]).
pub fn make_sinusoid_bank(n: usize, frequencies: &[f64], amplitude: f64) -> Result<ExplorationSignal> {
    if n == 0 {
        return Err(Error::InvalidConfiguration("exploration signal needs at least one channel".into()));
    }
    if frequencies.len() != n {
        return Err(Error::InvalidConfiguration(format!("expected {n} frequencies, got {}", frequencies.len())));
    }
    if !amplitude.is_finite() || amplitude <= 0.0 {
        return Err(Error::InvalidConfiguration(format!("amplitude must be positive, got {amplitude}")));
    }
    for (i, &f) in frequencies.iter().enumerate() {
        if !f.is_finite() || f <= 0.0 {
            return Err(Error::InvalidConfiguration(format!("frequency {i} must be positive, got {f}")));
        }
        if frequencies[..i].contains(&f) {
            return Err(Error::InvalidConfiguration(format!("duplicate frequency {f} Hz")));
        }
    }
    Ok(ExplorationSignal { amplitude, frequencies: frequencies.to_vec(), period: common_period(frequencies), dt: 1.0 })
}

/// Smallest `T = k / f_min` (k ≤ [`MAX_BASE_CYCLES`]) such that every channel
/// completes an integer number of cycles in `T`.
fn common_period(frequencies: &[f64]) -> Option<f64> {
    let f_min = frequencies.iter().copied().fold(f64::INFINITY, f64::min);
    (1..=MAX_BASE_CYCLES).map(|k| f64::from(k) / f_min).find(|&t| {
        frequencies.iter().all(|&f| {
            let cycles = f * t;
            (cycles - cycles.round()).abs() <= PERIOD_TOL * cycles.max(1.0)
        })
    })
}

/// Picks `n` pairwise-distinct frequencies.
pub fn assign_frequencies(n: usize, mode: &FrequencyMode) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfiguration("need at least one frequency".into()));
    }
    match mode {
        FrequencyMode::IntegerCycles { period, multiples } => {
            if !period.is_finite() || *period <= 0.0 {
                return Err(Error::InvalidConfiguration(format!("period must be positive, got {period}")));
            }
            if multiples.len() < n {
                return Err(Error::InvalidConfiguration(format!(
                    "{n} channels requested but only {} cycle multiples given",
                    multiples.len()
                )));
            }
            let chosen = &multiples[..n];
            for (i, &m) in chosen.iter().enumerate() {
                if m == 0 {
                    return Err(Error::InvalidConfiguration("cycle multiples must be positive".into()));
                }
                if chosen[..i].contains(&m) {
                    return Err(Error::InvalidConfiguration(format!("duplicate cycle multiple {m}")));
                }
            }
            Ok(chosen.iter().map(|&m| f64::from(m) / period).collect())
        }
        FrequencyMode::Band { f_min, f_max } => {
            if !(f_min.is_finite() && f_max.is_finite()) || *f_min <= 0.0 || f_min >= f_max {
                return Err(Error::InvalidConfiguration(format!("empty frequency band [{f_min}, {f_max}]")));
            }
            let width = f_max - f_min;
            let slots = (width / MIN_BAND_SPACING).floor() as usize + 1;
            if n > slots {
                return Err(Error::InvalidConfiguration(format!(
                    "{n} frequencies do not fit in band [{f_min}, {f_max}]"
                )));
            }
            if n == 1 {
                return Ok(vec![0.5 * (f_min + f_max)]);
            }
            let step = width / (n - 1) as f64;
            Ok((0..n).map(|i| if i == n - 1 { *f_max } else { f_min + step * i as f64 }).collect())
        }
    }
}

impl ExplorationSignal {
    /// Bank with an exact common period `T`: `f_i = m_i / T`.
    pub fn integer_cycles(period: f64, multiples: &[u32], amplitude: f64) -> Result<Self> {
        let mode = FrequencyMode::IntegerCycles { period, multiples: multiples.to_vec() };
        let freqs = assign_frequencies(multiples.len(), &mode)?;
        let mut signal = make_sinusoid_bank(freqs.len(), &freqs, amplitude)?;
        // Exact even when the slowest channel needs more than
        // MAX_BASE_CYCLES cycles to line up with the others.
        let g = multiples.iter().copied().fold(0u32, gcd);
        signal.period = Some(period / f64::from(g));
        Ok(signal)
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidConfiguration(format!("sampling step must be positive, got {dt}")));
        }
        self.dt = dt;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Common period in seconds, if the frequencies are commensurate.
    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of sampling steps in one period, when that is an integer.
    pub fn period_steps(&self) -> Option<usize> {
        let steps = self.period? / self.dt;
        let rounded = steps.round();
        ((steps - rounded).abs() < 1e-9 * rounded.max(1.0) && rounded >= 1.0).then_some(rounded as usize)
    }

    /// `ξ(t)`.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        self.frequencies.iter().map(|&f| self.channel(f, t)).collect()
    }

    /// `ξ(k·dt)`.
    pub fn sample_step(&self, k: usize) -> Vec<f64> {
        self.sample(k as f64 * self.dt)
    }

    /// Single channel `i` at time `t`.
    pub fn sample_channel(&self, i: usize, t: f64) -> f64 {
        self.channel(self.frequencies[i], t)
    }

    #[inline]
    fn channel(&self, f: f64, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * f * t).sin()
    }

    /// Channels `range` as their own bank (period metadata recomputed).
    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let freqs = &self.frequencies[range];
        let mut sub = make_sinusoid_bank(freqs.len(), freqs, self.amplitude)?;
        sub.dt = self.dt;
        if let (Some(t), None) = (self.period, sub.period) {
            sub.period = Some(t);
        }
        Ok(sub)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Riemann-sum estimate of `(1/H) ∫_{t0}^{t0+H} ξ ξᵀ dt`.
pub fn empirical_covariance(signal: &ExplorationSignal, t0: f64, horizon: f64, dt: f64) -> DMatrix<f64> {
    let n = signal.len();
    let steps = (horizon / dt).round().max(1.0) as usize;
    let mut acc = DMatrix::<f64>::zeros(n, n);
    let mut xi = vec![0.0; n];
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        for (slot, &f) in xi.iter_mut().zip(signal.frequencies.iter()) {
            *slot = signal.channel(f, t);
        }
        accumulate_outer(&mut acc, &xi);
    }
    acc * (dt / horizon)
}

/// Largest entrywise deviation of `cov` from the identity.
pub fn identity_deviation(cov: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..cov.nrows() {
        for j in 0..cov.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((cov[(i, j)] - target).abs());
        }
    }
    worst
}

/// Worst identity deviation of the running covariance over every horizon
/// `h ∈ [h_from, h_to]`, starting at `t0`. Because the deviation of a
/// sinusoid average oscillates in `h`, its supremum over a horizon window is
/// the quantity that decays like `1/h`.
pub fn covariance_deviation_sup(signal: &ExplorationSignal, t0: f64, h_from: f64, h_to: f64, dt: f64) -> f64 {
    let n = signal.len();
    let first = (h_from / dt).round().max(1.0) as usize;
    let last = (h_to / dt).round().max(first as f64) as usize;
    let mut acc = DMatrix::<f64>::zeros(n, n);
    let mut xi = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for k in 0..last {
        let t = t0 + k as f64 * dt;
        for (slot, &f) in xi.iter_mut().zip(signal.frequencies.iter()) {
            *slot = signal.channel(f, t);
        }
        accumulate_outer(&mut acc, &xi);
        let count = k + 1;
        if count >= first {
            let scale = 1.0 / count as f64;
            for i in 0..n {
                for j in i..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((acc[(i, j)] * scale - target).abs());
                }
            }
        }
    }
    worst
}

fn accumulate_outer(acc: &mut DMatrix<f64>, xi: &[f64]) {
    let n = xi.len();
    for i in 0..n {
        for j in i..n {
            let v = xi[i] * xi[j];
            acc[(i, j)] += v;
            if i != j {
                acc[(j, i)] += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quarter_period_peak() {
        let s = make_sinusoid_bank(1, &[1.0], SQRT_2).unwrap();
        assert_abs_diff_eq!(s.sample(0.25)[0], SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sample(0.0)[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sample(0.125)[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_channel_samples() {
        let s = make_sinusoid_bank(2, &[0.1, 0.2], SQRT_2).unwrap();
        let xi = s.sample(2.5);
        assert_abs_diff_eq!(xi[0], 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(xi[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn harmonic_bank_has_unit_period() {
        let s = make_sinusoid_bank(2, &[1.0, 2.0], SQRT_2).unwrap();
        assert_abs_diff_eq!(s.period().unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_frequencies() {
        assert!(matches!(make_sinusoid_bank(2, &[1.0, 1.0], SQRT_2), Err(Error::InvalidConfiguration(_))));
        assert!(make_sinusoid_bank(1, &[0.0], SQRT_2).is_err());
        assert!(make_sinusoid_bank(1, &[-1.0], SQRT_2).is_err());
        assert!(make_sinusoid_bank(2, &[1.0], SQRT_2).is_err());
        assert!(make_sinusoid_bank(0, &[], SQRT_2).is_err());
    }

    #[test]
    fn integer_cycle_frequencies() {
        let mode = FrequencyMode::IntegerCycles { period: 10.0, multiples: vec![1, 2, 3] };
        let f = assign_frequencies(3, &mode).unwrap();
        for (got, want) in f.iter().zip([0.1, 0.2, 0.3]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        let dup = FrequencyMode::IntegerCycles { period: 10.0, multiples: vec![1, 1] };
        assert!(assign_frequencies(2, &dup).is_err());
        assert!(assign_frequencies(4, &mode).is_err());
    }

    #[test]
    fn band_frequencies_stay_in_band() {
        let mode = FrequencyMode::Band { f_min: 1.0 / 26.0, f_max: 1.0 / 7.1 };
        let f = assign_frequencies(2, &mode).unwrap();
        assert_ne!(f[0], f[1]);
        for v in f {
            assert!((0.03846..=0.14085).contains(&v), "{v}");
        }
        let empty = FrequencyMode::Band { f_min: 0.1, f_max: 0.1 };
        assert!(assign_frequencies(1, &empty).is_err());
    }

    #[test]
    fn probe_band_is_incommensurate() {
        let mode = FrequencyMode::Band { f_min: 1.0 / 26.0, f_max: 1.0 / 7.1 };
        for n in [2, 8, 20] {
            let f = assign_frequencies(n, &mode).unwrap();
            let s = make_sinusoid_bank(n, &f, SQRT_2).unwrap();
            assert!(s.period().is_none(), "n = {n}");
        }
    }

    #[test]
    fn covariance_examples() {
        let one = make_sinusoid_bank(1, &[1.0], SQRT_2).unwrap();
        assert_abs_diff_eq!(empirical_covariance(&one, 0.0, 1.0, 1e-4)[(0, 0)], 1.0, epsilon = 1e-3);

        let two = make_sinusoid_bank(2, &[1.0, 2.0], SQRT_2).unwrap();
        assert!(identity_deviation(&empirical_covariance(&two, 0.0, 1.0, 1e-4)) < 1e-3);

        let unit = make_sinusoid_bank(1, &[1.0], 1.0).unwrap();
        assert_abs_diff_eq!(empirical_covariance(&unit, 0.0, 1.0, 1e-4)[(0, 0)], 0.5, epsilon = 1e-3);
    }

    #[test]
    fn integer_cycles_period_and_steps() {
        let s = ExplorationSignal::integer_cycles(20.0, &[1, 2, 3], SQRT_2).unwrap();
        assert_abs_diff_eq!(s.period().unwrap(), 20.0, epsilon = 1e-12);
        assert_eq!(s.period_steps(), Some(20));
        let s = ExplorationSignal::integer_cycles(20.0, &[2, 4], SQRT_2).unwrap();
        assert_abs_diff_eq!(s.period().unwrap(), 10.0, epsilon = 1e-12);
    }
}
