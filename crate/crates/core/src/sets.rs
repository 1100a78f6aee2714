//! Feasible sets and Euclidean projections onto them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stopping tolerance for the alternating projection onto box ∩ disc.
pub const DYKSTRA_TOL: f64 = 1e-10;
pub const DYKSTRA_MAX_SWEEPS: usize = 500;

/// Default upper cap for every dual multiplier.
pub const DEFAULT_DUAL_CAP: f64 = 100.0;

/// Axis-aligned box `lower ≤ z ≤ upper`. Infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidArgument("box bounds differ in length".into()));
        }
        if let Some(i) = lower.iter().zip(&upper).position(|(l, u)| !(l <= u)) {
            return Err(Error::InfeasibleSet(format!(
                "box component {i}: lower {} exceeds upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(BoxSet { lower, upper })
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn unbounded(n: usize) -> Self {
        BoxSet { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        z.len() == self.dim()
            && z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }
}

/// Closed disc `p² + q² ≤ radius²` centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    radius: f64,
}

impl Disc {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InfeasibleSet(format!("disc radius must be non-negative, got {radius}")));
        }
        Ok(Disc { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, pq: [f64; 2], tol: f64) -> bool {
        pq[0].hypot(pq[1]) <= self.radius + tol
    }
}

/// `{(p, q) : p_min ≤ p ≤ p_max, p² + q² ≤ S̄²}`: the operating region of an
/// inverter-interfaced device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDiscSet {
    pub p_min: f64,
    pub p_max: f64,
    pub disc: Disc,
}

impl BoxDiscSet {
    pub fn new(p_min: f64, p_max: f64, radius: f64) -> Result<Self> {
        if !(p_min <= p_max) {
            return Err(Error::InfeasibleSet(format!("active-power interval [{p_min}, {p_max}] is empty")));
        }
        Ok(BoxDiscSet { p_min, p_max, disc: Disc::new(radius)? })
    }

    pub fn is_empty(&self) -> bool {
        let r = self.disc.radius;
        self.p_max < -r || self.p_min > r || self.p_min > self.p_max
    }

    pub fn contains(&self, pq: [f64; 2], tol: f64) -> bool {
        pq[0] >= self.p_min - tol && pq[0] <= self.p_max + tol && self.disc.contains(pq, tol)
    }
}

/// Dual feasible set `0 ≤ λ_j ≤ cap_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualBox {
    caps: Vec<f64>,
}

impl DualBox {
    pub fn new(caps: Vec<f64>) -> Result<Self> {
        if let Some(c) = caps.iter().find(|c| !(**c >= 0.0)) {
            return Err(Error::InvalidArgument(format!("dual caps must be non-negative, got {c}")));
        }
        Ok(DualBox { caps })
    }

    pub fn uniform(m: usize, cap: f64) -> Result<Self> {
        Self::new(vec![cap; m])
    }

    pub fn dim(&self) -> usize {
        self.caps.len()
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }
}

pub fn project_box(z: &[f64], set: &BoxSet) -> Vec<f64> {
    debug_assert_eq!(z.len(), set.dim());
    z.iter().zip(set.lower.iter().zip(&set.upper)).map(|(v, (l, u))| v.max(*l).min(*u)).collect()
}

pub fn project_disc(pq: [f64; 2], disc: &Disc) -> [f64; 2] {
    let norm = pq[0].hypot(pq[1]);
    if norm <= disc.radius {
        pq
    } else if norm == 0.0 {
        [0.0, 0.0]
    } else {
        let scale = disc.radius / norm;
        [pq[0] * scale, pq[1] * scale]
    }
}

fn clamp_p(pq: [f64; 2], set: &BoxDiscSet) -> [f64; 2] {
    [pq[0].max(set.p_min).min(set.p_max), pq[1]]
}

/// Projection onto box ∩ disc by Dykstra's alternating projection.
///
/// Near tangency between the disc and a box face the sweeps converge
/// sublinearly; the result is then settled by the exact boundary candidate.
pub fn project_box_disc(pq: [f64; 2], set: &BoxDiscSet) -> Result<[f64; 2]> {
    if set.is_empty() {
        return Err(Error::InfeasibleSet(format!(
            "p-interval [{}, {}] misses the disc of radius {}",
            set.p_min, set.p_max, set.disc.radius
        )));
    }
    if set.contains(pq, FEASIBLE_SLACK) {
        return Ok(pq);
    }
    let dykstra = dykstra_box_disc(pq, set).map(|x| snap_box_disc(x, set));
    let exact = nearest_boundary_point(pq, set);
    let dist = |u: [f64; 2]| (u[0] - pq[0]).hypot(u[1] - pq[1]);
    match dykstra {
        Ok(x) if set.contains(x, 1e-9) && dist(x) <= dist(exact) + 1e-12 => Ok(x),
        Ok(_) | Err(Error::Numeric { .. }) => {
            log::debug!("box-disc projection of {pq:?} settled by boundary enumeration");
            if set.contains(exact, 1e-9) {
                Ok(exact)
            } else {
                Err(Error::Numeric { context: "box-disc projection".into(), iterations: DYKSTRA_MAX_SWEEPS })
            }
        }
        Err(e) => Err(e),
    }
}

/// Round-off slack under which a point counts as already inside box ∩ disc.
const FEASIBLE_SLACK: f64 = 1e-12;

fn snap_box_disc(pq: [f64; 2], set: &BoxDiscSet) -> [f64; 2] {
    let r = set.disc.radius;
    let p = pq[0].clamp(set.p_min.max(-r), set.p_max.min(r));
    let q_max = (r * r - p * p).max(0.0).sqrt();
    [p, pq[1].clamp(-q_max, q_max)]
}

/// Alternating projection with correction terms.
pub fn dykstra_box_disc(pq: [f64; 2], set: &BoxDiscSet) -> Result<[f64; 2]> {
    let mut x = pq;
    let mut box_corr = [0.0; 2];
    let mut disc_corr = [0.0; 2];
    for sweep in 1..=DYKSTRA_MAX_SWEEPS {
        let y = clamp_p([x[0] + box_corr[0], x[1] + box_corr[1]], set);
        box_corr = [x[0] + box_corr[0] - y[0], x[1] + box_corr[1] - y[1]];
        let next = project_disc([y[0] + disc_corr[0], y[1] + disc_corr[1]], &set.disc);
        disc_corr = [y[0] + disc_corr[0] - next[0], y[1] + disc_corr[1] - next[1]];

        let moved = (next[0] - x[0]).hypot(next[1] - x[1]);
        let gap = (next[0] - y[0]).hypot(next[1] - y[1]);
        x = next;
        if sweep > 1 && moved < DYKSTRA_TOL && gap < DYKSTRA_TOL {
            return Ok(x);
        }
    }
    Err(Error::Numeric { context: "box-disc projection".into(), iterations: DYKSTRA_MAX_SWEEPS })
}

/// Nearest point among the set itself (if `pq` is feasible), the radial
/// projection (if it lies within the p-interval) and the two face segments.
fn nearest_boundary_point(pq: [f64; 2], set: &BoxDiscSet) -> [f64; 2] {
    let r = set.disc.radius;
    let mut candidates = Vec::with_capacity(3);
    let radial = project_disc(pq, &set.disc);
    if radial[0] >= set.p_min && radial[0] <= set.p_max {
        candidates.push(radial);
    }
    for p in [set.p_min.max(-r), set.p_max.min(r)] {
        let q_max = (r * r - p * p).max(0.0).sqrt();
        candidates.push([p, pq[1].clamp(-q_max, q_max)]);
    }
    let dist = |u: &[f64; 2]| (u[0] - pq[0]).hypot(u[1] - pq[1]);
    candidates.into_iter().min_by(|a, b| dist(a).total_cmp(&dist(b))).expect("face candidates always present")
}

/// Clamp to `[0, cap_j]`.
pub fn project_dual(lambda: &[f64], set: &DualBox) -> Vec<f64> {
    debug_assert_eq!(lambda.len(), set.dim());
    lambda.iter().zip(&set.caps).map(|(l, c)| l.max(0.0).min(*c)).collect()
}

/// One block of a product set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrimalSet {
    Box(BoxSet),
    BoxDisc(BoxDiscSet),
}

impl PrimalSet {
    pub fn dim(&self) -> usize {
        match self {
            PrimalSet::Box(b) => b.dim(),
            PrimalSet::BoxDisc(_) => 2,
        }
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            PrimalSet::Box(b) => Ok(project_box(z, b)),
            PrimalSet::BoxDisc(s) => Ok(project_box_disc([z[0], z[1]], s)?.to_vec()),
        }
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        match self {
            PrimalSet::Box(b) => b.contains(z, tol),
            PrimalSet::BoxDisc(s) => z.len() == 2 && s.contains([z[0], z[1]], tol),
        }
    }
}

/// Cartesian product `X₁ × … × X_N`, blocks laid out consecutively.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProductSet {
    blocks: Vec<PrimalSet>,
}

impl ProductSet {
    pub fn new(blocks: Vec<PrimalSet>) -> Self {
        ProductSet { blocks }
    }

    pub fn single(block: PrimalSet) -> Self {
        ProductSet { blocks: vec![block] }
    }

    pub fn blocks(&self) -> &[PrimalSet] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(PrimalSet::dim).sum()
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "vector of length {} does not match set dimension {}",
                z.len(),
                self.dim()
            )));
        }
        let mut out = Vec::with_capacity(z.len());
        let mut offset = 0;
        for block in &self.blocks {
            let d = block.dim();
            out.extend(block.project(&z[offset..offset + d])?);
            offset += d;
        }
        Ok(out)
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        if z.len() != self.dim() {
            return false;
        }
        let mut offset = 0;
        self.blocks.iter().all(|b| {
            let d = b.dim();
            let ok = b.contains(&z[offset..offset + d], tol);
            offset += d;
            ok
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Nearest point of the set sampled on a lattice of pitch `h`, each
    /// lattice row and column completed with its arc endpoints.
    fn grid_projection(pq: [f64; 2], set: &BoxDiscSet, h: f64) -> [f64; 2] {
        let r = set.disc.radius();
        let (p_lo, p_hi) = (set.p_min.max(-r), set.p_max.min(r));
        let mut candidates = Vec::new();
        let np = ((p_hi - p_lo) / h).floor() as i64;
        for p in (0..=np).map(|i| p_lo + i as f64 * h).chain([p_hi]) {
            let q_max = (r * r - p * p).max(0.0).sqrt();
            let nq = (q_max / h).floor() as i64;
            candidates.extend((-nq..=nq).map(|j| [p, j as f64 * h]).chain([[p, -q_max], [p, q_max]]));
        }
        let nq = (r / h).floor() as i64;
        for q in (-nq..=nq).map(|j| j as f64 * h) {
            let p_arc = (r * r - q * q).max(0.0).sqrt();
            candidates.extend([[p_arc, q], [-p_arc, q]].into_iter().filter(|c| c[0] >= p_lo && c[0] <= p_hi));
        }
        let dist = |c: &[f64; 2]| (c[0] - pq[0]).powi(2) + (c[1] - pq[1]).powi(2);
        candidates.into_iter().min_by(|a, b| dist(a).total_cmp(&dist(b))).expect("non-empty set")
    }

    #[test]
    fn box_examples() {
        let b = BoxSet::uniform(2, -1.0, 1.0).unwrap();
        assert_eq!(project_box(&[2.0, -3.0], &b), vec![1.0, -1.0]);
        let b = BoxSet::uniform(1, 0.0, 1.0).unwrap();
        assert_eq!(project_box(&[0.5], &b), vec![0.5]);
        let b = BoxSet::uniform(1, 0.0, 0.0).unwrap();
        assert_eq!(project_box(&[-0.2], &b), vec![0.0]);
        assert!(BoxSet::uniform(1, 1.0, 0.0).is_err());
    }

    #[test]
    fn disc_examples() {
        let d = Disc::new(1.0).unwrap();
        let p = project_disc([3.0, 4.0], &d);
        assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.8, epsilon = 1e-15);
        assert_eq!(project_disc([0.1, 0.1], &d), [0.1, 0.1]);
        assert_eq!(project_disc([0.0, 0.0], &Disc::new(0.0).unwrap()), [0.0, 0.0]);
        assert!(Disc::new(-1.0).is_err());
    }

    #[test]
    fn box_disc_examples() {
        let set = BoxDiscSet::new(0.0, 1.0, 1.0).unwrap();
        let p = project_box_disc([2.0, 2.0], &set).unwrap();
        assert_abs_diff_eq!(p[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-9);

        assert_eq!(project_box_disc([0.5, 0.2], &set).unwrap(), [0.5, 0.2]);

        let p = project_box_disc([-1.0, 0.0], &set).unwrap();
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-9);

        // frozen grid-search answers for the two non-trivial cases
        let g = grid_projection([2.0, 2.0], &set, 1e-3);
        assert_abs_diff_eq!(g[0], 0.707, epsilon = 2e-3);
        assert_abs_diff_eq!(g[1], 0.707, epsilon = 2e-3);
        let g = grid_projection([-1.0, 0.0], &set, 1e-3);
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 2e-3);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 2e-3);
    }

    #[test]
    fn box_disc_rejects_empty() {
        let set = BoxDiscSet::new(2.0, 3.0, 1.0).unwrap();
        assert!(matches!(project_box_disc([0.0, 0.0], &set), Err(Error::InfeasibleSet(_))));
    }

    #[test]
    fn night_time_pv_segment() {
        let set = BoxDiscSet::new(0.0, 0.0, 0.2).unwrap();
        let p = project_box_disc([0.3, 0.5], &set).unwrap();
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(p[1], 0.2, epsilon = 1e-9);
    }

    #[test]
    fn dual_examples() {
        let d = DualBox::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(project_dual(&[-0.5, 2.0], &d), vec![0.0, 1.0]);
        assert_eq!(project_dual(&[0.3], &DualBox::new(vec![100.0]).unwrap()), vec![0.3]);
        assert_eq!(project_dual(&[5.0], &DualBox::new(vec![0.0]).unwrap()), vec![0.0]);
    }

    #[test]
    fn product_set_blocks() {
        let set = ProductSet::new(vec![
            PrimalSet::Box(BoxSet::uniform(1, 0.0, 1.0).unwrap()),
            PrimalSet::BoxDisc(BoxDiscSet::new(-1.0, 1.0, 1.0).unwrap()),
        ]);
        assert_eq!(set.dim(), 3);
        let p = set.project(&[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert_abs_diff_eq!(p[1], 0.6, epsilon = 1e-9);
        assert_abs_diff_eq!(p[2], 0.8, epsilon = 1e-9);
        assert!(set.contains(&p, 1e-9));
        assert!(set.project(&[1.0]).is_err());
    }

    fn box_disc_strategy() -> impl Strategy<Value = BoxDiscSet> {
        (0.05f64..3.0, -1.2f64..1.2, 0.0f64..1.5).prop_filter_map("empty", |(r, lo_frac, width)| {
            let lo = lo_frac * r;
            let set = BoxDiscSet::new(lo, lo + width * r, r).ok()?;
            (!set.is_empty()).then_some(set)
        })
    }

    proptest! {
        #[test]
        fn box_disc_matches_grid_oracle(set in box_disc_strategy(), p in -4.0f64..4.0, q in -4.0f64..4.0) {
            let got = project_box_disc([p, q], &set).unwrap();
            prop_assert!(set.contains(got, 1e-9));
            let want = grid_projection([p, q], &set, 1e-3);
            // both are nearest points; compare distances, and positions when unique
            let d_got = (got[0] - p).hypot(got[1] - q);
            let d_want = (want[0] - p).hypot(want[1] - q);
            prop_assert!(d_got <= d_want + 1e-12, "dykstra {got:?} farther than grid {want:?}");
            prop_assert!((got[0] - want[0]).abs() < 2e-3 && (got[1] - want[1]).abs() < 2e-3,
                "dykstra {got:?} vs grid {want:?}");
        }

        #[test]
        fn projections_are_idempotent(set in box_disc_strategy(), p in -4.0f64..4.0, q in -4.0f64..4.0,
                                      z in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let once = project_box_disc([p, q], &set).unwrap();
            let twice = project_box_disc(once, &set).unwrap();
            prop_assert!((once[0] - twice[0]).abs() < 1e-12 && (once[1] - twice[1]).abs() < 1e-12);

            let b = BoxSet::new(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 2.0]).unwrap();
            let pb = project_box(&z, &b);
            prop_assert_eq!(project_box(&pb, &b), pb);

            let d = Disc::new(set.disc.radius()).unwrap();
            let pd = project_disc([p, q], &d);
            let pdd = project_disc(pd, &d);
            prop_assert!((pd[0] - pdd[0]).abs() < 1e-12 && (pd[1] - pdd[1]).abs() < 1e-12);

            let db = DualBox::new(vec![1.0, 0.0, 3.0]).unwrap();
            let pl = project_dual(&z, &db);
            prop_assert_eq!(project_dual(&pl, &db), pl);
        }

        #[test]
        fn projections_are_non_expansive(set in box_disc_strategy(),
                                         a in proptest::array::uniform2(-4.0f64..4.0),
                                         b in proptest::array::uniform2(-4.0f64..4.0)) {
            let dist = |u: [f64; 2], v: [f64; 2]| (u[0] - v[0]).hypot(u[1] - v[1]);
            let pa = project_box_disc(a, &set).unwrap();
            let pb = project_box_disc(b, &set).unwrap();
            prop_assert!(dist(pa, pb) <= dist(a, b) + 1e-9);
            prop_assert!(dist(project_disc(a, &set.disc), project_disc(b, &set.disc)) <= dist(a, b) + 1e-12);
            let bx = BoxSet::uniform(2, -0.5, 0.7).unwrap();
            let (ba, bb) = (project_box(&a, &bx), project_box(&b, &bx));
            prop_assert!(dist([ba[0], ba[1]], [bb[0], bb[1]]) <= dist(a, b) + 1e-12);
            let db = DualBox::new(vec![1.0, 2.0]).unwrap();
            let (la, lb) = (project_dual(&a, &db), project_dual(&b, &db));
            prop_assert!(dist([la[0], la[1]], [lb[0], lb[1]]) <= dist(a, b) + 1e-12);
        }
    }
}
