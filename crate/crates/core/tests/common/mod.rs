//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mfpd::engine::{model_free_step, ClosureProblem, PrimalDualState, ProbeOptions, StepSizes};
use mfpd::plant::LinearPlant;
use mfpd::sets::{BoxSet, PrimalSet, ProductSet};
use mfpd::signals::ExplorationSignal;
use nalgebra::DMatrix;

pub const BENCH_REG: f64 = 0.1;
pub const BENCH_PERIOD: usize = 20;

/// `e^y − 2y` observed through `y = x`, regularized by `p = 0.1`.
pub fn scalar_benchmark() -> ClosureProblem {
    let set = ProductSet::single(PrimalSet::Box(BoxSet::uniform(1, -5.0, 5.0).unwrap()));
    ClosureProblem::new(set, BENCH_REG, 0.0)
        .unwrap()
        .output(|_, y: &[f64]| y[0].exp() - 2.0 * y[0], Some(Box::new(|_, y: &[f64]| vec![y[0].exp() - 2.0])))
}

/// Root of `e^x − 2 + p x`.
pub fn scalar_benchmark_optimum() -> f64 {
    let mut x = 0.5_f64;
    for _ in 0..50 {
        x -= (x.exp() - 2.0 + BENCH_REG * x) / (x.exp() + BENCH_REG);
    }
    x
}

/// Steady error of the noiseless model-free loop started at the optimum:
/// `(max |x − x*|, mean (x − x*))` over the last ten periods.
pub fn scalar_benchmark_error(alpha: f64, epsilon: f64, periods: usize) -> (f64, f64) {
    let problem = scalar_benchmark();
    let plant = LinearPlant::static_gain(DMatrix::identity(1, 1));
    let signal = ExplorationSignal::integer_cycles(BENCH_PERIOD as f64, &[1], std::f64::consts::SQRT_2).unwrap();
    let sizes = StepSizes::uniform(1, 0, alpha, 1.0, epsilon).unwrap();
    let probe = ProbeOptions::default();
    let x_star = scalar_benchmark_optimum();
    let mut state = PrimalDualState::new(vec![x_star], Vec::new());
    let steps = periods * BENCH_PERIOD;
    let tail = steps - 10 * BENCH_PERIOD;
    let (mut worst, mut sum) = (0.0_f64, 0.0);
    for k in 0..steps {
        state = model_free_step(&state, &problem, &plant, &signal, &sizes, &probe).unwrap().0;
        if k >= tail {
            let e = state.x[0] - x_star;
            worst = worst.max(e.abs());
            sum += e;
        }
    }
    (worst, sum / (steps - tail) as f64)
}

pub fn core_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn bundled_scenario(name: &str) -> PathBuf {
    core_dir().join("scenarios").join(format!("{name}.toml"))
}

pub fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

use mfpd::sets::DualBox;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const QP_CAP: f64 = 50.0;

/// Random strongly convex QP with `n` inputs observed through a static
/// linear plant:
/// `½xᵀQx + qᵀx + ½‖y − r‖²` subject to `Gy ≤ h`, `x ∈ [−3, 3]ⁿ`.
pub fn random_qp(seed: u64, p: f64, d: f64) -> (ClosureProblem, LinearPlant) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=5);
    let outputs = rng.gen_range(2..=4);
    let m = rng.gen_range(1..=3);
    let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let b = normal(n, n);
    let q_mat = b.transpose() * &b + DMatrix::identity(n, n) * 0.1;
    let q_vec = normal(n, 1).column(0).into_owned();
    let c = normal(outputs, n);
    let offset = normal(outputs, 1).column(0).into_owned();
    let target = normal(outputs, 1).column(0).into_owned();
    let g = normal(m, outputs);
    let h = normal(m, 1).column(0).map(|v| v - 0.5);

    let set = ProductSet::single(PrimalSet::Box(BoxSet::uniform(n, -3.0, 3.0).unwrap()));
    let (q1, q2, qv1, qv2) = (q_mat.clone(), q_mat, q_vec.clone(), q_vec);
    let (r1, r2) = (target.clone(), target);
    let (g1, g2, h1) = (g.clone(), g, h);
    let problem = ClosureProblem::new(set, p, d)
        .unwrap()
        .local(
            move |_, x: &[f64]| {
                let x = DVector::from_column_slice(x);
                0.5 * x.dot(&(&q1 * &x)) + qv1.dot(&x)
            },
            move |_, x: &[f64]| (&q2 * DVector::from_column_slice(x) + &qv2).as_slice().to_vec(),
        )
        .output(
            move |_, y: &[f64]| 0.5 * (DVector::from_column_slice(y) - &r1).norm_squared(),
            Some(Box::new(move |_, y: &[f64]| (DVector::from_column_slice(y) - &r2).as_slice().to_vec())),
        )
        .constrained(
            DualBox::uniform(m, QP_CAP).unwrap(),
            move |_, y: &[f64]| (&g1 * DVector::from_column_slice(y) - &h1).as_slice().to_vec(),
            Some(Box::new(move |_, _: &[f64]| g2.clone())),
        );
    let plant = LinearPlant::new(c, DMatrix::zeros(outputs, 0), offset, Vec::new()).unwrap();
    (problem, plant)
}

/// Overrides for [`small_scenario`].
pub struct Small<'a> {
    /// Fleet table rows after the header.
    pub fleet: &'a str,
    /// Load at node 2, MW and MVAr.
    pub load: (f64, f64),
    pub pv_mw: f64,
    pub reference_mw: f64,
    pub steps: usize,
    /// Appended verbatim to the TOML file; may add keys to any table
    /// declared here (`[algorithm]`, `[noise]`, `[voltage]`).
    pub algorithm: &'a str,
    pub noise: &'a str,
    pub voltage: &'a str,
}

impl Default for Small<'_> {
    fn default() -> Self {
        Small {
            fleet: "2,battery,1.0,-1,1,0,2,1.4,0.9,0.05,0.05,0.05,0.02,0.02\n1,pv,0.5,,,,,,,,,,0.02,0.02\n",
            load: (1.2, 0.5),
            pv_mw: 0.3,
            reference_mw: 0.8,
            steps: 600,
            algorithm: "alpha_voltage = 1.0",
            noise: "sigma = 0.0",
            voltage: "",
        }
    }
}

pub const FLEET_HEADER: &str =
    "node,kind,s_max_mva,p_min_mw,p_max_mw,soc_min_mwh,soc_max_mwh,soc_init_mwh,efficiency,c_p,c_q,c_p_ref,alpha_p,alpha_q\n";

/// Three-bus feeder on a 1 MVA base with constant profiles; returns the
/// scenario path.
pub fn small_scenario(dir: &Path, o: &Small) -> PathBuf {
    write(&dir.join("feeder.csv"), "from,to,r_pu,x_pu\n0,1,0.02,0.04\n1,2,0.03,0.05\n");
    write(&dir.join("fleet.csv"), &format!("{FLEET_HEADER}{}", o.fleet));
    write(
        &dir.join("loads.csv"),
        &format!("t_seconds,node,p_MW,q_MVAr\n0,1,0.2,0.05\n0,2,{},{}\n", o.load.0, o.load.1),
    );
    write(&dir.join("pv.csv"), &format!("t_seconds,node,p_available_MW\n0,1,{}\n", o.pv_mw));
    let toml = format!(
        r#"output_dir = "out"

[time]
t_start = 0.0
t_end = {steps}.0
dt = 1.0

[feeder]
file = "feeder.csv"
slack = "0"
s_base_mva = 1.0

[fleet]
file = "fleet.csv"

[profiles]
loads = "loads.csv"
pv = "pv.csv"

[reference]
points = [[0.0, {reference}]]

[algorithm]
epsilon = 0.01
{algorithm}

[noise]
{noise}

[voltage]
{voltage}
"#,
        steps = o.steps,
        reference = o.reference_mw,
        algorithm = o.algorithm,
        noise = o.noise,
        voltage = o.voltage,
    );
    let path = dir.join("small.toml");
    write(&path, &toml);
    path
}
