use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mfpd::harness::{
    linearize, metrics_from_trace, noise_sweep, run_scenario, solve_target_trajectory, write_json, write_sweep,
    write_target, RunOptions, Scenario,
};

/// Model-free primal-dual control of a distribution feeder.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop and write trace.csv and metrics.json.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the noise standard deviation (p.u.).
        #[arg(long)]
        sigma: Option<f64>,
        /// Overrides the noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run once per noise level and write a (sigma, nrmse, avv) table.
    SweepNoise {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        sigmas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Saddle points of the linearized problem every `stride` steps.
    Target {
        scenario: PathBuf,
        #[arg(long, default_value_t = 60)]
        stride: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the metrics of a trace file.
    Metrics { trace: PathBuf, scenario: PathBuf },
    /// Feeder sensitivities at the uncontrolled operating point of a step.
    Linearize {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        at_step: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, out, sigma, seed } => {
            let mut scenario = load(&scenario)?;
            if let Some(sigma) = sigma {
                scenario = scenario.with_sigma(sigma);
            }
            if let Some(seed) = seed {
                scenario.config.noise.seed = seed;
            }
            let dir = out.unwrap_or_else(|| scenario.config.output_dir.clone());
            log::info!("running {} steps into {}", scenario.steps(), dir.display());
            let run = run_scenario(&scenario, &RunOptions { output_dir: Some(dir), keep_records: false })?;
            println!("{}", serde_json::to_string_pretty(&run.metrics)?);
        }
        Command::SweepNoise { scenario, sigmas, out } => {
            let scenario = load(&scenario)?;
            let rows = noise_sweep(&scenario, &sigmas)?;
            let dir = out.unwrap_or_else(|| scenario.config.output_dir.clone());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("noise_sweep.csv");
            write_sweep(&path, &rows)?;
            println!("sigma,nrmse,avv");
            for row in &rows {
                println!("{},{:.6},{:.3e}", row.sigma, row.nrmse, row.avv);
            }
            log::info!("wrote {}", path.display());
        }
        Command::Target { scenario, stride, out } => {
            let scenario = load(&scenario)?;
            let points = solve_target_trajectory(&scenario, stride)?;
            let dir = out.unwrap_or_else(|| scenario.config.output_dir.clone());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("target.csv");
            write_target(&path, &scenario, &points)?;
            log::info!("wrote {} saddle points to {}", points.len(), path.display());
        }
        Command::Metrics { trace, scenario } => {
            let scenario = load(&scenario)?;
            let metrics = metrics_from_trace(&trace, &scenario)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Linearize { scenario, at_step, out } => {
            let scenario = load(&scenario)?;
            let lin = linearize(&scenario, at_step)?;
            let dir = out.unwrap_or_else(|| scenario.config.output_dir.clone());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let inputs: Vec<String> =
                scenario.ders.iter().flat_map(|d| [format!("p_{}", d.label), format!("q_{}", d.label)]).collect();
            let mut outputs: Vec<String> = scenario.feeder.labels()[1..].iter().map(|l| format!("v_{l}")).collect();
            outputs.push("p0".into());
            if lin.jacobian.nrows() != outputs.len() {
                bail!("sensitivity matrix has {} rows for {} outputs", lin.jacobian.nrows(), outputs.len());
            }
            let path = dir.join(format!("linearization_{at_step}.csv"));
            let mut table = format!("output,y0,{}\n", inputs.join(","));
            for (i, name) in outputs.iter().enumerate() {
                let row: Vec<String> = lin.jacobian.row(i).iter().map(f64::to_string).collect();
                table.push_str(&format!("{name},{},{}\n", lin.y[i], row.join(",")));
            }
            std::fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?;
            write_json(&dir.join(format!("linearization_{at_step}_point.json")), &lin.x)?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading scenario {}", path.display()))
}
