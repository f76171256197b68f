#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Deserialize;

use satprecode::channel::path_loss;
use satprecode::geometry::orbital_speed;
use satprecode::harness::{emit_results, noise_power, sweep, HarnessError, ResultsTable, ScenarioConfig};
use satprecode::precoder::{complexity_probe, sum_rate};

#[derive(Parser, Debug)]
#[command(
    name = "satprecode",
    version,
    about = "Multi-satellite downlink precoding with delayed CSI"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and print the results table as CSV.
    Run(Overrides),
    /// Run a scenario and write results.csv plus a plotting script.
    Sweep(Overrides),
    /// Evaluate a single model function.
    Probe {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Three-frequency sweep with the reference scenario defaults.
    #[command(name = "reproduce-fig2")]
    ReproduceFig2 {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        drops: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = "fig2")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Overrides {
    /// Scenario file (TOML); defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Carrier frequencies in Hz, comma separated.
    #[arg(long = "f", value_delimiter = ',')]
    frequencies: Option<Vec<f64>>,
    /// Cluster sizes, comma separated.
    #[arg(long = "L", value_delimiter = ',')]
    cluster_sizes: Option<Vec<usize>>,
    /// Number of users.
    #[arg(long = "K")]
    users: Option<usize>,
    #[arg(long)]
    drops: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Probe {
    /// Circular orbital speed (m/s) at an altitude (m).
    OrbitalSpeed {
        #[arg(long)]
        altitude: f64,
    },
    /// Free-space path-loss amplitude divisor.
    PathLoss {
        #[arg(long)]
        distance: f64,
        #[arg(long)]
        frequency: f64,
    },
    /// Thermal noise power (W) over a 2% bandwidth.
    NoisePower {
        #[arg(long)]
        frequency: f64,
        #[arg(long, default_value_t = 280.0)]
        temperature: f64,
    },
    /// Sum rate (bits) of a precoder read from a JSON file.
    SumRate {
        /// JSON object with `g` and `v` as rows of `[re, im]` pairs and `sigma2`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-iteration operation count of the precoder.
    Complexity {
        #[arg(long = "L")]
        satellites: u64,
        #[arg(long = "M")]
        antennas: u64,
        #[arg(long = "K")]
        users: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Usage(msg) | Failure::Runtime(msg)) = &failure;
            eprintln!("error: {msg}");
            ExitCode::from(failure.code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(o) => {
            let cfg = scenario(&o)?;
            let table = run(&cfg)?;
            if let Some(dir) = &o.out {
                write_outputs(&table, dir)?;
            }
            let stdout = io::stdout();
            table.write_csv(stdout.lock()).map_err(runtime)
        }
        Command::Sweep(o) => {
            let cfg = scenario(&o)?;
            let table = run(&cfg)?;
            write_outputs(&table, o.out.as_deref().unwrap_or(Path::new("results")))
        }
        Command::ReproduceFig2 { seed, drops, out } => {
            let mut cfg = ScenarioConfig::default();
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(drops) = drops {
                cfg.drops = drops;
            }
            cfg.validate().map_err(usage)?;
            let table = run(&cfg)?;
            write_outputs(&table, &out)
        }
        Command::Probe { probe } => run_probe(probe),
    }
}

fn scenario(o: &Overrides) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &o.config {
        Some(path) => ScenarioConfig::load(path).map_err(usage)?,
        None => ScenarioConfig::default(),
    };
    if let Some(f) = &o.frequencies {
        cfg.frequencies = f.clone();
    }
    if let Some(l) = &o.cluster_sizes {
        cfg.cluster_sizes = l.clone();
    }
    if let Some(k) = o.users {
        cfg.users = k;
    }
    if let Some(d) = o.drops {
        cfg.drops = d;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn run(cfg: &ScenarioConfig) -> Result<ResultsTable, Failure> {
    info!(
        "{} drops, seed {}, {} frequencies, cluster sizes {:?}",
        cfg.drops,
        cfg.seed,
        cfg.frequencies.len(),
        cfg.cluster_sizes
    );
    sweep(cfg).map_err(|e| match e {
        HarnessError::Invalid { .. } => usage(e),
        other => runtime(other),
    })
}

fn write_outputs(table: &ResultsTable, dir: &Path) -> Result<(), Failure> {
    let files = emit_results(table, dir).map_err(runtime)?;
    println!("{}", files.csv.display());
    println!("{}", files.plot_script.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SumRateInput {
    g: Vec<Vec<[f64; 2]>>,
    v: Vec<Vec<[f64; 2]>>,
    sigma2: f64,
}

fn complex_matrix(name: &str, rows: &[Vec<[f64; 2]>]) -> Result<DMatrix<Complex64>, Failure> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(usage(format!("`{name}` rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| {
        Complex64::new(rows[r][c][0], rows[r][c][1])
    }))
}

fn run_probe(probe: Probe) -> Result<(), Failure> {
    let value = match probe {
        Probe::OrbitalSpeed { altitude } => orbital_speed(altitude).map_err(usage)?,
        Probe::PathLoss { distance, frequency } => path_loss(distance, frequency).map_err(usage)?,
        Probe::NoisePower { frequency, temperature } => {
            if !(frequency > 0.0) {
                return Err(usage("`frequency` must be positive"));
            }
            if !(temperature > 0.0) {
                return Err(usage("`temperature` must be positive"));
            }
            noise_power(temperature, frequency)
        }
        Probe::SumRate { input } => {
            let text = fs::read_to_string(&input).map_err(|e| usage(format!("{}: {e}", input.display())))?;
            let parsed: SumRateInput =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", input.display())))?;
            let g = complex_matrix("g", &parsed.g)?;
            let v = complex_matrix("v", &parsed.v)?;
            if g.shape() != v.shape() {
                return Err(usage(format!("`g` is {:?} but `v` is {:?}", g.shape(), v.shape())));
            }
            if !(parsed.sigma2 >= 0.0) {
                return Err(usage("`sigma2` must be non-negative"));
            }
            sum_rate(&g, &v, parsed.sigma2)
        }
        Probe::Complexity {
            satellites,
            antennas,
            users,
        } => {
            if satellites == 0 || antennas == 0 || users == 0 {
                return Err(usage("`L`, `M` and `K` must be positive"));
            }
            complexity_probe(satellites, antennas, users) as f64
        }
    };
    let mut out = io::stdout().lock();
    writeln!(out, "{value:e}").map_err(runtime)
}
