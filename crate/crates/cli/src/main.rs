//! `nlkg`: command-line driver for the radial focusing cubic Klein-Gordon lab.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
//! failure (including a failed verdict of `spectrum` or `audit`).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Datum, Directions, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<nlkg::Error> for CliError {
    fn from(e: nlkg::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("output: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Numerical(format!("serialization: {e}"))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nlkg", version, about = "Radial focusing cubic Klein-Gordon dynamics near the ground state")]
struct Cli {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    r_max: Option<f64>,
    /// Number of grid nodes.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Largest time step.
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    #[value(name = "aQ")]
    ScaledQ,
    Modal,
    Gaussian,
}

#[derive(Debug, Args)]
struct DatumArgs {
    /// Family of the initial datum.
    #[arg(long)]
    data: Option<DataKind>,
    /// Multiple of Q for `--data aQ`.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    lam: Option<f64>,
    #[arg(long)]
    lamdot: Option<f64>,
    #[arg(long)]
    amp: Option<f64>,
    #[arg(long)]
    center: Option<f64>,
    #[arg(long)]
    width: Option<f64>,
}

impl DatumArgs {
    fn apply(&self, d: &mut Datum) {
        match self.data {
            Some(DataKind::ScaledQ) => *d = Datum::ScaledQ { a: self.a.unwrap_or(1.0) },
            Some(DataKind::Modal) => *d = Datum::Modal { lam: self.lam.unwrap_or(0.0), lamdot: self.lamdot.unwrap_or(0.0) },
            Some(DataKind::Gaussian) => {
                *d = Datum::Gaussian { amp: self.amp.unwrap_or(1.0), center: self.center.unwrap_or(0.0), width: self.width.unwrap_or(1.0) }
            }
            None => {}
        }
        // bare parameter flags adjust the configured datum of the same family
        match d {
            Datum::ScaledQ { a } => *a = self.a.unwrap_or(*a),
            Datum::Modal { lam, lamdot } => {
                *lam = self.lam.unwrap_or(*lam);
                *lamdot = self.lamdot.unwrap_or(*lamdot);
            }
            Datum::Gaussian { amp, center, width } => {
                *amp = self.amp.unwrap_or(*amp);
                *center = self.center.unwrap_or(*center);
                *width = self.width.unwrap_or(*width);
            }
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for Q (or load it from the cache) and print J(Q), Q(0), residual.
    GroundState,
    /// Unstable rate k, negative count of L+ and Birman-Schwinger eigenvalues.
    Spectrum {
        /// Also solve at twice the resolution and extrapolate in h^2.
        #[arg(long)]
        extrapolate: bool,
    },
    /// Evolve one datum and write its trajectory.
    Evolve {
        #[command(flatten)]
        datum: DatumArgs,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
    },
    /// Fates in both time directions and the resulting set of the classification.
    Classify {
        #[command(flatten)]
        datum: DatumArgs,
    },
    /// One datum for each of the nine fate pairs.
    Witnesses {
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Forward fates over a square grid of modal data.
    Portrait {
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// The two threshold solutions W+ and W-.
    Threshold {
        /// |s| of the datum Q + s rho.
        #[arg(long)]
        s: Option<f64>,
    },
    /// One-pass audit over a random ensemble plus pure-mode ejection fits.
    Audit {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        max_batches: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Forward,
    Backward,
    Both,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(r) = cli.r_max {
        cfg.grid.r_max = r;
    }
    if let Some(n) = cli.n {
        cfg.grid.n = n;
    }
    if let Some(dt) = cli.dt {
        cfg.integrator.dt_max = dt;
    }
    if let Some(h) = cli.horizon {
        cfg.horizon = h;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let e = &mut cfg.experiment;
    match &cli.command {
        Command::Evolve { datum, direction } => {
            datum.apply(&mut e.datum);
            if let Some(d) = direction {
                e.direction = match d {
                    DirectionArg::Forward => Directions::Forward,
                    DirectionArg::Backward => Directions::Backward,
                    DirectionArg::Both => Directions::Both,
                };
            }
        }
        Command::Classify { datum } => {
            datum.apply(&mut e.datum);
        }
        Command::Witnesses { theta, eps } => {
            e.theta = theta.unwrap_or(e.theta);
            e.eps = eps.or(e.eps);
        }
        Command::Portrait { side, theta, eps } => {
            e.portrait_side = side.unwrap_or(e.portrait_side);
            e.theta = theta.unwrap_or(e.theta);
            e.eps = eps.or(e.eps);
        }
        Command::Threshold { s } => e.w_amplitude = s.unwrap_or(e.w_amplitude),
        Command::Audit { count, max_batches } => {
            e.ensemble_size = count.unwrap_or(e.ensemble_size);
            e.max_batches = max_batches.unwrap_or(e.max_batches);
        }
        Command::GroundState | Command::Spectrum { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    cfg.write_resolved()?;
    match &cli.command {
        Command::GroundState => commands::ground_state(&cfg),
        Command::Spectrum { extrapolate } => commands::spectrum(&cfg, *extrapolate),
        Command::Evolve { .. } => commands::evolve(&cfg),
        Command::Classify { .. } => commands::classify(&cfg),
        Command::Witnesses { .. } => commands::witnesses(&cfg),
        Command::Portrait { .. } => commands::portrait(&cfg),
        Command::Threshold { .. } => commands::threshold(&cfg),
        Command::Audit { .. } => commands::audit(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
