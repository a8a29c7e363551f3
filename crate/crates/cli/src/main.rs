mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spinpair::ensemble::NormalizationScope;
use spinpair::{Mechanism, PropagationMethod, SpinError, TimeGrid};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "spinpair", version, about = "Singlet-pair spin dynamics of 31P nuclei in paired clusters")]
struct Cli {
    /// Worker threads for batch and ensemble runs.
    #[arg(long, global = true, env = "SPINPAIR_THREADS")]
    threads: Option<usize>,

    /// Increase log verbosity (repeatable); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

/// Simulation settings shared by every command that propagates a structure.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Run configuration file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, value_enum)]
    relaxation: Option<Toggle>,

    /// Comma-separated relaxation mechanisms (dipolar, csa); needs relaxation on.
    #[arg(long, value_delimiter = ',')]
    mechanisms: Option<Vec<Mechanism>>,

    /// `linear:END:STEPS` or `piecewise:SPLIT:FINE:END:COARSE`, in seconds.
    #[arg(long)]
    grid: Option<TimeGrid>,

    /// Initial singlet pair as `iA,iB` (zero-based sites in molecules A and B).
    #[arg(long, value_parser = parse_pair)]
    pair: Option<(usize, usize)>,

    /// Propagation engine: eig or krylov.
    #[arg(long)]
    method: Option<PropagationMethod>,

    /// Seed for randomized orientation grids.
    #[arg(long)]
    orientation_seed: Option<u64>,

    /// Override the structure's field, in microtesla.
    #[arg(long)]
    field_ut: Option<f64>,

    /// Skip the concurrence column.
    #[arg(long)]
    no_concurrence: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Singlet probability and concurrence of one structure.
    Simulate {
        /// Structure file or bundled fixture name.
        structure: String,
        #[command(flatten)]
        run: RunArgs,
        /// Output series file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// First and last threshold crossings of a series or a structure.
    Crossings {
        /// Series file, structure file, or fixture name.
        input: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Entanglement yield of a series or a structure.
    Yield {
        /// Series file, structure file, or fixture name.
        input: String,
        /// Sampling rate constant in 1/s.
        #[arg(long)]
        k: Option<f64>,
        /// Integration horizon in seconds.
        #[arg(long)]
        horizon: Option<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Cross-pair transfer grid: one series per (source, probe) pair plus a manifest.
    Transfer {
        structure: String,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "transfer")]
        out: PathBuf,
    },
    /// Every structure file in a directory, summarized as JSON.
    Batch {
        dir: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Summary file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entanglement yield against spin count for random coupling networks.
    Ensemble {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Root-sum-square coupling norm in Hz.
        #[arg(long, default_value_t = 1.0)]
        norm_hz: f64,
        /// all_pairs or per_row.
        #[arg(long, default_value_t = NormalizationScope::AllPairs)]
        scope: NormalizationScope,
        #[command(flatten)]
        run: RunArgs,
        /// Table file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Upper bound on distinct oscillation frequencies for n energy levels.
    Freqbound {
        #[arg(long)]
        levels: u64,
    },
    /// Factorized-versus-direct and cross-engine validation on random systems.
    OracleCheck {
        #[arg(long, default_value_t = 3)]
        max_spins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        cases: usize,
    },
    /// Diffusive traversal time L^2 / 2D.
    Diffusion {
        /// Diffusion coefficient in m^2/s.
        #[arg(long)]
        d: f64,
        /// Distance in m.
        #[arg(long)]
        length: f64,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("`{s}` is not `iA,iB`"))?;
    let site = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("bad site `{x}` in `{s}`"));
    Ok((site(a)?, site(b)?))
}

/// Failure classes mapped onto exit statuses.
#[derive(Debug)]
pub enum CliError {
    /// Bad input or usage: exit 2.
    Input(String),
    /// A computation or validation failed: exit 1.
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<SpinError> for CliError {
    fn from(e: SpinError) -> Self {
        match e {
            SpinError::Parse { .. }
            | SpinError::Io(_)
            | SpinError::MissingInput(_)
            | SpinError::InvalidArgument(_)
            | SpinError::InvalidSystem(_)
            | SpinError::SiteOutOfRange { .. }
            | SpinError::SpinCount(_)
            | SpinError::CoincidentNuclei(..)
            | SpinError::NoMechanism
            | SpinError::OracleCap { .. }
            | SpinError::ShortSeries { .. } => CliError::Input(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        Some(0) => Err(CliError::Input("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(format!("thread pool: {e}"))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Simulate { structure, run, out } => commands::simulate(&structure, &run, out.as_deref()),
        Command::Crossings { input, threshold, run } => commands::crossings(&input, threshold, &run),
        Command::Yield { input, k, horizon, run } => commands::yield_command(&input, k, horizon, &run),
        Command::Transfer { structure, run, out } => commands::transfer(&structure, &run, &out),
        Command::Batch { dir, run, out } => commands::batch(&dir, &run, out.as_deref()),
        Command::Ensemble {
            sizes,
            samples,
            seed,
            norm_hz,
            scope,
            run,
            out,
        } => commands::ensemble(sizes, samples, seed, norm_hz, scope, &run, out.as_deref()),
        Command::Freqbound { levels } => commands::freqbound(levels),
        Command::OracleCheck { max_spins, seed, cases } => commands::oracle_check(max_spins, seed, cases),
        Command::Diffusion { d, length } => commands::diffusion(d, length),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Failed(_) => 1,
                CliError::Input(_) => 2,
            })
        }
    }
}
