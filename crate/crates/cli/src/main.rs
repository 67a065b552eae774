mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Shortfall systemic risk with scenario-dependent allocations.
#[derive(Parser)]
#[command(name = "sysrisk", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (utility, aggregation, solver, scenarios).
    #[arg(long)]
    config: PathBuf,
    /// Scenario file overriding the one named in the config (.csv or .json).
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Set every solver tolerance to this value.
    #[arg(long)]
    tol: Option<f64>,
    /// Write the output here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// Optional config; its solver section (and, for stability, its model
    /// and scenarios) replaces the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    tol: Option<f64>,
    /// Report path; defaults to `<study>-report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop wall times so that reports are bit-identical across runs.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Subcommand)]
enum Study {
    /// Reduced versus direct solver on random instances.
    Reduction {
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[command(flatten)]
        args: StudyArgs,
    },
    /// Risk of position pairs whose aggregates share a law.
    LawInvariance {
        #[arg(long, default_value_t = 25)]
        count: usize,
        #[command(flatten)]
        args: StudyArgs,
    },
    /// Empirical-measure risk and allocations against the reference law.
    Stability {
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        sizes: Vec<usize>,
        /// Independent draws per sample size.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[command(flatten)]
        args: StudyArgs,
    },
}

#[derive(Subcommand)]
enum Command {
    /// Systemic risk, budget and allocation as JSON.
    Risk(Common),
    /// Allocation table as CSV with header `scenario,Y1,...,YN`.
    Alloc {
        #[command(flatten)]
        common: Common,
        /// Also write the full result JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sup-convolution value, gradient and maximizer at one aggregate.
    Supconv {
        #[command(flatten)]
        common: Common,
        /// Aggregate `y`, comma separated.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            required = true
        )]
        y: Vec<f64>,
    },
    /// Utility assumption and aggregation map reports.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sample points for the curvature and monotonicity checks.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reproducible experiment reports written as JSON.
    #[command(subcommand)]
    Study(Study),
    /// Wall times of the reduced and direct solvers.
    Bench {
        /// Instance sizes as `NxMxK`, comma separated.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "2x1x1,4x1x5,4x2x5,4x2x10"
        )]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() {
                commands::EXIT_INVALID
            } else {
                0
            });
        }
    };
    let outcome = match cli.command {
        Command::Risk(c) => {
            commands::risk(&c.config, c.scenarios.as_deref(), c.tol, c.out.as_deref())
        }
        Command::Alloc { common: c, json } => commands::alloc(
            &c.config,
            c.scenarios.as_deref(),
            c.tol,
            c.out.as_deref(),
            json.as_deref(),
        ),
        Command::Supconv { common: c, y } => {
            commands::supconv(&c.config, &y, c.tol, c.out.as_deref())
        }
        Command::Validate {
            config,
            seed,
            samples,
            out,
        } => commands::validate(&config, seed, samples, out.as_deref()),
        Command::Study(study) => match study {
            Study::Reduction { count, args } => {
                commands::study(commands::StudyRequest::Reduction { count }, &args.into())
            }
            Study::LawInvariance { count, args } => commands::study(
                commands::StudyRequest::LawInvariance { count },
                &args.into(),
            ),
            Study::Stability { sizes, seeds, args } => commands::study(
                commands::StudyRequest::Stability { sizes, seeds },
                &args.into(),
            ),
        },
        Command::Bench {
            sizes,
            repetitions,
            seed,
            out,
        } => commands::bench(&sizes, repetitions, seed, out.as_deref()),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}

impl From<StudyArgs> for commands::StudyOptions {
    fn from(a: StudyArgs) -> Self {
        Self {
            config: a.config,
            seed: a.seed,
            tol: a.tol,
            out: a.out,
            no_timings: a.no_timings,
        }
    }
}
