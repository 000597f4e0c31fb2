mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lfd_core::Error;

#[derive(Debug, Parser)]
#[command(name = "lfd", version, about = "Discover, apply and audit named text features")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Serve every LLM request from the cache; a miss is an error (exit 5).
    #[arg(long, global = true)]
    pub replay: bool,
    /// Continue `discover` from the latest checkpoint in the output directory.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Override the run seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (discover, audit) or file (apply, simulate, report).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run feature discovery and write the codebook, matrices and report.
    Discover {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Apply a codebook to a dataset and write the feature matrix as CSV.
    Apply {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Needed only when the codebook has semantic features.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cross-rater agreement audit of a codebook.
    Audit {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.70)]
        kappa_star: f64,
        /// Documents sampled for the audit.
        #[arg(long, default_value_t = 100)]
        sample: usize,
    },
    /// Monte-Carlo grid of two noisy annotators, with the closed-form kappa.
    Simulate {
        #[arg(long, value_delimiter = ',', required = true)]
        eta: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        pi: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        zeta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "20000")]
        n: Vec<usize>,
    },
    /// Render the report of a finished discover run.
    Report {
        /// Output directory of a discover run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Json,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::DialectViolation(_) | Error::RegexSyntax(_) => 2,
        Error::Data(_)
        | Error::MalformedRecord { .. }
        | Error::DuplicateId(_)
        | Error::InsufficientClass { .. }
        | Error::LengthMismatch { .. }
        | Error::EmptyBand
        | Error::Io { .. }
        | Error::Json(_) => 3,
        Error::Gateway(_) | Error::Unparseable(_) => 4,
        Error::ReplayMiss(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Discover { config, data } => commands::discover(g, &config, &data),
        Command::Apply { codebook, data, config } => commands::apply(g, &codebook, &data, config.as_deref()),
        Command::Audit {
            codebook,
            data,
            config,
            kappa_star,
            sample,
        } => commands::audit(g, &codebook, &data, config.as_deref(), kappa_star, sample),
        Command::Simulate { eta, pi, zeta, n } => commands::simulate(g, &eta, &pi, &zeta, &n),
        Command::Report { run, format } => commands::report(
            g,
            &run,
            match format {
                Format::Markdown => lfd_core::evalkit::ReportFormat::Markdown,
                Format::Json => lfd_core::evalkit::ReportFormat::Json,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
