use anyhow::Context;
use clap::{Parser, Subcommand};
use concavity_core::experiments::{emit_report, envelope_of_csv, run_experiment, verify_calculus_properties, ExperimentSpec, Verdict};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Numerical experiments on approximate concavity of elliptic solutions.
#[derive(Debug, Parser)]
#[command(name = "concavity-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a preset problem and check its concavity statement.
    Run {
        /// Preset name, e.g. torsion, eigen_log, kennington_power.
        preset: String,
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for report.json and CSV dumps.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of interpolation weights per endpoint pair.
        #[arg(long)]
        lambda_steps: Option<usize>,
        /// Refine the best triple with a local search.
        #[arg(long)]
        refine: bool,
        /// Override the grid resolution (spacing 1/N).
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Seeded property checks of the harmonic concavity calculus.
    #[command(name = "verify-appendix")]
    VerifyProperties {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Concave envelope summary of a field CSV.
    Envelope { field: PathBuf },
}

/// Exit code for configuration, I/O and solver failures.
const EXIT_ERROR: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Run { preset, config, out, lambda_steps, refine, grid } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut spec = ExperimentSpec::from_toml(&text, Some(&preset))?;
            if let Some(n) = lambda_steps {
                spec.search.lambda_steps = n;
            }
            spec.search.refine |= refine;
            if let Some(n) = grid {
                spec.grid.n = n;
            }
            let dir = out.or_else(|| spec.output.clone()).unwrap_or_else(|| Path::new("out").join(&preset));
            let outcome = run_experiment(&spec)?;
            emit_report(&outcome, &dir)?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
            eprintln!("verdict: {:?} (artifacts in {})", outcome.report.verdict, dir.display());
            Ok(outcome.report.verdict.exit_code() as u8)
        }
        Command::VerifyProperties { samples, seed } => {
            let report = verify_calculus_properties(samples, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.pass() { Verdict::Pass } else { Verdict::Fail }.exit_code() as u8)
        }
        Command::Envelope { field } => {
            let text = std::fs::read_to_string(&field).with_context(|| format!("reading {}", field.display()))?;
            println!("{}", serde_json::to_string_pretty(&envelope_of_csv(&text)?)?);
            Ok(0)
        }
    }
}
