use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kalmanid::cli::{self, CheckOptions, ExampleKind, ExperimentConfig};
use kalmanid::Error;

#[derive(Parser)]
#[command(name = "kalmanid", about = "Kalman gain identification experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config; omit to use a built-in example's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in example used when no config file is given.
    #[arg(long, global = true, default_value = "one_dim")]
    example: String,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the largest N of the config's n_list.
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Override the number of multi-start initializations.
    #[arg(long, global = true)]
    starts: Option<usize>,

    /// Override the stability-constraint level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset CSV plus a ground-truth metadata sidecar.
    Simulate,
    /// Run the multi-start identification on a dataset file.
    Identify {
        /// Dataset CSV (as written by `simulate`).
        dataset: PathBuf,
    },
    /// Tabulate V_N and its limit over a gain grid (1-D example only).
    Landscape,
    /// Estimation error versus N with the log-log slope.
    Consistency,
    /// Run the numerical property suite and report pass/fail.
    Check,
}

fn load_config(args: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => {
            let example = match args.example.as_str() {
                "one_dim" => ExampleKind::OneDim,
                "two_state" => ExampleKind::TwoState,
                "three_state" => ExampleKind::ThreeState,
                other => {
                    return Err(Error::Config(format!(
                        "unknown example '{}'; expected one_dim, two_state or three_state",
                        other
                    )))
                }
            };
            ExperimentConfig::example_default(example)
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n {
        // Replace the top of the N ladder, keeping the list ascending.
        config.n_list.retain(|&m| m < n);
        config.n_list.push(n);
    }
    if let Some(starts) = args.starts {
        config.n_starts = starts;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    config.validate()?;
    Ok(config)
}

fn run(args: &Cli) -> Result<PathBuf, Error> {
    let config = load_config(args)?;
    let out = config.output_dir.clone().unwrap_or_else(|| args.out.clone());
    match &args.command {
        Command::Simulate => cli::cmd_simulate(&config, &out),
        Command::Identify { dataset } => cli::cmd_identify(&config, dataset, &out),
        Command::Landscape => cli::cmd_landscape(&config, &out),
        Command::Consistency => cli::cmd_consistency(&config, &out),
        Command::Check => cli::cmd_check(&config, &CheckOptions::default(), &out),
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(&args) {
        Ok(path) => {
            println!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}", err);
            match err {
                Error::Config(_)
                | Error::Malformed { .. }
                | Error::Json(_)
                | Error::Io(_)
                | Error::InvalidParameter(_)
                | Error::UnsupportedDimension { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
