use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use equimodal::{Error, Result};
use equimodal_cli::manifest::HashMismatch;
use equimodal_cli::{commands, exit_code, ExperimentConfig};

#[derive(Parser)]
#[command(name = "equimodal", version, about = "Multimodal alternating-training experiments")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and save it.
    GenData,
    /// Train, evaluate and write the run report.
    Train {
        /// Load a dataset written by `gen-data` instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        /// Checkpoint directory (default `<out>/checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per threshold and seed.
    SweepThreshold,
    /// Compare order policies on paired seeds.
    CompareOrders,
    /// Missing-modality robustness across training seeds.
    Robustness,
    /// Closed-form ordering table and Monte-Carlo fractions.
    TheoryCheck {
        #[arg(long = "kappa", value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.5])]
        kappas: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Train and write 2-component PCA projections of the features.
    ProjectFeatures {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli.config.as_deref().ok_or_else(|| Error::config("--config", "a configuration file is required"))?;
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    let out = config.output_dir.clone();
    Ok((config, out))
}

fn run(cli: &Cli) -> Result<Vec<HashMismatch>> {
    if let Command::TheoryCheck { kappas, trials } = &cli.command {
        let (text, mismatches) = commands::theory(cli.out.as_deref(), kappas, *trials, cli.seed.unwrap_or(0))?;
        print!("{text}");
        return Ok(mismatches);
    }
    let (config, out) = load_config(cli)?;
    let out: &Path = &out;
    match &cli.command {
        Command::GenData => commands::gen_data(&config, out),
        Command::Train { data } => commands::train(&config, out, data.as_deref()),
        Command::Eval { checkpoint, data } => {
            let checkpoint = checkpoint.clone().unwrap_or_else(|| out.join(commands::CHECKPOINT_DIR));
            commands::eval(&config, out, &checkpoint, data.as_deref())
        }
        Command::SweepThreshold => commands::sweep(&config, out),
        Command::CompareOrders => commands::orders(&config, out),
        Command::Robustness => commands::robustness(&config, out),
        Command::ProjectFeatures { data } => commands::project_features(&config, out, data.as_deref()),
        Command::TheoryCheck { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(mismatches) => {
            for m in &mismatches {
                eprintln!("warning: {} changed since the previous run ({} -> {})", m.path, m.previous, m.current);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
