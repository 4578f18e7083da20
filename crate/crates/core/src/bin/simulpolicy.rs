use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use simulpolicy::experiment::{cmd_gen, cmd_report, cmd_simulate, cmd_sweep, cmd_train, ExperimentConfig};
use simulpolicy::metrics::LatencyBand;
use simulpolicy::{LabError, PolicyVariant};

/// Train and evaluate information-gain READ/WRITE policies on a synthetic
/// translation oracle.
#[derive(Parser)]
#[command(name = "simulpolicy", version)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out datasets.
    Gen {
        /// Training utterances.
        #[arg(long)]
        train: Option<usize>,
        /// Held-out utterances.
        #[arg(long)]
        eval: Option<usize>,
        #[arg(long)]
        ambiguity_prob: Option<f64>,
    },
    /// Fit a policy head and write its checkpoint and loss curve.
    Train {
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Stream the held-out set at a single threshold.
    Simulate {
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
        #[arg(long)]
        chunk_ms: Option<f64>,
    },
    /// Sweep thresholds and write the latency-quality curve.
    Sweep {
        #[command(flatten)]
        variant: VariantArg,
        /// Comma-separated thresholds; default is score quantiles.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        alpha_count: Option<usize>,
    },
    /// Compute NoSE, latency-by-position bins and the information-gain grid.
    Report {
        /// Comma-separated variants to compare.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<PolicyVariant>>,
        /// Lower LAAL bound of the NoSE band, in seconds
        #[arg(long)]
        band_x: Option<f64>,
        /// Upper LAAL bound of the NoSE band, in seconds
        #[arg(long)]
        band_y: Option<f64>,
        /// Number of output-position bins
        #[arg(long)]
        bins: Option<usize>,
    },
}

#[derive(Args)]
struct VariantArg {
    /// REINA, REINA_TAN, REINA_SAN or REINA_ALL.
    #[arg(long)]
    variant: Option<PolicyVariant>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<String, LabError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    set(&mut config.out_dir, cli.out);
    match cli.command {
        Command::Gen {
            train,
            eval,
            ambiguity_prob,
        } => {
            set(&mut config.data.train, train);
            set(&mut config.data.eval, eval);
            set(&mut config.synth.ambiguity_prob, ambiguity_prob);
            cmd_gen(&config)
        }
        Command::Train {
            variant,
            steps,
            batch_size,
            lr,
        } => {
            set(&mut config.variant, variant.variant);
            set(&mut config.train.steps, steps);
            set(&mut config.train.batch_size, batch_size);
            set(&mut config.train.lr, lr);
            cmd_train(&config)
        }
        Command::Simulate {
            variant,
            alpha,
            chunk_ms,
        } => {
            set(&mut config.variant, variant.variant);
            set(&mut config.stream.alpha, alpha);
            set(&mut config.stream.chunk_ms, chunk_ms);
            cmd_simulate(&config)
        }
        Command::Sweep {
            variant,
            alphas,
            alpha_count,
        } => {
            set(&mut config.variant, variant.variant);
            set(&mut config.alphas, alphas);
            set(&mut config.alpha_count, alpha_count);
            cmd_sweep(&config)
        }
        Command::Report {
            variants,
            band_x,
            band_y,
            bins,
        } => {
            set(&mut config.report.variants, variants);
            set(&mut config.report.bins, bins);
            match (band_x, band_y) {
                (Some(x), Some(y)) => config.report.band = Some(LatencyBand { x, y }),
                (None, None) => {}
                _ => {
                    return Err(LabError::Config {
                        field: "band",
                        reason: "give both --band-x and --band-y".into(),
                    })
                }
            }
            cmd_report(&config)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            for line in msg.lines() {
                if let Some(w) = line.strip_prefix("warning: ") {
                    eprintln!("warning: {w}");
                } else {
                    println!("{line}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
