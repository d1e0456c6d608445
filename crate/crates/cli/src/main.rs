mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use erkg::data::Split;
use erkg::eval::TiePolicy;
use erkg::model::ModelKind;
use erkg::presets::Dataset;
use erkg::synth::SynthConfig;
use erkg::theorem::{Mechanism, Variant};

use crate::commands::TheoremArgs;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "erkg", version, about = "Knowledge-graph embedding with equivariance regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum TieArg {
    Optimistic,
    Pessimistic,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Bilinear,
    Distance,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides paths.output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the checkpoint, history.json and valid_report.json.
    Train(RunArgs),
    /// Filtered ranking metrics for a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        tie_policy: Option<TieArg>,
    },
    /// Compare minimized ER-form objectives with nuclear-norm estimates.
    VerifyTheorems {
        /// I,J,K,D
        #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [3, 2, 3, 2])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "amgm4")]
        variants: Vec<String>,
        /// Force one mechanism for every variant.
        #[arg(long, value_enum)]
        mechanism: Option<MechanismArg>,
        #[arg(long, default_value_t = 50)]
        restarts: usize,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also fail on flagged thm1..thm4 ratios.
        #[arg(long)]
        gate_all: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic categorized knowledge graph.
    Synth {
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 4)]
        categories: usize,
        #[arg(long, default_value_t = 6)]
        relations: usize,
        #[arg(long, default_value_t = 300)]
        triples_per_relation: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train every (learning rate, lambda) cell and write leaderboard.json.
    Gridsearch(RunArgs),
    /// Print tuned hyperparameters for a model and benchmark.
    Preset {
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: String,
        /// Cap the dimension for CPU runs.
        #[arg(long)]
        desk: bool,
    },
}

fn load_run(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    if let Some(out) = &args.out {
        config.paths.output = Some(out.clone());
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => commands::cmd_train(&load_run(&args)?),
        Command::Evaluate {
            run,
            checkpoint,
            split,
            tie_policy,
        } => {
            let config = load_run(&run)?;
            let split = match split {
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let tie = tie_policy.map(|t| match t {
                TieArg::Optimistic => TiePolicy::Optimistic,
                TieArg::Pessimistic => TiePolicy::Pessimistic,
                TieArg::Mean => TiePolicy::Mean,
            });
            commands::cmd_evaluate(&config, checkpoint.as_deref(), split, tie)
        }
        Command::VerifyTheorems {
            sizes,
            variants,
            mechanism,
            restarts,
            instances,
            seed,
            gate_all,
            out,
        } => {
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<Result<Vec<_>, _>>()?;
            let sizes: [usize; 4] = sizes
                .try_into()
                .map_err(|_| CliError::Usage("--sizes takes four values I,J,K,D".into()))?;
            commands::cmd_verify_theorems(&TheoremArgs {
                sizes,
                variants,
                mechanism: mechanism.map(|m| match m {
                    MechanismArg::Bilinear => Mechanism::Bilinear,
                    MechanismArg::Distance => Mechanism::Distance,
                }),
                restarts,
                instances,
                seed,
                gate_all,
                out,
            })
        }
        Command::Synth {
            entities,
            categories,
            relations,
            triples_per_relation,
            noise,
            seed,
            out,
        } => {
            let config = SynthConfig {
                n_entities: entities,
                n_categories: categories,
                n_relations: relations,
                triples_per_relation,
                noise_rate: noise,
                seed,
            };
            commands::cmd_synth(&config, &out)
        }
        Command::Gridsearch(args) => commands::cmd_gridsearch(&load_run(&args)?),
        Command::Preset { model, dataset, desk } => {
            let model: ModelKind = model.parse()?;
            let dataset: Dataset = dataset.parse()?;
            commands::cmd_preset(model, dataset, desk)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
