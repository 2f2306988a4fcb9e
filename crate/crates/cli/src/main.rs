mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Bad input from the user: config, flags or missing files. Exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "biasunlearn", version, about = "Debias causal language models by targeted unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Benchmark {
    Stereoset,
    Crowspairs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run unlearning with dynamic swapping and early stop
    Train {
        #[arg(long, env = "BIASUNLEARN_CONFIG")]
        config: PathBuf,
    },
    /// Score a benchmark, optionally with an adapter attached
    Eval {
        #[arg(long, env = "BIASUNLEARN_CONFIG")]
        config: PathBuf,
        #[arg(long, value_enum)]
        benchmark: Benchmark,
        /// Adapter directory, or a training checkpoint containing one
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Overrides eval.split
        #[arg(long)]
        split: Option<String>,
        /// Overrides eval.output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attach an adapter to another base model and re-export it
    Transfer {
        #[arg(long)]
        adapter: PathBuf,
        /// Target model directory
        #[arg(long)]
        target: PathBuf,
        /// Refuse targets whose base id differs from the adapter's
        #[arg(long)]
        strict_base: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic skewed corpus (splits, contrast pairs, pretraining text)
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        skew: f64,
        #[arg(long, default_value_t = 150)]
        train_per_type: usize,
        #[arg(long, default_value_t = 200)]
        dev_per_type: usize,
        #[arg(long, default_value_t = 200)]
        test_per_type: usize,
        #[arg(long, default_value_t = 12_000)]
        pretrain_sentences: usize,
    },
    /// Train a tiny causal LM from scratch on one-sentence-per-line text
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "tiny-base")]
        id: String,
        /// Extra StereoSet-format data whose words join the vocabulary
        #[arg(long)]
        vocab_from: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        #[arg(long, default_value_t = 3000)]
        steps: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize the configured model backend as a model directory
    InitModel {
        #[arg(long, env = "BIASUNLEARN_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a copy of a model whose base weights carry seeded uniform noise
    Perturb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 0.05)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<biasunlearn::Error>() {
        Some(biasunlearn::Error::ShapeMismatch(_) | biasunlearn::Error::BaseMismatch { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Eval {
            config,
            benchmark,
            adapter,
            split,
            out,
        } => commands::eval(&config, benchmark, adapter.as_deref(), split.as_deref(), out.as_deref()),
        Command::Transfer {
            adapter,
            target,
            strict_base,
            out,
        } => commands::transfer(&adapter, &target, strict_base, &out),
        Command::Synth {
            out,
            seed,
            skew,
            train_per_type,
            dev_per_type,
            test_per_type,
            pretrain_sentences,
        } => {
            let cfg = biasunlearn::corpus::synthetic::SyntheticConfig {
                seed,
                skew,
                train_per_type,
                dev_per_type,
                test_per_type,
                pretrain_sentences,
                ..Default::default()
            };
            commands::synth(&out, &cfg)
        }
        Command::Pretrain {
            corpus,
            out,
            id,
            vocab_from,
            dim,
            hidden,
            max_len,
            steps,
            batch_size,
            lr,
            seed,
        } => {
            let cfg = biasunlearn::trainer::PretrainConfig {
                steps,
                batch_size,
                learning_rate: lr,
                weight_decay: 0.0,
                seed,
            };
            commands::pretrain(&corpus, &out, &id, &vocab_from, (dim, hidden, max_len), &cfg)
        }
        Command::InitModel { config, out } => commands::init_model(&config, &out),
        Command::Perturb {
            model,
            out,
            id,
            scale,
            seed,
        } => commands::perturb(&model, &out, &id, scale, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
