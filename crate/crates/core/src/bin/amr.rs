use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use amr::cli::{self, resolve, Overrides, Resolved, RunConfig};
use amr::data::synthetic::SyntheticConfig;
use amr::error::Result;

/// Sarcasm detection over comment/response pairs.
#[derive(Parser)]
#[command(name = "amr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON run configuration; command-line values take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl RunArgs {
    fn resolve(&self) -> Result<Resolved> {
        resolve(self.config.as_deref(), &self.overrides)
    }

    fn config(&self) -> Result<RunConfig> {
        Ok(self.resolve()?.config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Corpus statistics per class.
    Stats {
        corpus: PathBuf,
        /// Also write stats.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and keep the checkpoint with the best validation accuracy.
    Train(RunArgs),
    /// Metrics of a checkpoint on --test.
    Eval(RunArgs),
    /// Class probabilities for an unlabeled JSONL file.
    Predict {
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Attention saliency for one labeled example.
    Saliency {
        /// Example position in the corpus.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Read the example from this file instead of --test.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Compare the gradient against finite differences.
        #[arg(long)]
        verify: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and evaluate every model variant.
    Ablate {
        /// Expand and validate the variants and report parameter counts only.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a seeded synthetic corpus with one cue token per example.
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 32)]
        examples: usize,
        #[arg(long, default_value_t = 50)]
        vocab_size: usize,
        #[arg(long, default_value_t = 10)]
        max_comment: usize,
        #[arg(long, default_value_t = 10)]
        max_response: usize,
        #[arg(long, default_value_t = 0.5)]
        context_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Stats { corpus, out } => {
            println!("{}", pretty(&cli::cmd_stats(&corpus, out.as_deref())?));
        }
        Command::Train(args) => {
            let cfg = args.config()?;
            let outcome = cli::cmd_train(&cfg)?;
            let best = &outcome.history[outcome.best_epoch - 1];
            println!(
                "best epoch {} of {}: validation accuracy {:.4}",
                outcome.best_epoch,
                outcome.history.len(),
                best.val_accuracy
            );
            println!("checkpoint {}", cfg.checkpoint_path().display());
        }
        Command::Eval(args) => {
            let r = args.resolve()?;
            println!("{}", pretty(&cli::cmd_eval(&r.config, r.model_explicit)?));
        }
        Command::Predict { input, run } => {
            let cfg = run.config()?;
            let n = cli::cmd_predict(&cfg, &input)?.len();
            println!("{n} predictions in {}", cfg.out.join(cli::PREDICTIONS_FILE).display());
        }
        Command::Saliency {
            index,
            input,
            verify,
            run,
        } => {
            let mut cfg = run.config()?;
            if input.is_some() {
                cfg.test = input;
            }
            let (map, check) = cli::cmd_saliency(&cfg, index, verify)?;
            println!("{}", pretty(&map));
            if let Some(c) = check {
                println!(
                    "verify: {} entries checked, {} skipped at kinks, max relative error {:.3e} (tolerance {:.0e}): {}",
                    c.checked,
                    c.kink_crossings,
                    c.max_rel_error,
                    c.tolerance,
                    if c.passed { "ok" } else { "FAILED" }
                );
                return Ok(c.passed);
            }
        }
        Command::Ablate { dry_run, run } => {
            let cfg = run.config()?;
            let rows = cli::cmd_ablate(&cfg, dry_run)?;
            print!("{}", cli::ablation_csv(&rows));
        }
        Command::Synth {
            output,
            examples,
            vocab_size,
            max_comment,
            max_response,
            context_rate,
            seed,
        } => {
            let cfg = SyntheticConfig {
                examples,
                vocab_size,
                max_comment,
                max_response,
                context_rate,
                seed,
            };
            let n = cli::cmd_synth(&cfg, &output)?;
            info!("wrote {n} examples to {}", output.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
