use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use danil::harness::{self, Overrides, SplitChoice};

/// Train and inspect classifiers with distractor-aware intrinsic learning.
#[derive(Parser)]
#[command(name = "danil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for SplitChoice {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitChoice::Train,
            SplitArg::Test => SplitChoice::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write report.json and model.dnlm.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print test (or train) metrics of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config whose data section describes the dataset.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Export a sample's response maps as PGM images.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run base, ohem and danil over several seeds and summarize.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DANIL_LOG_LEVEL", "error")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let (report, dir) = harness::cmd_train(&config, &Overrides { seed, out_dir: out })
                .with_context(|| format!("training with {}", config.display()))?;
            println!(
                "{}: test macro-F1 {:.6}, accuracy {:.6}; wrote {}",
                report.method.name(),
                report.test.macro_f1,
                report.test.accuracy,
                dir.display()
            );
        }
        Command::Eval { checkpoint, config, split } => {
            let metrics = harness::cmd_eval(&checkpoint, &config, split.into())
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            print!("{}", harness::to_json(&metrics));
        }
        Command::Saliency { checkpoint, config, sample, out, split } => {
            let outcome = harness::cmd_saliency(&checkpoint, &config, split.into(), sample, &out)
                .with_context(|| format!("exporting maps for sample {sample}"))?;
            if outcome.files.len() == 1 {
                println!("sample {sample} is classified correctly; only the A+ map exists");
            }
            for f in &outcome.files {
                println!("{}", f.display());
            }
        }
        Command::Compare { config, seeds, out } => {
            let (report, dir) = harness::cmd_compare(&config, &seeds, &Overrides { seed: None, out_dir: out })
                .with_context(|| format!("comparing with {}", config.display()))?;
            println!("{:<6} {:>20} {:>20}", "method", "test macro-F1", "test accuracy");
            for row in &report.rows {
                println!(
                    "{:<6} {:>11.4} ± {:<6.4} {:>11.4} ± {:<6.4}",
                    row.method.name(),
                    row.test_macro_f1.mean,
                    row.test_macro_f1.std,
                    row.test_accuracy.mean,
                    row.test_accuracy.std
                );
            }
            println!("wrote {}", dir.join(harness::COMPARE_FILE).display());
        }
    }
    Ok(())
}
