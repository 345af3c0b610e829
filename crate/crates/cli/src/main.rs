use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use create_cli::{cmd_ablate, cmd_export, cmd_gradcheck, cmd_run, load_config, CliError, ExportSplit};
use create_core::losses::LossConfig;

/// Caps the rayon pool used for batched evaluation.
const THREADS_ENV: &str = "CIL_NUM_THREADS";

#[derive(Parser)]
#[command(name = "create-cil", version, about = "Class-incremental learning with per-class auto-encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
        /// Suppress per-epoch lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Run nme, ae_only and full on one config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Check every loss gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Takes loss hyper-parameters from this config instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export feature or latent embeddings from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// `feature` or `latent:<class>`.
        #[arg(long, default_value = "feature")]
        space: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let mut sink = io::sink();
    let mut stderr = io::stderr();
    match command {
        Command::Run {
            config,
            out,
            seed,
            overwrite,
            quiet,
        } => {
            let log: &mut dyn io::Write = if quiet { &mut sink } else { &mut stderr };
            let record = cmd_run(&config, &out, seed, overwrite, log)?;
            println!(
                "avg_incremental={:.2} final_accuracy={:.2} out={}",
                record.avg_incremental,
                record.final_accuracy,
                out.display()
            );
        }
        Command::Ablate {
            config,
            out,
            seed,
            overwrite,
            quiet,
        } => {
            let log: &mut dyn io::Write = if quiet { &mut sink } else { &mut stderr };
            let records = cmd_ablate(&config, &out, seed, overwrite, log)?;
            print!("{}", create_cli::ablation_table(&records));
        }
        Command::Gradcheck { seed, config } => {
            let loss = match config {
                Some(p) => load_config(&p, None)?.loss,
                None => LossConfig::default(),
            };
            cmd_gradcheck(seed, &loss, &mut io::stdout())?;
        }
        Command::Export {
            checkpoint,
            config,
            space,
            split,
            limit,
            out,
            overwrite,
        } => {
            if out.exists() && !overwrite {
                return Err(CliError::Usage(format!(
                    "{} exists (pass --overwrite to replace it)",
                    out.display()
                )));
            }
            let split = match split {
                SplitArg::Train => ExportSplit::Train,
                SplitArg::Test => ExportSplit::Test,
            };
            let n = cmd_export(&checkpoint, &config, &space, split, limit, &out)?;
            println!("exported {n} rows to {}", out.display());
        }
    }
    Ok(())
}
