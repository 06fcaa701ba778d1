use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flatfed_cli::commands::{cmd_cost, cmd_gradcheck, cmd_hessian, cmd_partition, cmd_run, Options};

#[derive(Parser)]
#[command(name = "flatfed", version, about = "Federated training with activation-norm regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for client updates (falls back to FLATFED_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federated experiment
    Run,
    /// Write the client split and label histograms
    Partition,
    /// Curvature report for a saved checkpoint
    Hessian {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forward multiplication counts
    Cost,
    /// Compare reverse-mode and finite-difference gradients
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut opts = Options {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
        checkpoint: None,
    };
    let result = match cli.command {
        Command::Run => cmd_run(&opts).map(|s| format!("{} rounds written to {}", s.records.len(), s.out_dir.display())),
        Command::Partition => cmd_partition(&opts).map(|p| format!("wrote {}", p.display())),
        Command::Hessian { checkpoint } => {
            opts.checkpoint = Some(checkpoint);
            cmd_hessian(&opts).map(|p| format!("wrote {}", p.display()))
        }
        Command::Cost => cmd_cost(&opts).map(|p| format!("wrote {}", p.display())),
        Command::Gradcheck => cmd_gradcheck(&opts).map(|g| format!("max relative error {:.3e}", g.max_relative_error)),
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("flatfed: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
