use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod run_dir;

#[derive(Parser, Debug)]
#[command(name = "fedshare", version, about = "Federated recommendation with personalized data sharing and unsharing")]
pub struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (overrides the config)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Training rounds
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    /// Client and server learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Drop the local/global contrastive term on the server
    #[arg(long, global = true)]
    pub no_cl: bool,
    /// Drop server-side BPR on the shared graph
    #[arg(long, global = true)]
    pub no_server_bpr: bool,
    /// Use raw snapshot rows instead of views inferred on the forgotten graph
    #[arg(long, global = true)]
    pub no_forgotten_graph: bool,
    /// Reuse the current item table instead of a federated pass on remaining data
    #[arg(long, global = true)]
    pub no_remaining_fl: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split the interaction log, assign sharing groups and unshare requests
    Prepare,
    /// Run the federated learning phase
    Train,
    /// Remove withdrawn shared interactions from the trained model
    Unlearn {
        /// Unshare requests (JSON lines); defaults to the prepared requests
        #[arg(long)]
        requests: Option<PathBuf>,
    },
    /// Train from scratch on the remaining data
    Retrain,
    /// Evaluate a checkpoint on the test split
    Eval {
        /// learned, unlearned or retrained
        #[arg(long, default_value = "learned")]
        phase: String,
        /// Also write per-user metrics as CSV
        #[arg(long)]
        csv: bool,
    },
    /// Print the storage models for unlearning support
    ReportStorage {
        /// Catalogue size (default: from the config or the prepared data)
        #[arg(long)]
        items: Option<usize>,
        /// User count, for the per-round client count
        #[arg(long)]
        users: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors count as configuration errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(hint) = commands::hint(&e) {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
