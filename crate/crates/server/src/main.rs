use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedorch_server::{start, ServerConfig};

/// Federation coordinator.
#[derive(Parser)]
#[command(name = "fedorch-server", version)]
struct Args {
    /// Server configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Resume from a checkpoint file instead of starting a new federation.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let config = match ServerConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("event=fatal error=\"{e}\"");
            return ExitCode::from(2);
        }
    };
    let Ok(token) = std::env::var("FEDORCH_OPERATOR_TOKEN") else {
        eprintln!("event=fatal error=\"FEDORCH_OPERATOR_TOKEN is not set\"");
        return ExitCode::from(2);
    };
    let resume = match &args.resume {
        Some(path) => match std::fs::read(path) {
            Ok(bytes) => Some(bytes),
            Err(e) => {
                eprintln!("event=fatal error=\"cannot read {}: {e}\"", path.display());
                return ExitCode::from(2);
            }
        },
        None => None,
    };
    let running = match start(&config, token, resume.as_deref()).await {
        Ok(r) => r,
        Err(e) => {
            eprintln!("event=fatal error=\"{e}\"");
            return ExitCode::from(1);
        }
    };
    eprintln!(
        "event=listening nodes={} control={}",
        running.node_addr, running.control_addr
    );
    let _ = tokio::signal::ctrl_c().await;
    eprintln!("event=stopping");
    running.shutdown();
    ExitCode::SUCCESS
}
