use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedorch::agent::{run_agent, AgentError, AgentExit, NodeConfig};

/// Federated training node agent.
///
/// Exit codes: 0 finished, 1 runtime failure, 2 configuration error,
/// 3 authentication rejected.
#[derive(Parser)]
#[command(name = "fedorch-node", version)]
struct Args {
    /// Node configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match std::fs::read_to_string(&args.config)
        .map_err(|e| AgentError::Config(format!("cannot read {}: {e}", args.config.display())))
        .and_then(|text| NodeConfig::parse(&text))
    {
        Ok(c) => c,
        Err(e) => {
            eprintln!("event=fatal error=\"{e}\"");
            return ExitCode::from(2);
        }
    };
    match run_agent(&config) {
        Ok(AgentExit::Finished(reason)) => {
            eprintln!("event=exit node={} reason={reason}", config.node_id);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("event=fatal node={} error=\"{e}\"", config.node_id);
            ExitCode::from(match e {
                AgentError::Config(_) => 2,
                AgentError::AuthRejected(_) => 3,
                _ => 1,
            })
        }
    }
}
