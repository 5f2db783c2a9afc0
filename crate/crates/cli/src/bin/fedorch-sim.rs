use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedorch::datakit::{parse_scenarios, scenario, Scenario};
use fedorch::experiments::{
    experiment_local_vs_federated, experiment_size_sweep, ComparisonOptions, DEFAULT_SWEEP_SIZES, LOCAL_EPOCHS,
};
use fedorch::sim::SimConfig;

/// Runs a simulated experiment and writes `report.json` plus metrics CSVs.
///
/// The `size-sweep` scenario trains one model per dataset size; every other
/// scenario compares per-site local models against a federated model.
#[derive(Parser)]
#[command(name = "fedorch-sim", version)]
struct Args {
    /// Scenario name.
    #[arg(long)]
    scenario: String,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scenario file to use instead of the built-in presets.
    #[arg(long)]
    presets: Option<PathBuf>,
    /// Local baseline epochs (size sweep: epochs per size).
    #[arg(long, default_value_t = LOCAL_EPOCHS)]
    local_epochs: usize,
    /// Site left out in the ablation run.
    #[arg(long, default_value = "uganda")]
    ablate: String,
    /// Skip the ablation run.
    #[arg(long)]
    no_ablation: bool,
    /// Comma-separated dataset sizes for the size sweep.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
}

fn load(args: &Args) -> Result<Scenario, String> {
    match &args.presets {
        None => scenario(&args.scenario).map_err(|e| e.to_string()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            parse_scenarios(&text)
                .map_err(|e| e.to_string())?
                .into_iter()
                .find(|s| s.name == args.scenario)
                .ok_or_else(|| format!("scenario `{}` not in {}", args.scenario, path.display()))
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let scenario = match load(&args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("event=fatal error=\"{e}\"");
            return ExitCode::from(2);
        }
    };
    if args.seeds.is_empty() {
        eprintln!("event=fatal error=\"no seeds given\"");
        return ExitCode::from(2);
    }
    let config = SimConfig::default();
    let report = if scenario.name == "size-sweep" {
        let sizes = args.sizes.clone().unwrap_or_else(|| DEFAULT_SWEEP_SIZES.to_vec());
        experiment_size_sweep(&scenario, &sizes, &args.seeds, &config, args.local_epochs)
    } else {
        let options = ComparisonOptions {
            local_epochs: args.local_epochs,
            ablate_site: (!args.no_ablation).then(|| args.ablate.clone()),
        };
        experiment_local_vs_federated(&scenario, &args.seeds, &config, &options)
    };
    let report = match report.and_then(|r| r.write_to(&args.out).map(|()| r)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("event=fatal error=\"{e}\"");
            return ExitCode::from(1);
        }
    };
    for (key, value) in &report.summary {
        println!("{key}\t{value:.4}");
    }
    if !report.collapsed_models.is_empty() {
        println!("collapsed\t{}", report.collapsed_models.join(","));
    }
    eprintln!(
        "event=done out={} wall_clock_ms={}",
        args.out.display(),
        report.wall_clock_ms
    );
    ExitCode::SUCCESS
}
