use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedfmc::harness::{
    emit_metrics, load_preset, parse_config, run_experiment, save_model, HarnessError, RunConfig,
    PRESETS,
};

#[derive(Parser)]
#[command(
    name = "fedfmc",
    version,
    about = "Fork/merge/consolidate federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Config file, or `preset:<name>` for a bundled preset.
    config: String,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for metrics.csv, report.txt and final.fmc.
    #[arg(long, default_value = "fedfmc-out")]
    out: PathBuf,
    /// Merge without the EWC penalty.
    #[arg(long)]
    no_ewc: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its metrics, report and final model.
    Run(RunArgs),
    /// Run an experiment and check its costs against the closed-form counts.
    VerifyCosts(RunArgs),
    /// Bundled presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
}

fn load(args: &RunArgs) -> Result<RunConfig, String> {
    let mut cfg = match args.config.strip_prefix("preset:") {
        Some(name) => load_preset(name)
            .ok_or_else(|| format!("unknown preset `{name}`; try `fedfmc presets list`"))?
            .map_err(|e| format!("preset {name}: {e}"))?,
        None => {
            parse_config(Path::new(&args.config)).map_err(|e| format!("{}: {e}", args.config))?
        }
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if args.no_ewc {
        cfg.merge.ewc_enabled = false;
    }
    Ok(cfg)
}

fn run(args: &RunArgs, write_outputs: bool) -> Result<bool, String> {
    let cfg = load(args)?;
    let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let report = outcome.report();
    if write_outputs {
        std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
        emit_metrics(&outcome.rows, &args.out.join("metrics.csv"))
            .map_err(|e| HarnessError::from(e).to_string())?;
        std::fs::write(args.out.join("report.txt"), &report)
            .map_err(|e| format!("{}: {e}", args.out.display()))?;
        save_model(&args.out.join("final.fmc"), &outcome.final_model)
            .map_err(|e| HarnessError::from(e).to_string())?;
    }
    print!("{report}");
    Ok(outcome.costs.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args, true),
        Command::VerifyCosts(args) => run(args, false),
        Command::Presets {
            action: PresetAction::List,
        } => {
            for p in PRESETS {
                println!("{:<20} {}", p.name, p.description);
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: cost verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
