use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plk_core::harness::{execute, ScenarioConfig, Verb};

#[derive(Parser)]
#[command(name = "plk", version, about = "Proactive robust adaptive lane keeping: estimation, design and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate stiffness priors from sparse vehicle reports.
    Estimate(Common),
    /// Design the controller for every configured run.
    Design(Common),
    /// Design and simulate every configured run in closed loop.
    Simulate(Common),
    /// Sweep the optimal velocity over nominal stiffness.
    Sweep(Common),
    /// Everything above.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, args) = match cli.command {
        Command::Estimate(a) => (Verb::Estimate, a),
        Command::Design(a) => (Verb::Design, a),
        Command::Simulate(a) => (Verb::Simulate, a),
        Command::Sweep(a) => (Verb::Sweep, a),
        Command::All(a) => (Verb::All, a),
    };
    let cfg = match &args.config {
        Some(path) => ScenarioConfig::from_path(path),
        None => Ok(ScenarioConfig::default()),
    };
    let result = cfg.and_then(|cfg| execute(verb, &cfg, args.seed, &args.out));
    match result {
        Ok(summary) => {
            if summary.exit_code != 0 {
                eprintln!("finished with issues (exit code {}), see {}", summary.exit_code, args.out.join("summary.json").display());
            }
            ExitCode::from(summary.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
