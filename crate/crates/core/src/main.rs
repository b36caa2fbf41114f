use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loadsim::cli::{self, Overrides, Scenario};
use loadsim::{Error, Result};

/// Simulate master-slave and multiagent loop scheduling on heterogeneous
/// processors.
#[derive(Parser)]
#[command(name = "loadsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (policy, m, replicate) of a scenario and write the reports.
    Run(ScenarioArgs),
    /// Print the resolved scenario, defaults included.
    Explain(ScenarioArgs),
    /// Compare LPT packing against the exhaustive optimum on random instances.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file; the built-in default sweep when omitted.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Master seed; replicate r uses seed + r.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also write trace/<run-id>.jsonl for every run.
    #[arg(long)]
    trace: bool,
    /// Policy to run (repeatable; replaces the scenario's list).
    #[arg(long = "policy", value_name = "NAME")]
    policies: Vec<String>,
    /// Processor counts, comma separated.
    #[arg(long, value_name = "LIST")]
    m: Option<String>,
    #[arg(long, value_name = "N")]
    replicates: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_name = "N", default_value_t = 1)]
    seed: u64,
    /// Number of random instances.
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 12)]
    max_items: usize,
    #[arg(long, default_value_t = 4)]
    max_bins: usize,
    /// Write every comparison to DIR/oracle.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<Scenario> {
        let mut scenario = match &self.scenario {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                cli::parse_scenario(&text)?
            }
            None => Scenario::default(),
        };
        scenario.apply_overrides(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            trace: self.trace,
            policies: self.policies.clone(),
            m: self.m.clone(),
            replicates: self.replicates,
        })?;
        Ok(scenario)
    }
}

fn oracle(args: &OracleArgs) -> Result<()> {
    let summary = cli::cmd_oracle(args.seed, args.count, args.max_items, args.max_bins)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join("oracle.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary.comparisons)?;
    }
    println!(
        "{} instances, worst LPT/optimal ratio {:.4} (unit speeds) and {:.4} (mixed speeds), {} violations",
        summary.comparisons.len(),
        summary.worst_unit_ratio,
        summary.worst_mixed_ratio,
        summary.violations
    );
    if summary.violations > 0 {
        return Err(Error::Integrity(format!(
            "{} instances broke the LPT bounds",
            summary.violations
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => args.resolve().and_then(|sc| {
            let report = cli::cmd_run(&sc, cli::workers_from_env()?)?;
            print!("{}", cli::summary(&report));
            Ok(())
        }),
        Command::Explain(args) => args.resolve().map(|sc| print!("{}", sc.explain())),
        Command::Oracle(args) => oracle(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("loadsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
