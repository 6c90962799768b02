//! `pmfbsde`: run, list and verify solver scenarios.
//!
//! Exit status: 0 when all checks pass, 2 when a check fails, 1 on an
//! execution or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pmf_core::runner::{self, ScenarioConfig};

#[derive(Debug, Parser)]
#[command(
    name = "pmfbsde",
    version,
    about = "Predictive mean-field FBSDE scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its CSV tables and report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides solver.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides solver.paths.
        #[arg(long)]
        paths: Option<usize>,
        /// Output directory; defaults to out_dir from the config, then ./out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List scenarios and their parameters, or show one with its default config.
    List {
        name: Option<String>,
        /// Print the listing as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a scenario's checks without writing files; prints the report as JSON.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
    },
}

fn load(path: &PathBuf, seed: Option<u64>, paths: Option<usize>) -> Result<ScenarioConfig> {
    let mut config = ScenarioConfig::from_file(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    config.override_solver(seed, paths)?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run {
            config,
            seed,
            paths,
            out,
        } => {
            let config = load(&config, seed, paths)?;
            let dir = out
                .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            let output = runner::run(&config)
                .with_context(|| format!("running `{}`", config.scenario.name()))?;
            output
                .write(&dir)
                .with_context(|| format!("writing outputs to {}", dir.display()))?;
            print!("{}", output.report.summary());
            println!("outputs written to {}", dir.display());
            Ok(output.report.exit_code() as u8)
        }
        Command::List { name, json } => {
            let infos = match name {
                Some(n) => vec![runner::scenario_info(&n)?],
                None => runner::list_scenarios(),
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&infos)?);
                return Ok(0);
            }
            let single = infos.len() == 1;
            for info in &infos {
                println!("{}: {}", info.name, info.summary);
                for p in &info.parameters {
                    println!("    {:<20} {:<45} {}", p.key, p.kind, p.doc);
                }
                if single {
                    println!("\ndefault config:\n{}", info.default_config().emit()?);
                }
            }
            Ok(0)
        }
        Command::Verify {
            config,
            seed,
            paths,
        } => {
            let config = load(&config, seed, paths)?;
            let output = runner::run(&config)
                .with_context(|| format!("running `{}`", config.scenario.name()))?;
            eprint!("{}", output.report.summary());
            println!("{}", serde_json::to_string_pretty(&output.report)?);
            Ok(output.report.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
