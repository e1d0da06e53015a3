use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use mamba_workbench::dp::Mode;
use mamba_workbench::harness::{run_all, write_outputs, RunConfig, Suite};
use mamba_workbench::Result;

/// Runs the verification suites and writes `report.json` plus per-suite CSVs.
///
/// Exit status: 0 when every check passes, 1 when any check fails, 2 on
/// configuration or I/O errors.
#[derive(Debug, Parser)]
#[command(name = "mamba-workbench", version)]
struct Cli {
    /// core, gadgets, copy, dp, cost or all.
    #[arg(long)]
    suite: Option<String>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Fixture id for the dp suite; repeat for several.
    #[arg(long)]
    fixture: Vec<String>,
    /// semantic or gadget.
    #[arg(long)]
    mode: Option<String>,
    /// Flip one sign in the attention form; the core suite must then fail.
    #[arg(long)]
    fault_inject: bool,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.suite {
        cfg.suite = s.parse::<Suite>()?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if !cli.fixture.is_empty() {
        cfg.fixtures = cli.fixture.clone();
    }
    if let Some(m) = &cli.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    cfg.fault_inject |= cli.fault_inject;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = config(&cli).and_then(|cfg| {
        let (report, artifacts) = run_all(&cfg)?;
        write_outputs(&cfg.out_dir, &report, &artifacts)?;
        Ok(report)
    });
    match outcome {
        Ok(report) => {
            for s in &report.suites {
                for c in &s.checks {
                    let tag = if c.passed { "ok  " } else { "FAIL" };
                    println!("{tag} {}/{} {}", s.suite.id(), c.name, c.detail);
                }
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
