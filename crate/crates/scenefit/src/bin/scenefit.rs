//! Batch experiment runner: generate scenes, fit them across K sweeps and
//! ablations, evaluate, and emit reports.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use scenefit::experiment::{self, default_fixture_dir};

#[derive(Parser)]
#[command(name = "scenefit", version, about = "Multi-rigid-motion view synthesis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec.
    Run {
        /// Experiment spec file (flat key = value).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for cell artifacts and summaries.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for cell-level parallelism (0 = auto).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Print the planned cells and exit without touching anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the fast invariant suite and report pass/fail per group.
    Selfcheck,
    /// Rebuild the color mask composite from a fit directory.
    RenderMasks {
        /// Cell directory containing masks.pgm.
        #[arg(long)]
        fit: PathBuf,
        /// Output PPM path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            spec,
            out,
            workers,
            dry_run,
        } => {
            let parsed = experiment::load_spec(&spec)
                .with_context(|| format!("loading spec {}", spec.display()))?;
            let report = experiment::run(&parsed, &spec, &out, workers, dry_run)?;
            if report.dry_run {
                println!("planned {} cells:", report.cells.len());
                for cell in &report.cells {
                    println!("  {}", cell.id.dir_name());
                }
                return Ok(ExitCode::SUCCESS);
            }
            for (cell, secs) in report.cells.iter().zip(&report.seconds) {
                println!("{:40} {:8.2}s  {}", cell.id.dir_name(), secs, cell.status);
            }
            let failures = report.failures();
            println!(
                "{} cells, {} failed; summary at {}",
                report.cells.len(),
                failures,
                report.out_dir.join("summary.csv").display()
            );
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Selfcheck => {
            let report = experiment::selfcheck(&default_fixture_dir());
            for g in &report.groups {
                println!(
                    "[{}] {:18} {:6.2}s  {}",
                    if g.passed { "PASS" } else { "FAIL" },
                    g.name,
                    g.seconds,
                    g.detail
                );
            }
            if report.all_passed() {
                println!("selfcheck: all groups passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("selfcheck: FAILED groups: {}", report.failed_groups().join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::RenderMasks { fit, out } => {
            experiment::render_masks(&fit, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
