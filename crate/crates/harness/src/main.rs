use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vou_harness::records::read_rows;
use vou_harness::{compare_policies, run_experiment, verify_dir, AggregateRow, ExperimentSpec};

#[derive(Parser)]
#[command(name = "vou", version, about = "Value-of-update admission experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write raw.csv, runs.csv and aggregate.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, replacing those in the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory; takes precedence over RESULT_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two policies, each at its best threshold.
    Compare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        loops: Option<usize>,
        #[arg(long)]
        t_pr: Option<usize>,
    },
    /// Recompute the aggregate from the raw files and check it.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn describe(row: &AggregateRow) -> String {
    format!(
        "{} λ={} T_pr={} loops={}: mean {:.6} [{:.6}, {:.6}] over {} seeds",
        row.policy, row.lambda, row.t_pr, row.loops, row.mean_cost, row.ci_low, row.ci_high, row.seeds
    )
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seeds, out } => {
            let mut spec = ExperimentSpec::load(&config)?;
            if let Some(seeds) = seeds {
                spec.seeds = seeds;
            }
            let dir = out.unwrap_or_else(|| spec.output_dir());
            let results = run_experiment(&spec, &dir)?;
            println!(
                "{}: {} cells, {} runs written to {}",
                spec.name,
                results.aggregate.len(),
                results.runs.len(),
                dir.display()
            );
        }
        Command::Compare { input, a, b, loops, t_pr } => {
            let rows: Vec<AggregateRow> = read_rows(&input)?;
            let c = compare_policies(&rows, &a, &b, loops, t_pr)?;
            println!("a: {}", describe(&c.a));
            println!("b: {}", describe(&c.b));
            println!("improvement of a over b: {:.2}%", 100.0 * c.improvement);
            println!("intervals disjoint: {}", c.ci_disjoint);
        }
        Command::Verify { input } => {
            let report = verify_dir(&input).with_context(|| format!("verifying {}", input.display()))?;
            println!("ok: {} cells, {} runs, {} cost windows", report.cells, report.runs, report.raw_rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
