//! Re-deriving `aggregate.csv` from the raw files.

use std::path::Path;

use vou_core::control::COST_WINDOWS;

use crate::aggregate::aggregate;
use crate::error::{Error, Result};
use crate::records::{group_by_cell, read_rows, AggregateRow, RawRow, RunRow, AGGREGATE_FILE, RAW_FILE, RUNS_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub cells: usize,
    pub runs: usize,
    pub raw_rows: usize,
}

fn close(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) || (a.is_nan() && b.is_nan())
}

fn rows_match(a: &AggregateRow, b: &AggregateRow) -> bool {
    a.scenario == b.scenario
        && a.policy == b.policy
        && a.lambda.to_bits() == b.lambda.to_bits()
        && a.t_pr == b.t_pr
        && a.loops == b.loops
        && a.seeds == b.seeds
        && [
            (a.mean_cost, b.mean_cost),
            (a.median_cost, b.median_cost),
            (a.ci_low, b.ci_low),
            (a.ci_high, b.ci_high),
            (a.mean_aoi, b.mean_aoi),
            (a.admission_rate, b.admission_rate),
            (a.decision_us, b.decision_us),
        ]
        .iter()
        .all(|&(x, y)| close(x, y))
}

/// Check the structure of the raw files and that folding them reproduces
/// the stored aggregate.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport> {
    let raw: Vec<RawRow> = read_rows(&dir.join(RAW_FILE))?;
    let runs: Vec<RunRow> = read_rows(&dir.join(RUNS_FILE))?;
    let stored: Vec<AggregateRow> = read_rows(&dir.join(AGGREGATE_FILE))?;

    for (key, rows) in group_by_cell(&raw) {
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        for seed in seeds {
            let mut windows: Vec<usize> = rows.iter().filter(|r| r.seed == seed).map(|r| r.window_q).collect();
            windows.sort_unstable();
            if windows != (0..COST_WINDOWS).collect::<Vec<_>>() {
                return Err(Error::Mismatch(format!(
                    "{} λ={} seed {seed}: cost windows {windows:?}",
                    key.policy, key.lambda
                )));
            }
        }
    }
    let derived = aggregate(&raw, &runs)?;
    if derived.len() != stored.len() {
        return Err(Error::Mismatch(format!(
            "{} cells in the raw data, {} aggregate rows",
            derived.len(),
            stored.len()
        )));
    }
    for (d, s) in derived.iter().zip(&stored) {
        if !rows_match(d, s) {
            return Err(Error::Mismatch(format!("cell {} λ={} T_pr={} loops={}", s.policy, s.lambda, s.t_pr, s.loops)));
        }
    }
    Ok(VerifyReport { cells: stored.len(), runs: runs.len(), raw_rows: raw.len() })
}
