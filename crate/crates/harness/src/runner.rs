//! Executing a sweep: one simulation per (cell, seed), spread over worker
//! threads, then a single serialized write of the result files.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use vou_netsim::{run, RunResult};

use crate::aggregate::aggregate;
use crate::config::{Cell, ExperimentSpec};
use crate::error::{Error, Result};
use crate::records::{write_rows, AggregateRow, RawRow, RunRow, AGGREGATE_FILE, RAW_FILE, RUNS_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub raw: Vec<RawRow>,
    pub runs: Vec<RunRow>,
    pub aggregate: Vec<AggregateRow>,
}

pub fn raw_rows(scenario: &str, cell: &Cell, result: &RunResult) -> Vec<RawRow> {
    result
        .window_costs()
        .into_iter()
        .enumerate()
        .map(|(q, cost)| RawRow {
            scenario: scenario.to_string(),
            policy: cell.label.clone(),
            lambda: cell.lambda,
            t_pr: cell.t_pr,
            loops: cell.loops,
            seed: result.seed,
            window_q: q,
            lqg_cost: cost,
        })
        .collect()
}

pub fn run_row(scenario: &str, cell: &Cell, result: &RunResult) -> RunRow {
    RunRow {
        scenario: scenario.to_string(),
        policy: cell.label.clone(),
        lambda: cell.lambda,
        t_pr: cell.t_pr,
        loops: cell.loops,
        seed: result.seed,
        mean_aoi: result.mean_aoi(),
        admission_rate: result.admission_rate(),
        decision_us: result.mean_decision_us(),
    }
}

fn workers(jobs: usize) -> usize {
    thread::available_parallelism().map_or(1, |n| n.get()).min(jobs).max(1)
}

/// Run every (cell, seed) pair. Results come back in grid order; the first
/// failure, if any, is returned next to the completed runs.
pub fn simulate(spec: &ExperimentSpec, cells: &[Cell]) -> (Vec<(usize, RunResult)>, Option<Error>) {
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| spec.seeds.iter().map(move |&s| (c, s))).collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, seed)) = jobs.get(i) else { break };
                let cell = &cells[c];
                let outcome = spec
                    .scenario_config(cell.loops, seed)
                    .and_then(|cfg| run(&cfg, &cell.policy_config()).map_err(Error::from));
                slots.lock().expect("no worker panicked")[i] = Some(outcome);
            });
        }
    });
    let mut done = Vec::new();
    let mut failure = None;
    for (slot, &(c, _)) in slots.into_inner().expect("no worker panicked").into_iter().zip(&jobs) {
        match slot.expect("every job ran") {
            Ok(r) => done.push((c, r)),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    (done, failure)
}

/// Run the sweep and write `raw.csv`, `runs.csv` and `aggregate.csv` into
/// `out_dir`. On a failed simulation the completed runs are still written.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentResults> {
    spec.validate()?;
    let cells = spec.cells()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let (done, failure) = simulate(spec, &cells);

    let mut raw = Vec::new();
    let mut runs = Vec::new();
    for (c, result) in &done {
        raw.extend(raw_rows(&spec.scenario, &cells[*c], result));
        runs.push(run_row(&spec.scenario, &cells[*c], result));
    }
    let aggregate = aggregate(&raw, &runs)?;
    write_rows(&out_dir.join(RAW_FILE), &raw)?;
    write_rows(&out_dir.join(RUNS_FILE), &runs)?;
    write_rows(&out_dir.join(AGGREGATE_FILE), &aggregate)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(ExperimentResults { raw, runs, aggregate }),
    }
}
