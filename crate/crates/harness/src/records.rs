//! Result files. Every file starts with a `# schema=1` line followed by a
//! CSV header.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "# schema=1";
pub const RAW_FILE: &str = "raw.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// One cost window of one run, averaged over the loops of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub scenario: String,
    pub policy: String,
    pub lambda: f64,
    pub t_pr: usize,
    pub loops: usize,
    pub seed: u64,
    pub window_q: usize,
    pub lqg_cost: f64,
}

/// Per-run metrics that are not cost windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: String,
    pub policy: String,
    pub lambda: f64,
    pub t_pr: usize,
    pub loops: usize,
    pub seed: u64,
    pub mean_aoi: f64,
    /// Admissions per second and loop.
    pub admission_rate: f64,
    /// Mean wall-clock time per admission decision, µs.
    pub decision_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub policy: String,
    pub lambda: f64,
    pub t_pr: usize,
    pub loops: usize,
    pub seeds: usize,
    pub mean_cost: f64,
    pub median_cost: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_aoi: f64,
    pub admission_rate: f64,
    pub decision_us: f64,
}

/// Grouping key shared by all three files.
#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub scenario: String,
    pub policy: String,
    pub lambda: f64,
    pub t_pr: usize,
    pub loops: usize,
}

impl CellKey {
    pub fn same(&self, other: &CellKey) -> bool {
        self.scenario == other.scenario
            && self.policy == other.policy
            && self.lambda.to_bits() == other.lambda.to_bits()
            && self.t_pr == other.t_pr
            && self.loops == other.loops
    }
}

pub trait Keyed {
    fn key(&self) -> CellKey;
}

macro_rules! keyed {
    ($t:ty) => {
        impl Keyed for $t {
            fn key(&self) -> CellKey {
                CellKey {
                    scenario: self.scenario.clone(),
                    policy: self.policy.clone(),
                    lambda: self.lambda,
                    t_pr: self.t_pr,
                    loops: self.loops,
                }
            }
        }
    };
}
keyed!(RawRow);
keyed!(RunRow);
keyed!(AggregateRow);

/// Group rows by cell, keeping the order in which cells first appear.
pub fn group_by_cell<T: Keyed>(rows: &[T]) -> Vec<(CellKey, Vec<&T>)> {
    let mut groups: Vec<(CellKey, Vec<&T>)> = Vec::new();
    for row in rows {
        let key = row.key();
        match groups.iter_mut().find(|(k, _)| k.same(&key)) {
            Some((_, members)) => members.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    groups
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut file = File::create(path).map_err(io)?;
    writeln!(file, "{SCHEMA_LINE}").map_err(io)?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(io)
}

/// Header written for a file without rows.
pub fn write_empty(path: &Path, header: &[&str]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut file = File::create(path).map_err(io)?;
    writeln!(file, "{SCHEMA_LINE}\n{}", header.join(",")).map_err(io)
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let format_err = |reason: String| Error::Format { file: path.display().to_string(), reason };
    if first.trim_end() != SCHEMA_LINE {
        return Err(format_err(format!("expected `{SCHEMA_LINE}`, found `{}`", first.trim_end())));
    }
    let mut csv = csv::Reader::from_reader(reader);
    csv.deserialize().map(|r| r.map_err(|e| format_err(e.to_string()))).collect()
}
