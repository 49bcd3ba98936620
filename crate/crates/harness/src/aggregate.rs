//! Folding raw cost windows and per-run metrics into one row per cell.

use crate::error::{Error, Result};
use crate::records::{group_by_cell, AggregateRow, RawRow, RunRow};

/// z-value of a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        v[n / 2 - 1] / 2.0 + v[n / 2] / 2.0
    }
}

/// Sample standard deviation, scaled so that very large costs do not
/// overflow when squared.
pub fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let scale = xs.iter().map(|x| (x - m).abs()).fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return if scale == 0.0 { 0.0 } else { f64::INFINITY };
    }
    let ss: f64 = xs.iter().map(|x| ((x - m) / scale).powi(2)).sum();
    scale * (ss / (n - 1) as f64).sqrt()
}

/// Normal 95% interval of the mean.
pub fn confidence_interval(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let half = Z_95 * std_dev(xs) / (xs.len() as f64).sqrt();
    (m - half, m + half)
}

/// One aggregate row per cell, in the order cells appear in `raw`.
pub fn aggregate(raw: &[RawRow], runs: &[RunRow]) -> Result<Vec<AggregateRow>> {
    let run_groups = group_by_cell(runs);
    group_by_cell(raw)
        .into_iter()
        .map(|(key, rows)| {
            let costs: Vec<f64> = rows.iter().map(|r| r.lqg_cost).collect();
            let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let cell_runs = run_groups.iter().find(|(k, _)| k.same(&key)).map(|(_, r)| r.as_slice()).unwrap_or(&[]);
            let mut run_seeds: Vec<u64> = cell_runs.iter().map(|r| r.seed).collect();
            run_seeds.sort_unstable();
            if run_seeds != seeds {
                return Err(Error::Mismatch(format!(
                    "{} λ={}: cost windows for seeds {seeds:?} but run metrics for {run_seeds:?}",
                    key.policy, key.lambda
                )));
            }
            let per_run = |f: fn(&RunRow) -> f64| mean(&cell_runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (ci_low, ci_high) = confidence_interval(&costs);
            Ok(AggregateRow {
                scenario: key.scenario.clone(),
                policy: key.policy.clone(),
                lambda: key.lambda,
                t_pr: key.t_pr,
                loops: key.loops,
                seeds: seeds.len(),
                mean_cost: mean(&costs),
                median_cost: median(&costs),
                ci_low,
                ci_high,
                mean_aoi: per_run(|r| r.mean_aoi),
                admission_rate: per_run(|r| r.admission_rate),
                decision_us: per_run(|r| r.decision_us),
            })
        })
        .collect()
}

/// Best threshold of one policy: the row with the lowest mean cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<'a> {
    pub row: &'a AggregateRow,
    pub candidates: usize,
}

/// Rows of `policy`, optionally restricted to a loop count and horizon.
pub fn best_row<'a>(
    rows: &'a [AggregateRow],
    policy: &str,
    loops: Option<usize>,
    t_pr: Option<usize>,
) -> Result<Selection<'a>> {
    let matching: Vec<&AggregateRow> = rows
        .iter()
        .filter(|r| r.policy == policy)
        .filter(|r| loops.is_none_or(|l| r.loops == l))
        .filter(|r| t_pr.is_none_or(|t| r.t_pr == t))
        .collect();
    let row = matching
        .iter()
        .copied()
        .reduce(|best, r| if r.mean_cost.total_cmp(&best.mean_cost).is_lt() { r } else { best })
        .ok_or_else(|| Error::MissingPolicy(policy.to_string()))?;
    Ok(Selection { row, candidates: matching.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: AggregateRow,
    pub b: AggregateRow,
    /// `(mean_b - mean_a) / mean_b`.
    pub improvement: f64,
    pub ci_disjoint: bool,
}

pub fn compare_rows(a: &AggregateRow, b: &AggregateRow) -> Comparison {
    let improvement = if a.mean_cost == b.mean_cost { 0.0 } else { (b.mean_cost - a.mean_cost) / b.mean_cost };
    let ci_disjoint = a.ci_high < b.ci_low || b.ci_high < a.ci_low;
    Comparison { a: a.clone(), b: b.clone(), improvement, ci_disjoint }
}

/// Compare two policies, each at its best threshold.
pub fn compare_policies(
    rows: &[AggregateRow],
    a: &str,
    b: &str,
    loops: Option<usize>,
    t_pr: Option<usize>,
) -> Result<Comparison> {
    let best_a = best_row(rows, a, loops, t_pr)?;
    let best_b = best_row(rows, b, loops, t_pr)?;
    Ok(compare_rows(best_a.row, best_b.row))
}
