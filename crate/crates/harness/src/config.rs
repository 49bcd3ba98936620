//! Experiment description read from a TOML file.
//!
//! ```toml
//! name = "ordering"
//! scenario = "local2hop"
//! seeds = [0, 1, 2]
//!
//! [sweep]
//! loops = [3]
//!
//! [[policy]]
//! kind = "VoU_Inst"
//! lambda = [1.5, 2.0, 3.0]
//!
//! [[policy]]
//! kind = "VoU_Dyn_w"
//! lambda = [40.0, 48.0]
//! t_pr = [5, 10, 25]
//! processing_delay_ms = [0.0, 7.0]
//! ```
//!
//! Axes left out of a `[[policy]]` entry fall back to `[sweep]`, then to the
//! defaults below.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use vou_core::admission::PolicyKind;
use vou_netsim::{PolicyConfig, ScenarioConfig};

use crate::error::{Error, Result};

/// Environment variable that overrides the configured output directory.
pub const RESULT_DIR_VAR: &str = "RESULT_DIR";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// `ideal`, `local2hop` or `internet`.
    pub scenario: String,
    pub seeds: Vec<u64>,
    /// Steps per run.
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sweep: SweepAxes,
    pub policy: Vec<PolicyEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub lambda: Vec<f64>,
    pub t_pr: Vec<usize>,
    pub loops: Vec<usize>,
    pub processing_delay_ms: Vec<f64>,
    pub adapt_threshold: bool,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            lambda: vec![1.0],
            t_pr: vec![10],
            loops: vec![1],
            processing_delay_ms: vec![0.0],
            adapt_threshold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub kind: String,
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub t_pr: Option<Vec<usize>>,
    #[serde(default)]
    pub loops: Option<Vec<usize>>,
    #[serde(default)]
    pub processing_delay_ms: Option<Vec<f64>>,
    #[serde(default)]
    pub adapt_threshold: Option<bool>,
}

/// One point of the sweep grid; every seed is run once per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub policy: PolicyKind,
    /// Policy name plus `+adapt` and `+<d>ms` markers for threshold
    /// adaptation and processing delay.
    pub label: String,
    /// Threshold; 0 for policies without one.
    pub lambda: f64,
    /// Prediction horizon; 0 for policies without one.
    pub t_pr: usize,
    pub loops: usize,
    pub processing_delay_ms: f64,
    pub adapt_threshold: bool,
}

impl Cell {
    pub fn policy_config(&self) -> PolicyConfig {
        let mut p = PolicyConfig::new(self.policy, self.lambda).with_processing_delay(self.processing_delay_ms);
        if self.t_pr > 0 {
            p = p.with_horizon(self.t_pr);
        }
        if self.adapt_threshold {
            p = p.with_adaptation();
        }
        p
    }
}

pub fn policy_label(policy: PolicyKind, adapt: bool, delay_ms: f64) -> String {
    let mut label = policy.name().to_string();
    if adapt {
        label.push_str("+adapt");
    }
    if delay_ms > 0.0 {
        label.push_str(&format!("+{delay_ms}ms"));
    }
    label
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy.is_empty() {
            return Err(Error::Config("no policies configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        ScenarioConfig::preset(&self.scenario, 1).map_err(|e| Error::Config(e.to_string()))?;
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be positive".into()));
        }
        for entry in &self.policy {
            entry.kind.parse::<PolicyKind>().map_err(|e| Error::Config(e.to_string()))?;
        }
        let cells = self.cells()?;
        if cells.is_empty() {
            return Err(Error::Config("the sweep grid is empty".into()));
        }
        for c in &cells {
            if !(c.lambda >= 0.0 && c.lambda.is_finite()) {
                return Err(Error::Config(format!("invalid threshold {} for {}", c.lambda, c.label)));
            }
            if c.loops == 0 {
                return Err(Error::Config("loop count must be positive".into()));
            }
            if !(c.processing_delay_ms >= 0.0 && c.processing_delay_ms.is_finite()) {
                return Err(Error::Config(format!("invalid processing delay {}", c.processing_delay_ms)));
            }
        }
        Ok(())
    }

    /// Output directory: `RESULT_DIR` if set, else the configured path, else
    /// `results/<name>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(RESULT_DIR_VAR).filter(|d| !d.is_empty()) {
            return PathBuf::from(dir);
        }
        self.output.clone().unwrap_or_else(|| PathBuf::from("results").join(&self.name))
    }

    pub fn scenario_config(&self, loops: usize, seed: u64) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::preset(&self.scenario, loops).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(steps) = self.steps {
            cfg = cfg.with_steps(steps);
        }
        Ok(cfg.with_seed(seed))
    }

    /// Sweep grid in a fixed order: policies as listed, then loops, horizon,
    /// processing delay and threshold.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for entry in &self.policy {
            let policy: PolicyKind = entry
                .kind
                .parse()
                .map_err(|e: vou_core::admission::policy::UnknownPolicy| Error::Config(e.to_string()))?;
            let adapt = entry.adapt_threshold.unwrap_or(self.sweep.adapt_threshold);
            let lambdas = if policy.uses_threshold() {
                entry.lambda.clone().unwrap_or_else(|| self.sweep.lambda.clone())
            } else {
                vec![0.0]
            };
            let horizons = if policy.uses_horizon() {
                entry.t_pr.clone().unwrap_or_else(|| self.sweep.t_pr.clone())
            } else {
                vec![0]
            };
            let loops = entry.loops.clone().unwrap_or_else(|| self.sweep.loops.clone());
            let delays = entry.processing_delay_ms.clone().unwrap_or_else(|| self.sweep.processing_delay_ms.clone());
            for &n in &loops {
                for &t_pr in &horizons {
                    if policy.uses_horizon() && t_pr == 0 {
                        return Err(Error::Config(format!("{policy} needs a positive horizon")));
                    }
                    for &delay in &delays {
                        for &lambda in &lambdas {
                            cells.push(Cell {
                                policy,
                                label: policy_label(policy, adapt, delay),
                                lambda,
                                t_pr,
                                loops: n,
                                processing_delay_ms: delay,
                                adapt_threshold: adapt,
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        name = "sample"
        scenario = "local2hop"
        seeds = [1, 2]

        [sweep]
        lambda = [1.0, 2.0]
        loops = [3]

        [[policy]]
        kind = "VoU_Inst"

        [[policy]]
        kind = "vou_dyn_w"
        lambda = [40.0]
        t_pr = [5, 10]
        processing_delay_ms = [0.0, 7.0]

        [[policy]]
        kind = "ACP_Rate"
    "#;

    #[test]
    fn grid_expands_per_policy() {
        let spec = ExperimentSpec::from_toml(SAMPLE).unwrap();
        let cells = spec.cells().unwrap();
        let labels: Vec<(&str, f64, usize)> = cells.iter().map(|c| (c.label.as_str(), c.lambda, c.t_pr)).collect();
        assert_eq!(
            labels,
            vec![
                ("VoU_Inst", 1.0, 0),
                ("VoU_Inst", 2.0, 0),
                ("VoU_Dyn_w", 40.0, 5),
                ("VoU_Dyn_w+7ms", 40.0, 5),
                ("VoU_Dyn_w", 40.0, 10),
                ("VoU_Dyn_w+7ms", 40.0, 10),
                ("ACP_Rate", 0.0, 0),
            ]
        );
        assert!(cells.iter().all(|c| c.loops == 3));
    }

    #[test]
    fn labels_mark_adaptation_and_delay() {
        assert_eq!(policy_label(PolicyKind::VouDynW, true, 0.0), "VoU_Dyn_w+adapt");
        assert_eq!(policy_label(PolicyKind::VouDynW, false, 7.0), "VoU_Dyn_w+7ms");
        assert_eq!(policy_label(PolicyKind::VouDynW, false, 2.5), "VoU_Dyn_w+2.5ms");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SAMPLE.replace("seeds = [1, 2]", "seeds = []"),
            SAMPLE.replace("local2hop", "mesh"),
            SAMPLE.replace("\"ACP_Rate\"", "\"TCP\""),
            SAMPLE.replace("lambda = [40.0]", "lambda = [-1.0]"),
            SAMPLE.replace("loops = [3]", "loops = [0]"),
            SAMPLE.replace("loops = [3]", "loop = [3]"),
            SAMPLE.replace("t_pr = [5, 10]", "t_pr = [0]"),
            "name = \"x\"\nscenario = \"ideal\"\nseeds = [1]\npolicy = []".to_string(),
            "not toml at all [".to_string(),
        ];
        for text in bad {
            assert!(ExperimentSpec::from_toml(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn policy_config_carries_the_cell() {
        let spec = ExperimentSpec::from_toml(SAMPLE).unwrap();
        let cell = &spec.cells().unwrap()[3];
        let p = cell.policy_config();
        assert_eq!(p.kind, PolicyKind::VouDynW);
        assert_eq!(p.params.horizon, 5);
        assert_eq!(p.processing_delay_ms, 7.0);
        assert!(!p.adapt_threshold);
    }
}
