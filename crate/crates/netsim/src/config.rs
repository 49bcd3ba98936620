use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};

use vou_core::admission::{AcpConfig, PolicyKind, PolicyParams, ThresholdConfig};
use vou_core::control::LoopModel;

use crate::error::{Error, Result};

/// Payload of a sensor update in bytes.
pub const PAYLOAD_BYTES: usize = 20;
pub const DEFAULT_STEPS: u64 = 8000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServiceTime {
    Deterministic {
        ms: f64,
    },
    Exponential {
        mean_ms: f64,
    },
    /// Fixed part plus exponential jitter.
    ShiftedExponential {
        base_ms: f64,
        mean_jitter_ms: f64,
    },
    LogNormal {
        median_ms: f64,
        sigma: f64,
    },
}

impl ServiceTime {
    pub fn mean_ms(&self) -> f64 {
        match *self {
            ServiceTime::Deterministic { ms } => ms,
            ServiceTime::Exponential { mean_ms } => mean_ms,
            ServiceTime::ShiftedExponential { base_ms, mean_jitter_ms } => base_ms + mean_jitter_ms,
            ServiceTime::LogNormal { median_ms, sigma } => median_ms * (sigma * sigma / 2.0).exp(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ServiceTime::Deterministic { ms } => ms,
            ServiceTime::Exponential { mean_ms } => exp_sample(rng, mean_ms),
            ServiceTime::ShiftedExponential { base_ms, mean_jitter_ms } => base_ms + exp_sample(rng, mean_jitter_ms),
            ServiceTime::LogNormal { median_ms, sigma } => {
                LogNormal::new(median_ms.ln(), sigma).expect("validated").sample(rng)
            }
        }
    }

    fn validate(&self, hop: &str) -> Result<()> {
        let ok = match *self {
            ServiceTime::Deterministic { ms } => ms >= 0.0 && ms.is_finite(),
            ServiceTime::Exponential { mean_ms } => mean_ms > 0.0 && mean_ms.is_finite(),
            ServiceTime::ShiftedExponential { base_ms, mean_jitter_ms } => {
                base_ms >= 0.0 && mean_jitter_ms >= 0.0 && (base_ms + mean_jitter_ms).is_finite()
            }
            ServiceTime::LogNormal { median_ms, sigma } => median_ms > 0.0 && sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("hop `{hop}`: invalid service time {self:?}")))
        }
    }
}

fn exp_sample<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Exp::new(1.0 / mean).expect("positive rate").sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopKind {
    /// Single FIFO server with a waiting queue.
    Queue,
    /// Independent per-packet delay, order preserving, no queueing.
    DelayLine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopModel {
    pub name: String,
    pub kind: HopKind,
    pub service: ServiceTime,
    pub loss_prob: f64,
    /// Waiting-room size; `None` is unbounded.
    pub queue_capacity: Option<usize>,
    /// Hops in one group share a single server and queue.
    pub medium_group: Option<u32>,
}

impl HopModel {
    pub fn queue(name: impl Into<String>, service: ServiceTime, loss_prob: f64, queue_capacity: Option<usize>) -> Self {
        Self { name: name.into(), kind: HopKind::Queue, service, loss_prob, queue_capacity, medium_group: None }
    }

    pub fn delay_line(name: impl Into<String>, service: ServiceTime, loss_prob: f64) -> Self {
        Self {
            name: name.into(),
            kind: HopKind::DelayLine,
            service,
            loss_prob,
            queue_capacity: None,
            medium_group: None,
        }
    }

    pub fn in_group(mut self, group: u32) -> Self {
        self.medium_group = Some(group);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(Error::Invalid(format!(
                "hop `{}`: loss probability {} outside [0,1]",
                self.name, self.loss_prob
            )));
        }
        if self.kind == HopKind::DelayLine && self.medium_group.is_some() {
            return Err(Error::Invalid(format!("hop `{}`: delay lines cannot share a medium", self.name)));
        }
        self.service.validate(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundFlow {
    pub period_ms: f64,
    pub offset_ms: f64,
    pub payload_bytes: usize,
    /// Hop indices traversed by every dummy message.
    pub path: Vec<usize>,
}

/// How the sensors of all loops decide.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub lambda: f64,
    pub params: PolicyParams,
    /// Artificial delay between sampling and handing an update to the network.
    pub processing_delay_ms: f64,
    /// Track the rate suggested by the age-driven rate controller by adapting λ.
    pub adapt_threshold: bool,
    pub threshold: ThresholdConfig,
    /// `None` derives the defaults from the sampling period.
    pub acp: Option<AcpConfig>,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            params: PolicyParams::default(),
            processing_delay_ms: 0.0,
            adapt_threshold: false,
            threshold: ThresholdConfig::default(),
            acp: None,
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.params.horizon = horizon;
        self
    }

    pub fn with_processing_delay(mut self, ms: f64) -> Self {
        self.processing_delay_ms = ms;
        self
    }

    pub fn with_adaptation(mut self) -> Self {
        self.adapt_threshold = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub loops: usize,
    pub model: LoopModel,
    pub steps: u64,
    pub hops: Vec<HopModel>,
    /// Per-loop sensor-to-controller hop indices.
    pub data_paths: Vec<Vec<usize>>,
    /// Per-loop controller-to-sensor hop indices.
    pub ack_paths: Vec<Vec<usize>>,
    pub background: Vec<BackgroundFlow>,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn period_ms(&self) -> f64 {
        self.model.period_ms()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.loops == 0 {
            return Err(Error::Invalid("at least one loop is required".into()));
        }
        if self.data_paths.len() != self.loops || self.ack_paths.len() != self.loops {
            return Err(Error::Invalid(format!(
                "{} loops but {} data and {} ACK paths",
                self.loops,
                self.data_paths.len(),
                self.ack_paths.len()
            )));
        }
        for hop in &self.hops {
            hop.validate()?;
        }
        let paths = self.data_paths.iter().chain(&self.ack_paths).chain(self.background.iter().map(|b| &b.path));
        for path in paths {
            if path.is_empty() {
                return Err(Error::Invalid("empty path".into()));
            }
            if let Some(&bad) = path.iter().find(|&&h| h >= self.hops.len()) {
                return Err(Error::Invalid(format!("path uses unknown hop {bad}")));
            }
        }
        for flow in &self.background {
            if flow.period_ms.is_nan() || flow.period_ms <= 0.0 {
                return Err(Error::Invalid("background period must be positive".into()));
            }
        }
        if self.steps == 0 {
            return Err(Error::Invalid("run needs at least one step".into()));
        }
        Ok(())
    }

    /// Zero-delay, loss-free channel with one hop each way.
    pub fn ideal(loops: usize) -> Self {
        let mut hops = Vec::new();
        let mut data_paths = Vec::new();
        let mut ack_paths = Vec::new();
        let instant = ServiceTime::Deterministic { ms: 0.0 };
        for i in 0..loops {
            hops.push(HopModel::queue(format!("up{i}"), instant, 0.0, None));
            hops.push(HopModel::queue(format!("down{i}"), instant, 0.0, None));
            data_paths.push(vec![2 * i]);
            ack_paths.push(vec![2 * i + 1]);
        }
        Self {
            name: "ideal".into(),
            loops,
            model: LoopModel::reference(),
            steps: DEFAULT_STEPS,
            hops,
            data_paths,
            ack_paths,
            background: Vec::new(),
            seed: 0,
        }
    }

    /// Sensors reach the controller over a shared wireless access medium and
    /// a relay; dummy traffic every 10 ms competes on the access medium.
    pub fn local_two_hop(loops: usize) -> Self {
        let radio = ServiceTime::ShiftedExponential { base_ms: 2.5, mean_jitter_ms: 1.5 };
        let (loss, cap) = (0.005, Some(16));
        let mut hops = vec![
            HopModel::queue("relay", radio, loss, cap),
            HopModel::queue("relay-ack", radio, loss, cap),
            HopModel::queue("background", radio, loss, cap).in_group(0),
        ];
        let mut data_paths = Vec::new();
        let mut ack_paths = Vec::new();
        for i in 0..loops {
            let up = hops.len();
            hops.push(HopModel::queue(format!("access{i}"), radio, loss, cap).in_group(0));
            hops.push(HopModel::queue(format!("access{i}-ack"), radio, loss, cap));
            data_paths.push(vec![up, 0]);
            ack_paths.push(vec![1, up + 1]);
        }
        Self {
            name: "local2hop".into(),
            loops,
            model: LoopModel::reference(),
            steps: DEFAULT_STEPS,
            hops,
            data_paths,
            ack_paths,
            background: vec![BackgroundFlow {
                period_ms: 10.0,
                offset_ms: 5.0,
                payload_bytes: PAYLOAD_BYTES,
                path: vec![2],
            }],
            seed: 0,
        }
    }

    /// The wireless access medium followed by a wide-area backbone with
    /// heavy-tailed delay.
    pub fn internet(loops: usize) -> Self {
        let radio = ServiceTime::ShiftedExponential { base_ms: 1.5, mean_jitter_ms: 1.0 };
        let backbone = ServiceTime::LogNormal { median_ms: 25.0, sigma: 0.5 };
        let (loss, cap) = (0.02, Some(16));
        let mut hops = vec![
            HopModel::delay_line("backbone", backbone, 0.01),
            HopModel::delay_line("backbone-ack", backbone, 0.01),
            HopModel::queue("background", radio, loss, cap).in_group(0),
        ];
        let mut data_paths = Vec::new();
        let mut ack_paths = Vec::new();
        for i in 0..loops {
            let up = hops.len();
            hops.push(HopModel::queue(format!("access{i}"), radio, loss, cap).in_group(0));
            hops.push(HopModel::queue(format!("access{i}-ack"), radio, loss, cap));
            data_paths.push(vec![up, 0]);
            ack_paths.push(vec![1, up + 1]);
        }
        Self {
            name: "internet".into(),
            loops,
            model: LoopModel::reference(),
            steps: DEFAULT_STEPS,
            hops,
            data_paths,
            ack_paths,
            background: vec![BackgroundFlow {
                period_ms: 20.0,
                offset_ms: 5.0,
                payload_bytes: PAYLOAD_BYTES,
                path: vec![2],
            }],
            seed: 0,
        }
    }

    /// Preset by name: `ideal`, `local2hop` or `internet`.
    pub fn preset(name: &str, loops: usize) -> Result<Self> {
        match name {
            "ideal" => Ok(Self::ideal(loops)),
            "local2hop" => Ok(Self::local_two_hop(loops)),
            "internet" => Ok(Self::internet(loops)),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }
}
