//! Belief network over the network states of outstanding packets.
//!
//! Each outstanding packet is either already processed by the network
//! (received or lost) or still in flight (will be received or will be lost).
//! The state probabilities come from a uniform processing-time model whose
//! conditional loss probability is a power of the elapsed time, calibrated so
//! that the overall loss equals `p_l`.

use crate::error::{Error, Result};
use crate::net_stats::{NetStats, OutstandingPacket};
use crate::Step;

/// Minimum number of delay samples before the state model is trusted.
pub const COLD_START_SAMPLES: usize = 8;
pub const DEFAULT_MAX_NODE_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpState {
    Received,
    WillReceive,
    Lost,
    WillLose,
}

impl OpState {
    pub const ALL: [OpState; 4] = [OpState::Received, OpState::WillReceive, OpState::Lost, OpState::WillLose];

    /// Already handled by the network (delivered or dropped).
    pub fn is_processed(self) -> bool {
        matches!(self, OpState::Received | OpState::Lost)
    }

    /// Delivered now or in the future.
    pub fn reaches_controller(self) -> bool {
        matches!(self, OpState::Received | OpState::WillReceive)
    }

    pub fn label(self) -> &'static str {
        match self {
            OpState::Received => "R",
            OpState::WillReceive => "WR",
            OpState::Lost => "L",
            OpState::WillLose => "WL",
        }
    }
}

/// Parameters of the per-packet state model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateProbModel {
    p_l: f64,
    t_max_ms: f64,
    alpha: f64,
}

impl StateProbModel {
    pub fn new(p_l: f64, t_max_ms: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_l) {
            return Err(Error::InvalidModel(format!("loss probability {p_l} outside [0, 1]")));
        }
        if !(t_max_ms.is_finite() && t_max_ms > 0.0) {
            return Err(Error::InvalidModel(format!("t_max must be positive, got {t_max_ms}")));
        }
        let alpha = if p_l > 0.0 { 1.0 / p_l - 1.0 } else { f64::INFINITY };
        Ok(Self { p_l, t_max_ms, alpha })
    }

    /// Model from ACK statistics, `None` while they are too thin.
    pub fn from_stats(stats: &NetStats) -> Option<Self> {
        if stats.delay_samples().len() < COLD_START_SAMPLES {
            return None;
        }
        Self::new(stats.loss_prob(), stats.t_max_ms()).ok()
    }

    pub fn p_l(&self) -> f64 {
        self.p_l
    }

    pub fn t_max_ms(&self) -> f64 {
        self.t_max_ms
    }

    /// Exponent of the conditional loss curve, `1/p_l - 1`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Probabilities of the four states for one packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateProbs {
    pub received: f64,
    pub will_receive: f64,
    pub lost: f64,
    pub will_lose: f64,
}

impl StateProbs {
    pub fn get(&self, s: OpState) -> f64 {
        match s {
            OpState::Received => self.received,
            OpState::WillReceive => self.will_receive,
            OpState::Lost => self.lost,
            OpState::WillLose => self.will_lose,
        }
    }

    pub fn sum(&self) -> f64 {
        self.received + self.will_receive + self.lost + self.will_lose
    }
}

/// State probabilities of a packet sent `elapsed_ms` ago.
pub fn op_state_probs(model: &StateProbModel, elapsed_ms: f64) -> StateProbs {
    let p_l = model.p_l;
    let s = (elapsed_ms.clamp(0.0, model.t_max_ms)) / model.t_max_ms;
    let (received, lost) = if p_l == 0.0 {
        (s, 0.0)
    } else {
        let lost = s.powf(1.0 / p_l) * p_l;
        (s - lost, lost)
    };
    StateProbs {
        received: received.clamp(0.0, 1.0),
        will_receive: ((1.0 - p_l) - received).clamp(0.0, 1.0),
        lost: lost.clamp(0.0, 1.0),
        will_lose: (p_l - lost).clamp(0.0, 1.0),
    }
}

/// One hypothesis about the joint state of the outstanding packets.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefNode {
    /// `(generation step, state)`, oldest first.
    pub assignments: Vec<(Step, OpState)>,
    pub probability: f64,
}

impl BeliefNode {
    /// Freshest packet that reaches the controller in this hypothesis.
    pub fn freshest_delivered(&self) -> Option<(Step, OpState)> {
        self.assignments.iter().rev().copied().find(|(_, s)| s.reaches_controller())
    }

    /// No older packet is still in flight while a fresher one is processed.
    pub fn is_feasible(&self) -> bool {
        is_feasible(self.assignments.iter().map(|&(_, s)| s))
    }
}

fn is_feasible(states: impl Iterator<Item = OpState>) -> bool {
    let mut seen_in_flight = false;
    for s in states {
        if s.is_processed() {
            if seen_in_flight {
                return false;
            }
        } else {
            seen_in_flight = true;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub max_node_size: usize,
    /// Rescale node probabilities to sum to one over the feasible nodes.
    pub renormalize: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { max_node_size: DEFAULT_MAX_NODE_SIZE, renormalize: true }
    }
}

/// Enumerate the feasible joint states of the freshest `max_node_size`
/// outstanding packets (given oldest first).
///
/// With `model == None` (too few statistics) every packet is assumed to be
/// on its way to the controller.
pub fn build_nodes(
    ops: &[OutstandingPacket],
    now_ms: f64,
    model: Option<&StateProbModel>,
    opts: BuildOptions,
) -> Vec<BeliefNode> {
    let ops = &ops[ops.len().saturating_sub(opts.max_node_size)..];
    let Some(model) = model else {
        return vec![BeliefNode {
            assignments: ops.iter().map(|op| (op.gen_step, OpState::WillReceive)).collect(),
            probability: 1.0,
        }];
    };

    let probs: Vec<StateProbs> = ops.iter().map(|op| op_state_probs(model, now_ms - op.send_ms)).collect();
    let n = ops.len();
    let mut nodes = Vec::with_capacity((n + 1) << n);
    let mut states = vec![OpState::Received; n];
    for code in 0..(1usize << (2 * n)) {
        for (i, s) in states.iter_mut().enumerate() {
            *s = OpState::ALL[(code >> (2 * i)) & 3];
        }
        if !is_feasible(states.iter().copied()) {
            continue;
        }
        let probability = states.iter().zip(&probs).map(|(&s, p)| p.get(s)).product();
        nodes.push(BeliefNode {
            assignments: ops.iter().zip(&states).map(|(op, &s)| (op.gen_step, s)).collect(),
            probability,
        });
    }

    if opts.renormalize {
        let total: f64 = nodes.iter().map(|n| n.probability).sum();
        if total > 0.0 {
            for node in &mut nodes {
                node.probability /= total;
            }
        }
    }
    nodes
}
