//! Sensor-side replay of the controller's estimator.
//!
//! The sensor knows every sample it took and, through ACKs, part of what the
//! controller received. Replaying the estimator over a hypothesised
//! observation history yields the controller's estimate under that
//! hypothesis; weighting hypotheses by their belief-network probability gives
//! the relevance of the current sample.
//!
//! [`augment_estimate`] is the plain full replay over an explicit history.
//! [`AckedHistory`] keeps an incrementally maintained replay of the ACKed
//! history so that per-hypothesis replays only need to cover the last few
//! steps.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::belief::{BeliefNode, OpState};
use crate::control::{LoopModel, ObservationHistory};
use crate::error::{Error, Result};
use crate::net_stats::NetStats;
use crate::Step;

/// Observation history presumed to be available to the controller.
pub type AugmentedHistory = ObservationHistory;

/// Output of a full replay: estimates and inputs for steps `start..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub start: Step,
    pub estimates: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Replay {
    pub fn estimate_at(&self, t: Step) -> Option<&DVector<f64>> {
        t.checked_sub(self.start).and_then(|i| self.estimates.get(i as usize))
    }

    pub fn input_at(&self, t: Step) -> Option<&DVector<f64>> {
        t.checked_sub(self.start).and_then(|i| self.inputs.get(i as usize))
    }

    /// Estimate at the last replayed step.
    pub fn last_estimate(&self) -> &DVector<f64> {
        self.estimates.last().expect("replay covers at least one step")
    }
}

/// Replay the controller from its zero prior up to step `k` over `history`.
///
/// Before the first reception the estimate and the inputs are zero, so the
/// replay starts at the earliest reception step (or at `k` when nothing has
/// been received by then).
pub fn augment_estimate(k: Step, history: &AugmentedHistory, model: &LoopModel) -> Replay {
    let n = model.state_dim();
    let m = model.input_dim();
    let start = history.entries().first().map_or(k, |e| e.recv_step.min(k));
    let len = (k - start + 1) as usize;
    let mut estimates: Vec<DVector<f64>> = Vec::with_capacity(len);
    let mut inputs: Vec<DVector<f64>> = Vec::with_capacity(len);
    let input = |inputs: &Vec<DVector<f64>>, j: Step| -> DVector<f64> {
        if j < start {
            DVector::zeros(m)
        } else {
            inputs[(j - start) as usize].clone()
        }
    };

    let mut est = DVector::zeros(n);
    let mut fresh: Option<Step> = None;
    let entries = history.entries();
    let mut cursor = entries.partition_point(|e| e.recv_step < start);
    for t in start..=k {
        if t > start {
            est = model.a() * &est + model.b() * input(&inputs, t - 1);
        }
        let mut best: Option<&crate::control::Observation> = None;
        while cursor < entries.len() && entries[cursor].recv_step == t {
            let e = &entries[cursor];
            if fresh.is_none_or(|g| e.gen_step > g) && best.is_none_or(|b| e.gen_step > b.gen_step) {
                best = Some(e);
            }
            cursor += 1;
        }
        if let Some(obs) = best {
            let mut z = obs.measurement.clone();
            for j in obs.gen_step..t {
                z = model.a() * z + model.b() * input(&inputs, j);
            }
            est = z;
            fresh = Some(obs.gen_step);
        }
        let u = -(model.gain() * &est);
        estimates.push(est.clone());
        inputs.push(u);
    }
    Replay { start, estimates, inputs }
}

/// Replayed estimates are kept within `±ESTIMATE_BOUND`. A replay over a sparse
/// ACKed history can run away under long delays; bounding it keeps every
/// relevance finite.
pub const ESTIMATE_BOUND: f64 = 1e100;

#[inline]
fn bound(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = if v.is_nan() { ESTIMATE_BOUND } else { v.clamp(-ESTIMATE_BOUND, ESTIMATE_BOUND) };
    }
}

/// `‖a - b‖₁`, the scalar error magnitude used by both relevance measures.
#[inline]
pub fn error_magnitude(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Sensor samples plus the ACKed part of the controller's observation
/// history, with the controller replay over that history cached per step.
#[derive(Debug, Clone)]
pub struct AckedHistory {
    n: usize,
    m: usize,
    capacity: usize,
    /// First step held in the per-step buffers.
    first: Step,
    samples: Vec<f64>,
    estimates: Vec<f64>,
    inputs: Vec<f64>,
    fresh: Vec<Option<Step>>,
    /// Number of steps with a valid replay.
    replayed: usize,
    /// `(recv_step, gen_step)` of every ACKed update, sorted.
    acked: Vec<(Step, Step)>,
    scratch: Vec<f64>,
}

impl AckedHistory {
    pub const DEFAULT_CAPACITY: usize = 1 << 15;

    pub fn new(model: &LoopModel) -> Self {
        Self::with_capacity(model, Self::DEFAULT_CAPACITY)
    }

    pub fn with_capacity(model: &LoopModel, capacity: usize) -> Self {
        Self {
            n: model.state_dim(),
            m: model.input_dim(),
            capacity: capacity.max(16),
            first: 0,
            samples: Vec::new(),
            estimates: Vec::new(),
            inputs: Vec::new(),
            fresh: Vec::new(),
            replayed: 0,
            acked: Vec::new(),
            scratch: vec![0.0; model.state_dim()],
        }
    }

    /// Step after the last recorded sample.
    pub fn next_step(&self) -> Step {
        self.first + self.fresh.len() as Step
    }

    pub fn first_step(&self) -> Step {
        self.first
    }

    /// Record the sample taken at `k`; steps must be consecutive.
    pub fn record_sample(&mut self, k: Step, x: &[f64]) -> Result<()> {
        if k != self.next_step() {
            return Err(Error::TickOrder { expected: self.next_step(), got: k });
        }
        if x.len() != self.n {
            return Err(Error::Dimension(format!("sample of length {} for a {}-state loop", x.len(), self.n)));
        }
        self.samples.extend_from_slice(x);
        self.estimates.extend(std::iter::repeat_n(0.0, self.n));
        self.inputs.extend(std::iter::repeat_n(0.0, self.m));
        self.fresh.push(None);
        if self.fresh.len() > self.capacity + self.capacity / 4 {
            self.trim(self.capacity / 4);
        }
        Ok(())
    }

    fn trim(&mut self, drop: usize) {
        // Keep at least one replayed step as the anchor for later refreshes.
        let drop = drop.min(self.replayed.saturating_sub(1));
        self.samples.drain(..drop * self.n);
        self.estimates.drain(..drop * self.n);
        self.inputs.drain(..drop * self.m);
        self.fresh.drain(..drop);
        self.replayed -= drop;
        self.first += drop as Step;
        let first = self.first;
        self.acked.retain(|&(recv, _)| recv >= first);
    }

    pub fn sample(&self, t: Step) -> Option<&[f64]> {
        let i = self.index(t)?;
        Some(&self.samples[i * self.n..(i + 1) * self.n])
    }

    fn index(&self, t: Step) -> Option<usize> {
        let i = t.checked_sub(self.first)? as usize;
        (i < self.fresh.len()).then_some(i)
    }

    /// Add an ACKed observation; the cached replay is invalidated from its
    /// reception step on.
    pub fn add_ack(&mut self, gen_step: Step, recv_step: Step) -> Result<()> {
        if recv_step < gen_step {
            return Err(Error::Dimension(format!("reception {recv_step} before generation {gen_step}")));
        }
        if self.index(gen_step).is_none() || (self.first > 0 && recv_step <= self.first) {
            return Err(Error::InputWindow { needed: gen_step, oldest: self.first + 1 });
        }
        let key = (recv_step, gen_step);
        let at = self.acked.partition_point(|&e| e <= key);
        self.acked.insert(at, key);
        let invalid_from = recv_step.saturating_sub(self.first) as usize;
        self.replayed = self.replayed.min(invalid_from);
        Ok(())
    }

    /// ACKed observations as `(gen_step, recv_step)`, in reception order.
    pub fn acked(&self) -> impl Iterator<Item = (Step, Step)> + '_ {
        self.acked.iter().map(|&(r, g)| (g, r))
    }

    /// The ACKed history as an explicit observation history.
    pub fn to_history(&self) -> ObservationHistory {
        ObservationHistory::from_entries(self.acked.iter().filter_map(|&(recv, gen)| {
            Some(crate::control::Observation {
                gen_step: gen,
                recv_step: recv,
                measurement: DVector::from_column_slice(self.sample(gen)?),
            })
        }))
    }

    fn receptions_at(&self, t: Step) -> &[(Step, Step)] {
        let lo = self.acked.partition_point(|&(r, _)| r < t);
        let hi = self.acked.partition_point(|&(r, _)| r <= t);
        &self.acked[lo..hi]
    }

    /// Bring the cached replay up to date through the last recorded sample.
    pub fn refresh(&mut self, model: &LoopModel) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let mut prev_est = vec![0.0; n];
        let mut prev_u = vec![0.0; m];
        let mut fresh: Option<Step> = None;
        if self.replayed > 0 {
            let i = self.replayed - 1;
            prev_est.copy_from_slice(&self.estimates[i * n..(i + 1) * n]);
            prev_u.copy_from_slice(&self.inputs[i * m..(i + 1) * m]);
            fresh = self.fresh[i];
        }
        let mut est = vec![0.0; n];
        let mut u = vec![0.0; m];
        let mut tmp = std::mem::take(&mut self.scratch);
        for i in self.replayed..self.fresh.len() {
            let t = self.first + i as Step;
            if t > 0 {
                model.propagate_into(&prev_est, &prev_u, &mut est);
            } else {
                est.fill(0.0);
            }
            let best = self.receptions_at(t).iter().map(|&(_, g)| g).filter(|&g| fresh.is_none_or(|f| g > f)).max();
            if let Some(g) = best {
                let inputs = |j: Step| -> &[f64] {
                    let ji = (j - self.first) as usize;
                    &self.inputs[ji * m..(ji + 1) * m]
                };
                let x_g = self.sample(g).ok_or(Error::InputWindow { needed: g, oldest: self.first })?;
                reset_estimate(model, x_g, g, t, &inputs, &mut est, &mut tmp);
                fresh = Some(g);
            }
            bound(&mut est);
            model.feedback_into(&est, &mut u);
            self.estimates[i * n..(i + 1) * n].copy_from_slice(&est);
            self.inputs[i * m..(i + 1) * m].copy_from_slice(&u);
            self.fresh[i] = fresh;
            std::mem::swap(&mut prev_est, &mut est);
            std::mem::swap(&mut prev_u, &mut u);
        }
        self.scratch = tmp;
        self.replayed = self.fresh.len();
        Ok(())
    }

    fn ensure_fresh(&self, t: Step) {
        debug_assert!(
            self.index(t).is_some_and(|i| i < self.replayed),
            "replay of step {t} is stale; call refresh first"
        );
    }

    /// Replayed controller estimate at `t` under the ACKed history.
    pub fn estimate(&self, t: Step) -> &[f64] {
        self.ensure_fresh(t);
        let i = self.index(t).expect("step retained");
        &self.estimates[i * self.n..(i + 1) * self.n]
    }

    pub fn input(&self, t: Step) -> &[f64] {
        self.ensure_fresh(t);
        let i = self.index(t).expect("step retained");
        &self.inputs[i * self.m..(i + 1) * self.m]
    }

    /// Generation step behind the replayed estimate at `t`.
    pub fn fresh_gen(&self, t: Step) -> Option<Step> {
        self.ensure_fresh(t);
        self.fresh[self.index(t).expect("step retained")]
    }
}

/// `out = x_gen` propagated over `[gen, t)` with the given inputs.
fn reset_estimate<'a>(
    model: &LoopModel,
    x_gen: &[f64],
    gen: Step,
    t: Step,
    inputs: &dyn Fn(Step) -> &'a [f64],
    out: &mut [f64],
    tmp: &mut [f64],
) {
    out.copy_from_slice(x_gen);
    for j in gen..t {
        tmp.copy_from_slice(out);
        model.propagate_into(tmp, inputs(j), out);
    }
}

/// A hypothesised reception of the sample generated at `gen_step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtraReception {
    pub gen_step: Step,
    pub recv_step: Step,
}

/// Scratch space reused across branch replays.
#[derive(Debug, Default)]
struct BranchBuf {
    inputs: Vec<f64>,
    est: Vec<f64>,
    prev_est: Vec<f64>,
    prev_u: Vec<f64>,
    u: Vec<f64>,
    tmp: Vec<f64>,
    plant: Vec<f64>,
    plant_next: Vec<f64>,
}

/// Replay the ACKed history plus `extras` from the earliest affected step to
/// `end`. Returns the estimate at `k`, and when `plant` is given (current
/// sample and the disturbance sequence for `k..end`) the accumulated
/// `Σ_{t=k}^{end} ‖x̄_t - x̃_t‖₁` along the predicted plant trajectory.
#[allow(clippy::too_many_arguments)]
fn replay_branch(
    hist: &AckedHistory,
    model: &LoopModel,
    k: Step,
    end: Step,
    extras: &[ExtraReception],
    plant: Option<(&[f64], &[f64])>,
    buf: &mut BranchBuf,
    est_at_k: &mut [f64],
) -> f64 {
    let (n, m) = (hist.n, hist.m);
    let earliest = extras.iter().map(|e| e.recv_step).filter(|&r| r <= k).min().unwrap_or(k);
    let s = earliest.max(hist.first + 1).min(k);

    buf.prev_est.resize(n, 0.0);
    buf.prev_u.resize(m, 0.0);
    buf.est.resize(n, 0.0);
    buf.u.resize(m, 0.0);
    buf.tmp.resize(n, 0.0);
    let mut fresh = None;
    if let Some(prev) = s.checked_sub(1).filter(|&p| hist.index(p).is_some()) {
        buf.prev_est.copy_from_slice(hist.estimate(prev));
        buf.prev_u.copy_from_slice(hist.input(prev));
        fresh = hist.fresh_gen(prev);
    } else {
        buf.prev_est.fill(0.0);
        buf.prev_u.fill(0.0);
    }
    let steps = (end - s + 1) as usize;
    buf.inputs.clear();
    buf.inputs.resize(steps * m, 0.0);

    let mut err_sum = 0.0;
    if let Some((x_k, _)) = plant {
        buf.plant.clear();
        buf.plant.extend_from_slice(x_k);
        buf.plant_next.resize(n, 0.0);
    }

    for t in s..=end {
        if t > 0 {
            model.propagate_into(&buf.prev_est, &buf.prev_u, &mut buf.est);
        } else {
            buf.est.fill(0.0);
        }
        let mut best: Option<Step> = None;
        let mut consider = |g: Step| {
            if fresh.is_none_or(|f| g > f) && best.is_none_or(|b| g > b) {
                best = Some(g);
            }
        };
        if t <= k {
            for &(_, g) in hist.receptions_at(t) {
                consider(g);
            }
        }
        for e in extras.iter().filter(|e| e.recv_step == t) {
            consider(e.gen_step);
        }
        if let Some(g) = best {
            if let Some(x_g) = hist.sample(g) {
                let local = &buf.inputs;
                let inputs = |j: Step| -> &[f64] {
                    if j < s {
                        hist.input(j)
                    } else {
                        let ji = (j - s) as usize;
                        &local[ji * m..(ji + 1) * m]
                    }
                };
                let mut out = std::mem::take(&mut buf.est);
                reset_estimate(model, x_g, g, t, &inputs, &mut out, &mut buf.tmp);
                buf.est = out;
                fresh = Some(g);
            }
        }
        bound(&mut buf.est);
        model.feedback_into(&buf.est, &mut buf.u);
        let ti = (t - s) as usize;
        buf.inputs[ti * m..(ti + 1) * m].copy_from_slice(&buf.u);

        if t == k {
            est_at_k.copy_from_slice(&buf.est);
        }
        if t >= k {
            if let Some((_, noise)) = plant {
                err_sum += error_magnitude(&buf.plant, &buf.est);
                if t < end {
                    let w = &noise[(t - k) as usize * n..(t - k + 1) as usize * n];
                    model.propagate_into(&buf.plant, &buf.u, &mut buf.plant_next);
                    for (p, wi) in buf.plant_next.iter_mut().zip(w) {
                        *p += wi;
                    }
                    bound(&mut buf.plant_next);
                    std::mem::swap(&mut buf.plant, &mut buf.plant_next);
                }
            }
        }
        std::mem::swap(&mut buf.prev_est, &mut buf.est);
        std::mem::swap(&mut buf.prev_u, &mut buf.u);
    }
    err_sum
}

fn steps_ceil(ms: f64, period_ms: f64) -> Step {
    (ms / period_ms - 1e-9).ceil().max(0.0) as Step
}

/// Past reception step assumed for a packet believed received: the mean of
/// the delays shorter than its current age, or `k - 1` without such delays.
pub fn past_reception_step(gen_step: Step, k: Step, stats: &NetStats, period_ms: f64) -> Step {
    let age_ms = (k - gen_step) as f64 * period_ms;
    let recv = match stats.mean_delay_where(|d| d < age_ms) {
        Some(mean) => gen_step + steps_ceil(mean, period_ms),
        None => k.saturating_sub(1),
    };
    recv.clamp(gen_step, k.saturating_sub(1).max(gen_step))
}

/// Future reception step assumed for a packet believed in flight towards the
/// controller: the mean of the delays longer than its current age, or the
/// midpoint between its age and `t_max` without such delays.
pub fn future_reception_step(gen_step: Step, k: Step, stats: &NetStats, period_ms: f64) -> Step {
    let age_ms = (k - gen_step) as f64 * period_ms;
    let recv = match stats.mean_delay_where(|d| d > age_ms) {
        Some(mean) => gen_step + steps_ceil(mean, period_ms),
        None => gen_step + ((age_ms + stats.t_max_ms()) / 2.0 / period_ms).round() as Step,
    };
    recv.max(k + 1)
}

/// Per-hypothesis key: the freshest packet that reaches the controller.
type NodeKey = Option<(Step, OpState)>;

fn group_nodes(nodes: &[BeliefNode]) -> Vec<(NodeKey, f64)> {
    let mut groups: Vec<(NodeKey, f64)> = Vec::new();
    for node in nodes {
        let key = node.freshest_delivered();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, p)) => *p += node.probability,
            None => groups.push((key, node.probability)),
        }
    }
    groups
}

/// Expected magnitude of the controller's current estimation error.
///
/// Hypotheses without a delivered packet use the ACKed history alone; a
/// packet believed received is placed at a past reception step inferred from
/// the delay statistics, a packet believed in flight is assumed to arrive now.
pub fn relevance_inst(
    k: Step,
    x_k: &[f64],
    nodes: &[BeliefNode],
    history: &AckedHistory,
    stats: &NetStats,
    model: &LoopModel,
) -> f64 {
    let period = model.period_ms();
    let mut buf = BranchBuf::default();
    let mut est = vec![0.0; history.n];
    group_nodes(nodes)
        .into_iter()
        .map(|(key, prob)| {
            let err = match key {
                None => error_magnitude(history.estimate(k), x_k),
                Some((gen, state)) => {
                    let recv = match state {
                        OpState::Received => past_reception_step(gen, k, stats, period),
                        _ => k,
                    };
                    let extra = [ExtraReception { gen_step: gen, recv_step: recv }];
                    replay_branch(history, model, k, k, &extra, None, &mut buf, &mut est);
                    error_magnitude(&est, x_k)
                }
            };
            prob * err
        })
        .sum()
}

/// Parameters of the trajectory-based relevance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynParams {
    /// Prediction horizon in steps.
    pub horizon: usize,
    /// Draw disturbances for the predicted plant instead of using zero.
    pub sample_noise: bool,
    /// Predicted delivery delay of the current sample, in ms.
    pub delivery_delay_ms: f64,
    /// Seed of the disturbance stream for this decision.
    pub noise_seed: u64,
}

/// Expected reduction of the accumulated estimation error over the horizon
/// when the current sample is admitted.
pub fn relevance_dyn(
    k: Step,
    x_k: &[f64],
    nodes: &[BeliefNode],
    history: &AckedHistory,
    stats: &NetStats,
    model: &LoopModel,
    params: &DynParams,
) -> f64 {
    let n = history.n;
    let period = model.period_ms();
    let horizon = params.horizon.max(1) as Step;
    let end = k + horizon;

    let mut noise = vec![0.0; horizon as usize * n];
    if params.sample_noise {
        let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        for w in noise.chunks_mut(n) {
            model.sample_noise_into(&mut rng, w);
        }
    }
    let own = ExtraReception { gen_step: k, recv_step: k + steps_ceil(params.delivery_delay_ms, period) };

    let mut buf = BranchBuf::default();
    let mut est = vec![0.0; n];
    group_nodes(nodes)
        .into_iter()
        .map(|(key, prob)| {
            let mut extras: Vec<ExtraReception> = Vec::with_capacity(2);
            if let Some((gen, state)) = key {
                let recv = match state {
                    OpState::Received => past_reception_step(gen, k, stats, period),
                    _ => future_reception_step(gen, k, stats, period),
                };
                extras.push(ExtraReception { gen_step: gen, recv_step: recv });
            }
            let without = replay_branch(history, model, k, end, &extras, Some((x_k, &noise)), &mut buf, &mut est);
            extras.push(own);
            let with = replay_branch(history, model, k, end, &extras, Some((x_k, &noise)), &mut buf, &mut est);
            prob * (without - with)
        })
        .sum()
}

/// Magnitude of the estimation error when only ACKed updates are assumed
/// available to the controller.
pub fn acked_only_error(k: Step, x_k: &[f64], history: &AckedHistory) -> f64 {
    error_magnitude(history.estimate(k), x_k)
}
