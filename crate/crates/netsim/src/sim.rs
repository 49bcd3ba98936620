//! Event loop: plants, sensors, network and controllers.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vou_core::admission::{
    decide, fit_delay_curve, AcpConfig, AcpState, DelayCurve, PolicyKind, SensorView, ThresholdState,
};
use vou_core::augment::{error_magnitude, AckedHistory};
use vou_core::control::{cost_window_bounds, lqg_window_cost, ControllerState, LoopModel, Observation, COST_WINDOWS};
use vou_core::net_stats::{AckRecord, NetStats, NetStatsConfig};
use vou_core::Step;

use crate::config::{HopKind, PolicyConfig, ScenarioConfig};
use crate::error::Result;

/// Plant states and inputs saturate here, so that a destabilised loop
/// reports a huge but finite cost.
pub const STATE_LIMIT: f64 = 1e100;

fn saturate(v: f64) -> f64 {
    if v.is_nan() {
        STATE_LIMIT
    } else {
        v.clamp(-STATE_LIMIT, STATE_LIMIT)
    }
}

/// Per-loop outcome of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopResult {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Mean stage cost of each complete cost window.
    pub window_costs: Vec<f64>,
    /// `k - ν(k)` per step, `k + 1` before the first delivery.
    pub aoi: Vec<Step>,
    /// Generation step of every admitted update.
    pub admissions: Vec<Step>,
    pub delivered: u64,
    pub lost_in_hop: u64,
    pub dropped_full_queue: u64,
    pub in_flight_at_end: u64,
    pub acks_received: u64,
    /// End-to-end delay of every delivered update, ms.
    pub delays_ms: Vec<f64>,
    /// `(generation step, reception step)` of every delivered update, in
    /// delivery order.
    pub receptions: Vec<(Step, Step)>,
    /// Threshold in force at the last decision.
    pub final_lambda: f64,
}

impl LoopResult {
    pub fn admitted(&self) -> u64 {
        self.admissions.len() as u64
    }

    pub fn mean_aoi(&self) -> f64 {
        if self.aoi.is_empty() {
            return 0.0;
        }
        self.aoi.iter().sum::<Step>() as f64 / self.aoi.len() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackgroundCounts {
    pub sent: u64,
    pub delivered: u64,
    pub lost_in_hop: u64,
    pub dropped_full_queue: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub scenario: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub steps: u64,
    pub period_ms: f64,
    pub loops: Vec<LoopResult>,
    pub background: BackgroundCounts,
    /// Wall-clock time spent in admission decisions, excluded from equality
    /// checks of the simulated trace.
    pub decision_ns: u128,
    pub decisions: u64,
}

impl RunResult {
    /// Mean cost over loops for each window.
    pub fn window_costs(&self) -> Vec<f64> {
        let windows = self.loops.iter().map(|l| l.window_costs.len()).min().unwrap_or(0);
        (0..windows)
            .map(|q| self.loops.iter().map(|l| l.window_costs[q]).sum::<f64>() / self.loops.len() as f64)
            .collect()
    }

    pub fn mean_aoi(&self) -> f64 {
        self.loops.iter().map(LoopResult::mean_aoi).sum::<f64>() / self.loops.len() as f64
    }

    /// Admissions per second and loop.
    pub fn admission_rate(&self) -> f64 {
        let secs = self.steps as f64 * self.period_ms / 1000.0;
        self.loops.iter().map(|l| l.admitted() as f64).sum::<f64>() / secs / self.loops.len() as f64
    }

    pub fn mean_decision_us(&self) -> f64 {
        if self.decisions == 0 {
            0.0
        } else {
            self.decision_ns as f64 / self.decisions as f64 / 1000.0
        }
    }

    /// Equality of everything except wall-clock measurements.
    pub fn same_trace(&self, other: &RunResult) -> bool {
        self.scenario == other.scenario
            && self.policy == other.policy
            && self.seed == other.seed
            && self.steps == other.steps
            && self.loops == other.loops
            && self.background == other.background
            && self.decisions == other.decisions
    }
}

/// Age of information per loop and step.
pub fn aoi_trace(result: &RunResult) -> Vec<Vec<Step>> {
    result.loops.iter().map(|l| l.aoi.clone()).collect()
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Plant = 1,
    Service = 2,
    Loss = 3,
    Decision = 4,
    Medium = 5,
}

fn stream_seed(seed: u64, stream: Stream, id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(((stream as u64) << 40) | id))
}

fn stream_rng(seed: u64, stream: Stream, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    Sense,
    Send,
    HopDone,
    Background,
    Tick,
}

#[derive(Debug)]
enum Payload {
    Sense(Step),
    Send { lp: usize, gen: Step },
    HopDone { server: usize, carried: Option<Packet> },
    Background(usize),
    Tick(Step),
}

#[derive(Debug)]
struct Event {
    time: f64,
    phase: Phase,
    lane: usize,
    seq: u64,
    payload: Payload,
}

impl Event {
    fn key(&self) -> (f64, Phase, usize, u64) {
        (self.time, self.phase, self.lane, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so that the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2)).then(b.3.cmp(&a.3))
    }
}

#[derive(Debug, Clone)]
enum Content {
    Data { lp: usize, gen: Step, sent_ms: f64, x: DVector<f64> },
    Ack { lp: usize, gen: Step, recv: Step },
    Dummy,
}

#[derive(Debug, Clone, Copy)]
enum Route {
    Data(usize),
    Ack(usize),
    Background(usize),
}

#[derive(Debug, Clone)]
struct Packet {
    content: Content,
    route: Route,
    pos: usize,
}

/// One transmitter, or one shared medium serving the FIFO queues of its
/// member hops. A free medium picks uniformly among backlogged members.
#[derive(Debug)]
struct Server {
    kind: HopKind,
    members: Vec<usize>,
    busy: bool,
    last_exit_ms: f64,
    rng: ChaCha8Rng,
}

struct Sensor {
    stats: NetStats,
    history: AckedHistory,
    curve: Option<DelayCurve>,
    curve_version: Option<u64>,
    threshold: ThresholdState,
    acp: AcpState,
    decision_seed: u64,
}

struct LoopSim {
    x: DVector<f64>,
    controller: ControllerState,
    pending: Vec<Observation>,
    plant_rng: ChaCha8Rng,
    sensor: Sensor,
    out: LoopResult,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    policy: &'a PolicyConfig,
    model: &'a LoopModel,
    period: f64,
    end_ms: f64,
    heap: BinaryHeap<Event>,
    seq: u64,
    hop_server: Vec<usize>,
    servers: Vec<Server>,
    queues: Vec<VecDeque<Packet>>,
    service_rng: Vec<ChaCha8Rng>,
    loss_rng: Vec<ChaCha8Rng>,
    loops: Vec<LoopSim>,
    background: BackgroundCounts,
    decision_ns: u128,
    decisions: u64,
}

/// Simulate `cfg` with every sensor running `policy`.
pub fn run(cfg: &ScenarioConfig, policy: &PolicyConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg, policy);
    sim.schedule(0.0, Phase::Sense, 0, Payload::Sense(0));
    sim.schedule(0.0, Phase::Tick, 0, Payload::Tick(0));
    for (i, flow) in cfg.background.iter().enumerate() {
        if flow.offset_ms < sim.end_ms {
            sim.schedule(flow.offset_ms, Phase::Background, i, Payload::Background(i));
        }
    }
    while let Some(ev) = sim.heap.pop() {
        if ev.time > sim.end_ms {
            break;
        }
        sim.handle(ev)?;
    }
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig, policy: &'a PolicyConfig) -> Self {
        let model = &cfg.model;
        let period = model.period_ms();

        let mut hop_server = Vec::with_capacity(cfg.hops.len());
        let mut servers: Vec<Server> = Vec::new();
        let mut groups: Vec<(u32, usize)> = Vec::new();
        for (h, hop) in cfg.hops.iter().enumerate() {
            let existing = hop.medium_group.and_then(|g| groups.iter().find(|(id, _)| *id == g).map(|&(_, s)| s));
            let s = match existing {
                Some(s) => s,
                None => {
                    if let Some(g) = hop.medium_group {
                        groups.push((g, servers.len()));
                    }
                    servers.push(Server {
                        kind: hop.kind,
                        members: Vec::new(),
                        busy: false,
                        last_exit_ms: f64::NEG_INFINITY,
                        rng: stream_rng(cfg.seed, Stream::Medium, servers.len() as u64),
                    });
                    servers.len() - 1
                }
            };
            servers[s].members.push(h);
            hop_server.push(s);
        }

        let acp_cfg = policy.acp.unwrap_or_else(|| AcpConfig::with_period(period));
        let loops = (0..cfg.loops)
            .map(|i| {
                let acp = AcpState::new(acp_cfg);
                LoopSim {
                    x: DVector::zeros(model.state_dim()),
                    controller: ControllerState::new(model),
                    pending: Vec::new(),
                    plant_rng: stream_rng(cfg.seed, Stream::Plant, i as u64),
                    sensor: Sensor {
                        stats: NetStats::new(NetStatsConfig::with_period(period)),
                        history: AckedHistory::new(model),
                        curve: None,
                        curve_version: None,
                        threshold: ThresholdState::new(policy.lambda, acp.rate(), policy.threshold),
                        acp,
                        decision_seed: stream_seed(cfg.seed, Stream::Decision, i as u64),
                    },
                    out: LoopResult {
                        x: Vec::with_capacity(cfg.steps as usize),
                        u: Vec::with_capacity(cfg.steps as usize),
                        window_costs: Vec::new(),
                        aoi: Vec::with_capacity(cfg.steps as usize),
                        admissions: Vec::new(),
                        delivered: 0,
                        lost_in_hop: 0,
                        dropped_full_queue: 0,
                        in_flight_at_end: 0,
                        acks_received: 0,
                        delays_ms: Vec::new(),
                        receptions: Vec::new(),
                        final_lambda: policy.lambda,
                    },
                }
            })
            .collect();

        Self {
            cfg,
            policy,
            model,
            period,
            end_ms: (cfg.steps - 1) as f64 * period,
            heap: BinaryHeap::new(),
            seq: 0,
            hop_server,
            servers,
            queues: (0..cfg.hops.len()).map(|_| VecDeque::new()).collect(),
            service_rng: (0..cfg.hops.len()).map(|h| stream_rng(cfg.seed, Stream::Service, h as u64)).collect(),
            loss_rng: (0..cfg.hops.len()).map(|h| stream_rng(cfg.seed, Stream::Loss, h as u64)).collect(),
            loops,
            background: BackgroundCounts::default(),
            decision_ns: 0,
            decisions: 0,
        }
    }

    fn schedule(&mut self, time: f64, phase: Phase, lane: usize, payload: Payload) {
        self.seq += 1;
        self.heap.push(Event { time, phase, lane, seq: self.seq, payload });
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev.payload {
            Payload::Sense(k) => {
                for lp in 0..self.loops.len() {
                    self.sense(lp, k, ev.time)?;
                }
                if k + 1 < self.cfg.steps {
                    self.schedule((k + 1) as f64 * self.period, Phase::Sense, 0, Payload::Sense(k + 1));
                }
            }
            Payload::Send { lp, gen } => self.send(lp, gen, ev.time)?,
            Payload::HopDone { server, carried } => self.hop_done(server, carried, ev.time),
            Payload::Background(i) => {
                let flow = &self.cfg.background[i];
                let next = ev.time + flow.period_ms;
                self.background.sent += 1;
                let hop = flow.path[0];
                self.inject(Packet { content: Content::Dummy, route: Route::Background(i), pos: 0 }, hop, ev.time);
                if next <= self.end_ms {
                    self.schedule(next, Phase::Background, i, Payload::Background(i));
                }
            }
            Payload::Tick(k) => {
                for lp in 0..self.loops.len() {
                    self.tick(lp, k)?;
                }
                if k + 1 < self.cfg.steps {
                    self.schedule((k + 1) as f64 * self.period, Phase::Tick, 0, Payload::Tick(k + 1));
                }
            }
        }
        Ok(())
    }

    fn needs_history(&self) -> bool {
        self.policy.kind.uses_threshold()
    }

    fn sense(&mut self, lp: usize, k: Step, now: f64) -> Result<()> {
        let model = self.model;
        let policy = self.policy;
        let kind = policy.kind;
        let period = self.period;
        let needs_history = self.needs_history();
        let state = &mut self.loops[lp];
        let sensor = &mut state.sensor;

        sensor.stats.check_timeouts(now);
        sensor.history.record_sample(k, state.x.as_slice())?;
        if needs_history {
            sensor.history.refresh(model)?;
        }

        let age = sensor.stats.highest_acked().map_or(k + 1, |g| k - g);
        sensor.acp.observe(age as f64, sensor.stats.outstanding().len());
        sensor.acp.advance(now);
        let lambda = if policy.adapt_threshold {
            sensor.threshold.target_rate = sensor.acp.rate();
            sensor.threshold.advance(now);
            sensor.threshold.lambda
        } else {
            policy.lambda
        };
        let rate_due = kind == PolicyKind::AcpRate && sensor.acp.due(period);

        if kind.uses_threshold() && sensor.curve_version != Some(sensor.stats.ist_version()) {
            let samples: Vec<(f64, f64)> = sensor.stats.ist_delay_samples().iter().copied().collect();
            sensor.curve = fit_delay_curve(&samples).ok();
            sensor.curve_version = Some(sensor.stats.ist_version());
        }

        let true_error = (kind == PolicyKind::OracleCost)
            .then(|| controller_preview(&state.controller, model, k, &state.pending))
            .transpose()?
            .map(|est| error_magnitude(est.as_slice(), state.x.as_slice()));

        let view = SensorView {
            k,
            now_ms: now,
            x_k: state.x.as_slice(),
            model,
            stats: &sensor.stats,
            history: &sensor.history,
            curve: sensor.curve.as_ref(),
            lambda,
            true_error,
            rate_due,
            noise_seed: splitmix64(sensor.decision_seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        };
        let started = Instant::now();
        let decision = decide(kind, &policy.params, &view);
        self.decision_ns += started.elapsed().as_nanos();
        self.decisions += 1;
        state.out.final_lambda = lambda;

        if decision.admit {
            if policy.processing_delay_ms > 0.0 {
                self.schedule(now + policy.processing_delay_ms, Phase::Send, lp, Payload::Send { lp, gen: k });
            } else {
                self.send(lp, k, now)?;
            }
        }
        Ok(())
    }

    fn send(&mut self, lp: usize, gen: Step, now: f64) -> Result<()> {
        let state = &mut self.loops[lp];
        state.sensor.stats.record_admission(gen, now)?;
        state.sensor.threshold.record_admission();
        state.out.admissions.push(gen);
        let x = DVector::from_column_slice(state.sensor.history.sample(gen).expect("sample just recorded"));
        let hop = self.cfg.data_paths[lp][0];
        self.inject(
            Packet { content: Content::Data { lp, gen, sent_ms: now, x }, route: Route::Data(lp), pos: 0 },
            hop,
            now,
        );
        Ok(())
    }

    fn route(&self, route: Route) -> &'a [usize] {
        let cfg = self.cfg;
        match route {
            Route::Data(lp) => &cfg.data_paths[lp],
            Route::Ack(lp) => &cfg.ack_paths[lp],
            Route::Background(i) => &cfg.background[i].path,
        }
    }

    fn inject(&mut self, packet: Packet, hop: usize, now: f64) {
        let s = self.hop_server[hop];
        match self.servers[s].kind {
            HopKind::DelayLine => {
                let delay = self.cfg.hops[hop].service.sample(&mut self.service_rng[hop]);
                let server = &mut self.servers[s];
                let exit = (now + delay).max(server.last_exit_ms);
                server.last_exit_ms = exit;
                self.schedule(exit, Phase::HopDone, s, Payload::HopDone { server: s, carried: Some(packet) });
            }
            HopKind::Queue => {
                if !self.servers[s].busy {
                    self.servers[s].busy = true;
                    self.start_service(s, packet, hop, now);
                } else if self.cfg.hops[hop].queue_capacity.is_some_and(|c| self.queues[hop].len() >= c) {
                    self.count_drop(&packet);
                } else {
                    self.queues[hop].push_back(packet);
                }
            }
        }
    }

    fn start_service(&mut self, s: usize, packet: Packet, hop: usize, now: f64) {
        let t = now + self.cfg.hops[hop].service.sample(&mut self.service_rng[hop]);
        self.schedule(t, Phase::HopDone, s, Payload::HopDone { server: s, carried: Some(packet) });
    }

    fn hop_done(&mut self, s: usize, carried: Option<Packet>, now: f64) {
        let mut packet = carried.expect("completion carries its packet");
        if self.servers[s].kind == HopKind::Queue {
            match self.next_backlogged(s) {
                Some(hop) => {
                    let next = self.queues[hop].pop_front().expect("backlogged");
                    self.start_service(s, next, hop, now);
                }
                None => self.servers[s].busy = false,
            }
        }
        let path = self.route(packet.route);
        let hop = path[packet.pos];
        if self.loss_rng[hop].random::<f64>() < self.cfg.hops[hop].loss_prob {
            self.count_loss(&packet);
            return;
        }
        packet.pos += 1;
        match path.get(packet.pos) {
            Some(&next) => self.inject(packet, next, now),
            None => self.arrive(packet, now),
        }
    }

    fn next_backlogged(&mut self, s: usize) -> Option<usize> {
        let server = &mut self.servers[s];
        let queues = &self.queues;
        let backlogged = server.members.iter().filter(|&&h| !queues[h].is_empty()).count();
        match backlogged {
            0 => None,
            1 => server.members.iter().copied().find(|&h| !queues[h].is_empty()),
            n => {
                let pick = server.rng.random_range(0..n);
                server.members.iter().copied().filter(|&h| !queues[h].is_empty()).nth(pick)
            }
        }
    }

    fn arrive(&mut self, packet: Packet, now: f64) {
        match packet.content {
            Content::Data { lp, gen, sent_ms, x } => {
                let recv = (now / self.period - 1e-9).ceil().max(0.0) as Step;
                let out = &mut self.loops[lp].out;
                out.delivered += 1;
                out.delays_ms.push(now - sent_ms);
                out.receptions.push((gen, recv));
                self.loops[lp].pending.push(Observation { gen_step: gen, recv_step: recv, measurement: x });
                let hop = self.cfg.ack_paths[lp][0];
                self.inject(
                    Packet { content: Content::Ack { lp, gen, recv }, route: Route::Ack(lp), pos: 0 },
                    hop,
                    now,
                );
            }
            Content::Ack { lp, gen, recv } => {
                let sensor = &mut self.loops[lp].sensor;
                sensor.stats.process_ack(&AckRecord { gen_step: gen, recv_step: recv, arrival_ms: now });
                // ACKs older than the retained sample window carry nothing usable.
                let _ = sensor.history.add_ack(gen, recv);
                self.loops[lp].out.acks_received += 1;
            }
            Content::Dummy => self.background.delivered += 1,
        }
    }

    fn count_loss(&mut self, packet: &Packet) {
        match packet.content {
            Content::Data { lp, .. } => self.loops[lp].out.lost_in_hop += 1,
            Content::Ack { .. } => {}
            Content::Dummy => self.background.lost_in_hop += 1,
        }
    }

    fn count_drop(&mut self, packet: &Packet) {
        match packet.content {
            Content::Data { lp, .. } => self.loops[lp].out.dropped_full_queue += 1,
            Content::Ack { .. } => {}
            Content::Dummy => self.background.dropped_full_queue += 1,
        }
    }

    fn tick(&mut self, lp: usize, k: Step) -> Result<()> {
        let model = self.model;
        let state = &mut self.loops[lp];
        let arrivals = std::mem::take(&mut state.pending);
        let u = state.controller.tick(model, k, &arrivals)?.map(saturate);
        state.out.aoi.push(state.controller.fresh_gen().map_or(k + 1, |g| k - g));
        let w = model.sample_noise(&mut state.plant_rng);
        let next = (model.a() * &state.x + model.b() * &u + w).map(saturate);
        state.out.x.push(std::mem::replace(&mut state.x, next));
        state.out.u.push(u);
        Ok(())
    }

    fn finish(mut self) -> RunResult {
        let model = self.model;
        for state in &mut self.loops {
            let out = &mut state.out;
            out.window_costs = (0..COST_WINDOWS)
                .filter(|&q| (cost_window_bounds(q).1 as u64) < self.cfg.steps)
                .map(|q| lqg_window_cost(&out.x, &out.u, model.q(), model.r(), q).expect("window fits the run"))
                .collect();
            out.in_flight_at_end = out.admitted() - out.delivered - out.lost_in_hop - out.dropped_full_queue;
        }
        RunResult {
            scenario: self.cfg.name.clone(),
            policy: self.policy.kind,
            seed: self.cfg.seed,
            steps: self.cfg.steps,
            period_ms: self.period,
            loops: self.loops.into_iter().map(|l| l.out).collect(),
            background: self.background,
            decision_ns: self.decision_ns,
            decisions: self.decisions,
        }
    }
}

/// Estimate the controller will hold at `k` given the updates already
/// delivered for that step.
fn controller_preview(
    ctrl: &ControllerState,
    model: &LoopModel,
    k: Step,
    pending: &[Observation],
) -> Result<DVector<f64>> {
    let fresher = pending.iter().filter(|o| ctrl.fresh_gen().is_none_or(|g| o.gen_step > g)).max_by_key(|o| o.gen_step);
    if let Some(obs) = fresher {
        let mut z = obs.measurement.clone();
        for j in obs.gen_step..k {
            z = model.a() * z + model.b() * ctrl.applied_input(j)?;
        }
        return Ok(z);
    }
    if k == 0 {
        return Ok(ctrl.estimate().clone());
    }
    Ok(model.a() * ctrl.estimate() + model.b() * ctrl.applied_input(k - 1)?)
}
