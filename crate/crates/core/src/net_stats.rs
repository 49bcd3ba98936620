//! Sensor-side bookkeeping of outstanding packets and ACK-derived network
//! statistics.

use std::cell::Cell;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::Step;

/// Tunables for [`NetStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetStatsConfig {
    pub period_ms: f64,
    pub delay_capacity: usize,
    pub ist_capacity: usize,
    /// Weight of one outcome in the running ACK ratio.
    pub ack_weight: f64,
    pub rto_initial_ms: f64,
    pub rto_floor_ms: f64,
    pub rto_max_ms: f64,
    /// Quantile of the delay samples taken as `t_max`.
    pub delay_quantile: f64,
    /// First-admission IST is this multiple of `t_max`.
    pub ist_sentinel_factor: f64,
    /// First-admission IST when no delay sample exists yet.
    pub ist_sentinel_fallback_ms: f64,
}

impl NetStatsConfig {
    pub fn with_period(period_ms: f64) -> Self {
        Self {
            period_ms,
            delay_capacity: 512,
            ist_capacity: 1024,
            ack_weight: 0.05,
            rto_initial_ms: 1000.0,
            rto_floor_ms: 200.0,
            rto_max_ms: 60_000.0,
            delay_quantile: 0.95,
            ist_sentinel_factor: 10.0,
            ist_sentinel_fallback_ms: 1000.0,
        }
    }
}

/// Admitted update not yet ACKed or timed out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutstandingPacket {
    pub gen_step: Step,
    pub send_ms: f64,
    pub ist_at_send_ms: f64,
    pub rto_deadline_ms: f64,
}

/// Content of an ACK: which update was received and when.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AckRecord {
    pub gen_step: Step,
    pub recv_step: Step,
    pub arrival_ms: f64,
}

/// Result of feeding one ACK to [`NetStats::process_ack`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AckOutcome {
    /// Removed outstanding packets, oldest first.
    pub removed: Vec<OutstandingPacket>,
    /// The ACK carried news (not a duplicate of an older or equal ACK).
    pub fresh: bool,
}

/// Smoothed round-trip estimator in the style of RFC 6298.
#[derive(Debug, Clone, PartialEq)]
pub struct RtoEstimator {
    srtt: f64,
    rttvar: f64,
    rto: f64,
    sampled: bool,
    floor: f64,
    max: f64,
}

impl RtoEstimator {
    pub fn new(initial_ms: f64, floor_ms: f64, max_ms: f64) -> Self {
        Self { srtt: 0.0, rttvar: 0.0, rto: initial_ms.max(floor_ms), sampled: false, floor: floor_ms, max: max_ms }
    }

    pub fn add_sample(&mut self, rtt_ms: f64) {
        if !self.sampled {
            self.srtt = rtt_ms;
            self.rttvar = rtt_ms / 2.0;
            self.sampled = true;
        } else {
            self.rttvar = 0.75 * self.rttvar + 0.25 * (self.srtt - rtt_ms).abs();
            self.srtt = 0.875 * self.srtt + 0.125 * rtt_ms;
        }
        self.rto = (self.srtt + 4.0 * self.rttvar).clamp(self.floor, self.max);
    }

    pub fn srtt_ms(&self) -> f64 {
        self.srtt
    }

    pub fn rttvar_ms(&self) -> f64 {
        self.rttvar
    }

    pub fn rto_ms(&self) -> f64 {
        self.rto
    }
}

/// `p_l = 1 - sqrt(p_ack)`: per-direction loss under symmetric data/ACK loss.
pub fn loss_prob_from_ack_ratio(p_ack: f64) -> f64 {
    1.0 - p_ack.clamp(0.0, 1.0).sqrt()
}

#[derive(Debug, Clone)]
pub struct NetStats {
    cfg: NetStatsConfig,
    ops: VecDeque<OutstandingPacket>,
    delay_samples: VecDeque<f64>,
    ist_delay_samples: VecDeque<(f64, f64)>,
    p_ack: f64,
    rto: RtoEstimator,
    last_admission_ms: Option<f64>,
    last_admitted: Option<Step>,
    highest_acked: Option<Step>,
    t_max_cache: Cell<Option<f64>>,
    ist_version: u64,
}

impl NetStats {
    pub fn new(cfg: NetStatsConfig) -> Self {
        let rto = RtoEstimator::new(cfg.rto_initial_ms, cfg.rto_floor_ms, cfg.rto_max_ms);
        Self {
            ops: VecDeque::new(),
            delay_samples: VecDeque::with_capacity(cfg.delay_capacity),
            ist_delay_samples: VecDeque::with_capacity(cfg.ist_capacity),
            p_ack: 1.0,
            rto,
            last_admission_ms: None,
            last_admitted: None,
            highest_acked: None,
            t_max_cache: Cell::new(None),
            ist_version: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &NetStatsConfig {
        &self.cfg
    }

    /// Outstanding packets, oldest first.
    pub fn outstanding(&self) -> &VecDeque<OutstandingPacket> {
        &self.ops
    }

    pub fn delay_samples(&self) -> &VecDeque<f64> {
        &self.delay_samples
    }

    pub fn ist_delay_samples(&self) -> &VecDeque<(f64, f64)> {
        &self.ist_delay_samples
    }

    /// Bumped whenever an (IST, delay) pair is added.
    pub fn ist_version(&self) -> u64 {
        self.ist_version
    }

    pub fn p_ack(&self) -> f64 {
        self.p_ack
    }

    pub fn rto(&self) -> &RtoEstimator {
        &self.rto
    }

    pub fn highest_acked(&self) -> Option<Step> {
        self.highest_acked
    }

    pub fn last_admission_ms(&self) -> Option<f64> {
        self.last_admission_ms
    }

    pub fn loss_prob(&self) -> f64 {
        loss_prob_from_ack_ratio(self.p_ack)
    }

    /// 95%-quantile of the recorded end-to-end delays, 0 without samples.
    pub fn t_max_ms(&self) -> f64 {
        if let Some(v) = self.t_max_cache.get() {
            return v;
        }
        let v = quantile(self.delay_samples.iter().copied(), self.cfg.delay_quantile);
        self.t_max_cache.set(Some(v));
        v
    }

    /// Mean of the delay samples satisfying `keep`.
    pub fn mean_delay_where(&self, keep: impl Fn(f64) -> bool) -> Option<f64> {
        let (sum, n) = self.delay_samples.iter().filter(|&&d| keep(d)).fold((0.0, 0usize), |(s, n), &d| (s + d, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// IST the current sample would have if admitted at `now_ms`.
    pub fn ist_at(&self, now_ms: f64) -> f64 {
        match self.last_admission_ms {
            Some(last) => now_ms - last,
            None => self.ist_sentinel(),
        }
    }

    fn ist_sentinel(&self) -> f64 {
        let t_max = self.t_max_ms();
        if t_max > 0.0 {
            self.cfg.ist_sentinel_factor * t_max
        } else {
            self.cfg.ist_sentinel_fallback_ms
        }
    }

    pub fn record_admission(&mut self, gen_step: Step, now_ms: f64) -> Result<OutstandingPacket> {
        if let Some(last) = self.last_admitted {
            if gen_step <= last {
                return Err(Error::OutOfOrderAdmission { gen_step, last });
            }
        }
        let op = OutstandingPacket {
            gen_step,
            send_ms: now_ms,
            ist_at_send_ms: self.ist_at(now_ms),
            rto_deadline_ms: now_ms + self.rto.rto_ms(),
        };
        self.ops.push_back(op);
        self.last_admission_ms = Some(now_ms);
        self.last_admitted = Some(gen_step);
        Ok(op)
    }

    pub fn process_ack(&mut self, ack: &AckRecord) -> AckOutcome {
        if self.highest_acked.is_some_and(|h| ack.gen_step <= h) {
            return AckOutcome::default();
        }
        self.highest_acked = Some(ack.gen_step);

        let delay = ack.recv_step.saturating_sub(ack.gen_step) as f64 * self.cfg.period_ms;
        push_bounded(&mut self.delay_samples, delay, self.cfg.delay_capacity);
        self.t_max_cache.set(None);

        let cut = self.ops.partition_point(|op| op.gen_step <= ack.gen_step);
        let removed: Vec<_> = self.ops.drain(..cut).collect();
        if let Some(own) = removed.last().filter(|op| op.gen_step == ack.gen_step) {
            push_bounded(&mut self.ist_delay_samples, (own.ist_at_send_ms, delay), self.cfg.ist_capacity);
            self.ist_version += 1;
            self.record_outcome(true);
            self.rto.add_sample(ack.arrival_ms - own.send_ms);
        }
        AckOutcome { removed, fresh: true }
    }

    /// Remove packets whose deadline is at or before `now_ms`; each counts as not ACKed.
    pub fn check_timeouts(&mut self, now_ms: f64) -> Vec<OutstandingPacket> {
        let mut expired = Vec::new();
        self.ops.retain(|op| {
            if op.rto_deadline_ms <= now_ms {
                expired.push(*op);
                false
            } else {
                true
            }
        });
        for _ in &expired {
            self.record_outcome(false);
        }
        expired
    }

    fn record_outcome(&mut self, acked: bool) {
        let w = self.cfg.ack_weight;
        self.p_ack = ((1.0 - w) * self.p_ack + w * if acked { 1.0 } else { 0.0 }).clamp(0.0, 1.0);
    }
}

fn push_bounded<T>(buf: &mut VecDeque<T>, v: T, cap: usize) {
    if buf.len() == cap {
        buf.pop_front();
    }
    buf.push_back(v);
}

/// Empirical quantile (nearest rank), 0 for an empty sample.
pub fn quantile(values: impl Iterator<Item = f64>, p: f64) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = (p * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
