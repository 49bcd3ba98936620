//! Age-driven rate controller: a stand-in for an ACK-clocked AoI
//! minimising transport.
//!
//! Every epoch the controller compares the mean age with the previous
//! epoch's and keeps its last action (raise or lower the rate) while age
//! improves, reversing it otherwise.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcpConfig {
    pub epoch_ms: f64,
    pub increase: f64,
    pub decrease: f64,
    /// Rate bounds in updates per second.
    pub min_rate: f64,
    pub max_rate: f64,
    pub initial_rate: f64,
}

impl AcpConfig {
    pub fn with_period(period_ms: f64) -> Self {
        Self {
            epoch_ms: 500.0,
            increase: 1.25,
            decrease: 0.8,
            min_rate: 1.0,
            max_rate: 1000.0 / period_ms,
            initial_rate: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateAction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcpState {
    cfg: AcpConfig,
    rate: f64,
    last_action: RateAction,
    prev_mean_age: Option<f64>,
    age_sum: f64,
    backlog_sum: f64,
    observations: u32,
    epoch_start_ms: f64,
    credit: f64,
}

impl AcpState {
    pub fn new(cfg: AcpConfig) -> Self {
        Self {
            rate: cfg.initial_rate.clamp(cfg.min_rate, cfg.max_rate),
            cfg,
            last_action: RateAction::Increase,
            prev_mean_age: None,
            age_sum: 0.0,
            backlog_sum: 0.0,
            observations: 0,
            epoch_start_ms: 0.0,
            credit: 0.0,
        }
    }

    /// Target rate in updates per second.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn last_action(&self) -> RateAction {
        self.last_action
    }

    /// Record the age (steps) and outstanding-packet count seen at one step.
    pub fn observe(&mut self, age: f64, backlog: usize) {
        self.age_sum += age;
        self.backlog_sum += backlog as f64;
        self.observations += 1;
    }

    /// Close every epoch that ended by `now_ms`.
    pub fn advance(&mut self, now_ms: f64) {
        while now_ms - self.epoch_start_ms >= self.cfg.epoch_ms {
            if self.observations > 0 {
                let mean_age = self.age_sum / self.observations as f64;
                self.rate = acp_target_rate(self, mean_age);
                self.prev_mean_age = Some(mean_age);
            }
            self.age_sum = 0.0;
            self.backlog_sum = 0.0;
            self.observations = 0;
            self.epoch_start_ms += self.cfg.epoch_ms;
        }
    }

    /// One hill-climbing step given the mean age of the epoch just closed.
    fn step(&mut self, mean_age: f64) -> f64 {
        let improved = self.prev_mean_age.is_none_or(|prev| mean_age < prev);
        if !improved {
            self.last_action = match self.last_action {
                RateAction::Increase => RateAction::Decrease,
                RateAction::Decrease => RateAction::Increase,
            };
        }
        let factor = match self.last_action {
            RateAction::Increase => self.cfg.increase,
            RateAction::Decrease => self.cfg.decrease,
        };
        (self.rate * factor).clamp(self.cfg.min_rate, self.cfg.max_rate)
    }

    /// Credit-based pacing at the current rate: true when a send is due at
    /// this step.
    pub fn due(&mut self, period_ms: f64) -> bool {
        self.credit = (self.credit + self.rate * period_ms / 1000.0).min(1.0);
        if self.credit >= 1.0 - 1e-12 {
            self.credit -= 1.0;
            true
        } else {
            false
        }
    }
}

/// Rate after an epoch with mean age `mean_age`; updates the controller's
/// action memory.
pub fn acp_target_rate(state: &mut AcpState, mean_age: f64) -> f64 {
    state.step(mean_age)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AcpConfig {
        AcpConfig::with_period(10.0)
    }

    #[test]
    fn cold_start_rate() {
        assert_eq!(AcpState::new(cfg()).rate(), 10.0);
    }

    #[test]
    fn improving_age_keeps_increasing() {
        let mut s = AcpState::new(cfg());
        let mut age = 100.0;
        let mut rates = vec![s.rate()];
        for _ in 0..5 {
            age -= 10.0;
            s.rate = acp_target_rate(&mut s, age);
            s.prev_mean_age = Some(age);
            rates.push(s.rate());
        }
        assert!(rates.windows(2).all(|w| w[1] > w[0]), "{rates:?}");
    }

    #[test]
    fn bowl_settles_within_one_step_of_optimum() {
        let optimum: f64 = 37.0;
        let bowl = |rate: f64| (rate.ln() - optimum.ln()).powi(2) + 1.0;
        let mut s = AcpState::new(cfg());
        let mut tail = Vec::new();
        for epoch in 0..200 {
            let t0 = epoch as f64 * 500.0;
            for i in 0..50 {
                s.observe(bowl(s.rate()), 0);
                s.advance(t0 + i as f64 * 10.0);
            }
            if epoch >= 150 {
                tail.push(s.rate());
            }
        }
        s.advance(1e9);
        for r in &tail {
            assert!(*r > optimum * 0.8 * 0.8 && *r < optimum * 1.25 * 1.25, "{r}");
        }
        // It keeps moving around the optimum instead of drifting away.
        assert!(tail.iter().any(|r| *r < optimum) && tail.iter().any(|r| *r > optimum));
    }

    #[test]
    fn rate_is_clamped() {
        let mut s = AcpState::new(cfg());
        let mut age = 1000.0;
        for _ in 0..100 {
            age *= 0.99;
            s.rate = acp_target_rate(&mut s, age);
            s.prev_mean_age = Some(age);
        }
        assert_eq!(s.rate(), 100.0);
    }

    #[test]
    fn pacing_matches_rate() {
        let mut s = AcpState::new(cfg());
        let sends = (0..1000).filter(|_| s.due(10.0)).count();
        assert_eq!(sends, 100);
    }
}
