//! Threshold adaptation towards a target admission rate.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdConfig {
    /// Relative step per epoch.
    pub step: f64,
    pub epoch_ms: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Weight of the newest epoch in the running admission rate.
    pub rate_weight: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { step: 0.02, epoch_ms: 100.0, lambda_min: 1e-6, lambda_max: 1e6, rate_weight: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub lambda: f64,
    /// Admissions per second the threshold should produce.
    pub target_rate: f64,
    /// Running average of the admission rate, per second.
    pub measured_rate: f64,
    cfg: ThresholdConfig,
    epoch_start_ms: f64,
    epoch_admissions: u32,
}

impl ThresholdState {
    pub fn new(lambda: f64, target_rate: f64, cfg: ThresholdConfig) -> Self {
        Self {
            lambda: lambda.clamp(cfg.lambda_min, cfg.lambda_max),
            target_rate,
            measured_rate: target_rate,
            cfg,
            epoch_start_ms: 0.0,
            epoch_admissions: 0,
        }
    }

    pub fn config(&self) -> &ThresholdConfig {
        &self.cfg
    }

    pub fn record_admission(&mut self) {
        self.epoch_admissions += 1;
    }

    /// Close every epoch that ended by `now_ms`, updating the measured rate
    /// and the threshold once per epoch.
    pub fn advance(&mut self, now_ms: f64) {
        while now_ms - self.epoch_start_ms >= self.cfg.epoch_ms {
            let rate = self.epoch_admissions as f64 * 1000.0 / self.cfg.epoch_ms;
            let w = self.cfg.rate_weight;
            self.measured_rate = (1.0 - w) * self.measured_rate + w * rate;
            self.lambda = adapt_threshold(self);
            self.epoch_admissions = 0;
            self.epoch_start_ms += self.cfg.epoch_ms;
        }
    }
}

/// One multiplicative threshold step: raise λ while admitting too often,
/// lower it while admitting too rarely.
pub fn adapt_threshold(state: &ThresholdState) -> f64 {
    let cfg = &state.cfg;
    let lambda = if state.measured_rate > state.target_rate {
        state.lambda * (1.0 + cfg.step)
    } else if state.measured_rate < state.target_rate {
        state.lambda / (1.0 + cfg.step)
    } else {
        state.lambda
    };
    lambda.clamp(cfg.lambda_min, cfg.lambda_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lambda: f64, target: f64, measured: f64) -> ThresholdState {
        let mut s = ThresholdState::new(lambda, target, ThresholdConfig::default());
        s.measured_rate = measured;
        s
    }

    #[test]
    fn adapt_examples() {
        assert_eq!(adapt_threshold(&state(2.0, 20.0, 20.0)), 2.0);
        assert!(adapt_threshold(&state(2.0, 20.0, 40.0)) > 2.0);
        assert!(adapt_threshold(&state(2.0, 20.0, 10.0)) < 2.0);
    }

    #[test]
    fn geometric_growth_is_bounded() {
        let mut s = state(1.0, 10.0, 50.0);
        for m in 1..=200 {
            s.lambda = adapt_threshold(&s);
            assert!((s.lambda - 1.02f64.powi(m)).abs() < 1e-9 * s.lambda);
        }
        for _ in 0..2000 {
            s.lambda = adapt_threshold(&s);
        }
        assert_eq!(s.lambda, 1e6);
        let mut s = state(1.0, 10.0, 0.0);
        for _ in 0..2000 {
            s.lambda = adapt_threshold(&s);
        }
        assert_eq!(s.lambda, 1e-6);
    }

    #[test]
    fn epochs_drive_rate_towards_target() {
        let mut s = ThresholdState::new(1.0, 10.0, ThresholdConfig::default());
        // 50 admissions/s for 2 s: measured rate climbs, λ rises.
        for step in 0..200 {
            if step % 2 == 0 {
                s.record_admission();
            }
            s.advance((step + 1) as f64 * 10.0);
        }
        assert!(s.measured_rate > 40.0);
        assert!(s.lambda > 1.0);
    }
}
