use serde::{Deserialize, Serialize};

/// Constant rate, then a linear ramp to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_rate: f64,
    pub constant_iters: u64,
    pub decay_iters: u64,
}

impl LrSchedule {
    pub fn new(initial_rate: f64, constant_iters: u64, decay_iters: u64) -> Self {
        Self {
            initial_rate,
            constant_iters,
            decay_iters,
        }
    }

    /// Rate for zero-based iteration `t`.
    pub fn rate(&self, t: u64) -> f64 {
        if t < self.constant_iters {
            return self.initial_rate;
        }
        if self.decay_iters == 0 {
            return 0.0;
        }
        let into = (t - self.constant_iters) as f64;
        self.initial_rate * (1.0 - into / self.decay_iters as f64).max(0.0)
    }

    pub fn total_iters(&self) -> u64 {
        self.constant_iters + self.decay_iters
    }
}
