use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Step schedule: `initial` before `milestone`, then `at_milestone` decayed by `decay_factor`
/// every `decay_every` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestone: usize,
    pub at_milestone: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            milestone: 60,
            at_milestone: 0.06,
            decay_factor: 0.2,
            decay_every: 10,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.at_milestone > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("lr decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("lr decay interval must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.milestone {
            return self.initial;
        }
        let k = ((epoch - self.milestone) / self.decay_every) as i32;
        // dividing by the inverse keeps 0.06 → 0.012 → 0.0024 free of rounding noise
        self.at_milestone / (1.0 / self.decay_factor).powi(k)
    }
}
