//! Uniform time grid with a delay pinned to a whole number of steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when checking that a requested delay lands on a node.
const ALIGNMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    num_steps: usize,
    delay_steps: usize,
}

impl TimeGrid {
    /// Grid on `[0, horizon]` with `num_steps` steps and a delay of `delay_steps` steps.
    pub fn new(horizon: f64, num_steps: usize, delay_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if num_steps == 0 {
            return Err(Error::InvalidParameter("num_steps must be >= 1".into()));
        }
        if delay_steps > num_steps {
            return Err(Error::InvalidParameter(format!(
                "delay_steps {delay_steps} exceeds num_steps {num_steps}"
            )));
        }
        Ok(Self {
            horizon,
            num_steps,
            delay_steps,
        })
    }

    /// Grid from a delay given in time units; rejects delays that are not a
    /// whole number of steps.
    pub fn with_delay(horizon: f64, num_steps: usize, delay: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidParameter("num_steps must be >= 1".into()));
        }
        if !(delay.is_finite() && delay >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delay must be nonnegative, got {delay}"
            )));
        }
        let step = horizon / num_steps as f64;
        let ratio = delay / step;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > ALIGNMENT_TOL * rounded.max(1.0) {
            return Err(Error::Misaligned { delay, step, ratio });
        }
        Self::new(horizon, num_steps, rounded as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn delay(&self) -> f64 {
        self.delay_steps as f64 * self.dt()
    }

    /// Time of node `n`; the last node is the horizon itself.
    pub fn time(&self, n: usize) -> f64 {
        if n >= self.num_steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    /// Same grid with a different delay.
    pub fn with_delay_steps(&self, delay_steps: usize) -> Result<Self> {
        Self::new(self.horizon, self.num_steps, delay_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_steps() {
        let g = TimeGrid::new(1.0, 4, 1).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.delay(), 0.25);
        assert_eq!(g.time(4), 1.0);
    }

    #[test]
    fn zero_delay_is_classical() {
        let g = TimeGrid::new(1.0, 4, 0).unwrap();
        assert_eq!(g.delay(), 0.0);
    }

    #[test]
    fn misaligned_delay_rejected() {
        let err = TimeGrid::with_delay(1.0, 4, 0.3).unwrap_err();
        assert!(matches!(err, Error::Misaligned { .. }));
        let ok = TimeGrid::with_delay(1.0, 4, 0.5).unwrap();
        assert_eq!(ok.delay_steps(), 2);
    }

    #[test]
    fn bad_inputs() {
        assert!(TimeGrid::new(0.0, 4, 0).is_err());
        assert!(TimeGrid::new(1.0, 0, 0).is_err());
        assert!(TimeGrid::new(1.0, 4, 5).is_err());
    }

    #[test]
    fn horizon_is_exact_at_last_node() {
        let g = TimeGrid::new(0.7, 3, 1).unwrap();
        assert_eq!(g.time(3), 0.7);
    }
}
