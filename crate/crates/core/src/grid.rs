use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform time grid on `[0, horizon]` with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", format!("must be finite and > 0, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("steps", "must be positive"));
        }
        Ok(Self { horizon, steps })
    }

    /// Grid whose horizon makes the discount factor at the end equal to
    /// `tail` (e.g. 1e-4 gives `T = ln(1e4)/beta`).
    pub fn auto_horizon(beta: f64, tail: f64, steps: usize) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(invalid("beta", "auto horizon needs beta > 0"));
        }
        Self::new(auto_horizon(beta, tail), steps)
    }

    /// Grid with a fixed step size; the step count is rounded to the nearest integer.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        let steps = (horizon / dt).round().max(1.0) as usize;
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time `t_i = i * T / N`; `time(N)` is exactly `T`.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// `ln(1/tail) / beta`.
pub fn auto_horizon(beta: f64, tail: f64) -> f64 {
    (1.0 / tail).ln() / beta
}

/// Trapezoidal integral of node values on a uniform grid.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = values[1..n - 1].iter().sum();
            dt * (inner + 0.5 * (values[0] + values[n - 1]))
        }
    }
}
