//! Per-position noise schedules: sqrt initialization, loss recording, and the
//! adaptive re-fit that makes denoising loss grow linearly in the time step.

mod adapt;
mod io;
mod ledger;

pub use adapt::{adapt, coarsen, pava, AdaptReport, Knots, PiecewiseLinear};
pub use io::{read_schedule, schedule_csv, write_schedule, SCHEDULE_MAGIC, SCHEDULE_VERSION};
pub use ledger::LossLedger;

use crate::error::{Error, Result};

/// Lower clip for every ᾱ value.
pub const ALPHA_BAR_MIN: f64 = 1e-4;
/// Offset of the sqrt schedule.
pub const SQRT_S0: f64 = 1e-4;
/// Minimum gap kept between successive ᾱ values of a column.
pub const MONOTONE_GAP: f64 = 1e-7;

/// ᾱ grid of shape `(T+1) × n`, row `t` holding every position.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    positions: usize,
    alpha_bar: Vec<f64>,
}

/// Per-position coefficients at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub alpha_bar: Vec<f64>,
    pub alpha_bar_prev: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// `ᾱ_t = 1 − sqrt(t/T + s0)` for every position, clipped to `[ALPHA_BAR_MIN, 1]`.
    pub fn sqrt_init(steps: usize, positions: usize, s0: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("T must be at least 2, got {steps}")));
        }
        if positions == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one position".into()));
        }
        if !(s0 > 0.0 && s0 < 0.1) {
            return Err(Error::InvalidArgument(format!("sqrt offset s0 must be in (0, 0.1), got {s0}")));
        }
        let mut column: Vec<f64> = (0..=steps)
            .map(|t| (1.0 - (t as f64 / steps as f64 + s0).sqrt()).clamp(ALPHA_BAR_MIN, 1.0))
            .collect();
        enforce_column(&mut column)?;
        let mut alpha_bar = Vec::with_capacity((steps + 1) * positions);
        for a in column {
            alpha_bar.extend(std::iter::repeat_n(a, positions));
        }
        Ok(Self {
            steps,
            positions,
            alpha_bar,
        })
    }

    /// Builds a schedule from a row-major `(T+1) × n` grid and validates it.
    pub fn from_grid(steps: usize, positions: usize, alpha_bar: Vec<f64>) -> Result<Self> {
        if steps < 2 || positions == 0 || alpha_bar.len() != (steps + 1) * positions {
            return Err(Error::Format(format!(
                "schedule grid of {} values does not match T={steps}, n={positions}",
                alpha_bar.len()
            )));
        }
        let s = Self {
            steps,
            positions,
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn grid(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize, i: usize) -> f64 {
        self.alpha_bar[t * self.positions + i]
    }

    /// ᾱ of every position at step `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.alpha_bar[t * self.positions..(t + 1) * self.positions]
    }

    /// ᾱ_0..ᾱ_T of position `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..=self.steps).map(|t| self.alpha_bar(t, i)).collect()
    }

    pub(crate) fn set_column(&mut self, i: usize, column: &[f64]) {
        for (t, &a) in column.iter().enumerate() {
            self.alpha_bar[t * self.positions + i] = a;
        }
    }

    /// Checks bounds, strict monotonicity and the variance inequality.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.positions {
            for t in 0..=self.steps {
                let a = self.alpha_bar(t, i);
                if !a.is_finite() || !(ALPHA_BAR_MIN..=1.0).contains(&a) {
                    return Err(Error::Format(format!("alpha_bar[{t}][{i}] = {a} is out of bounds")));
                }
                if t > 0 && a >= self.alpha_bar(t - 1, i) {
                    return Err(Error::Format(format!("alpha_bar not strictly decreasing at t={t}, i={i}")));
                }
            }
        }
        Ok(())
    }

    /// Coefficients at step `t` (1 ≤ t ≤ T).
    pub fn coefficients(&self, t: usize) -> Result<Coefficients> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!("time step {t} outside 1..={}", self.steps)));
        }
        let alpha_bar = self.row(t).to_vec();
        let alpha_bar_prev = self.row(t - 1).to_vec();
        let alpha: Vec<f64> = alpha_bar.iter().zip(&alpha_bar_prev).map(|(a, p)| a / p).collect();
        let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let beta_tilde = beta
            .iter()
            .zip(alpha_bar.iter().zip(&alpha_bar_prev))
            .map(|(b, (a, p))| (1.0 - p) / (1.0 - a) * b)
            .collect();
        Ok(Coefficients {
            alpha_bar,
            alpha_bar_prev,
            alpha,
            beta,
            beta_tilde,
        })
    }
}

/// Lifts a column above the floor and then pushes it strictly below its
/// predecessors, keeping `column[0]` fixed.
pub(crate) fn enforce_column(column: &mut [f64]) -> Result<()> {
    let last = column.len() - 1;
    for a in column.iter_mut().skip(1) {
        if !a.is_finite() {
            return Err(Error::NonFinite { op: "schedule" });
        }
        *a = a.clamp(ALPHA_BAR_MIN, 1.0);
    }
    column[last] = column[last].max(ALPHA_BAR_MIN);
    for t in (1..last).rev() {
        column[t] = column[t].max(column[t + 1] + MONOTONE_GAP);
    }
    for t in 1..=last {
        column[t] = column[t].min(column[t - 1] - MONOTONE_GAP);
    }
    if column[last] < ALPHA_BAR_MIN {
        return Err(Error::InvalidArgument(format!(
            "cannot fit {last} strictly decreasing steps between {} and {ALPHA_BAR_MIN}",
            column[0]
        )));
    }
    Ok(())
}
