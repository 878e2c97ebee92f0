use crate::error::{Error, Result};

/// Running mean of the denoising loss for every `(t, i)`, `1 ≤ t ≤ T`.
///
/// Each cell is a warm-started exponential moving average: the first
/// `1/(1−decay)` samples are averaged exactly, later ones blend in with weight
/// `1 − decay`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLedger {
    steps: usize,
    positions: usize,
    decay: f64,
    mean: Vec<f64>,
    count: Vec<u64>,
}

impl LossLedger {
    pub fn new(steps: usize, positions: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("ledger decay must be in [0, 1), got {decay}")));
        }
        if steps == 0 || positions == 0 {
            return Err(Error::InvalidArgument("ledger needs at least one step and position".into()));
        }
        Ok(Self {
            steps,
            positions,
            decay,
            mean: vec![0.0; steps * positions],
            count: vec![0; steps * positions],
        })
    }

    pub(crate) fn from_parts(steps: usize, positions: usize, decay: f64, mean: Vec<f64>, count: Vec<u64>) -> Result<Self> {
        let mut l = Self::new(steps, positions, decay)?;
        if mean.len() != l.mean.len() || count.len() != l.count.len() {
            return Err(Error::Format("ledger block has the wrong size".into()));
        }
        l.mean = mean;
        l.count = count;
        Ok(l)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub(crate) fn raw(&self) -> (&[f64], &[u64]) {
        (&self.mean, &self.count)
    }

    fn cell(&self, t: usize, i: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.steps && i < self.positions);
        (t - 1) * self.positions + i
    }

    /// Records one loss sample. Padded positions are ignored.
    pub fn record(&mut self, t: usize, i: usize, value: f64, padded: bool) {
        if padded || t == 0 || t > self.steps || i >= self.positions || !value.is_finite() {
            return;
        }
        let c = self.cell(t, i);
        self.count[c] += 1;
        let horizon = (1.0 / (1.0 - self.decay)).max(1.0);
        let k = (self.count[c] as f64).min(horizon);
        self.mean[c] += (value - self.mean[c]) / k;
    }

    /// Records per-position losses for step `t`; `pad_mask[i]` marks padding.
    pub fn record_row(&mut self, t: usize, values: &[f64], pad_mask: &[bool]) {
        for (i, (&v, &p)) in values.iter().zip(pad_mask).enumerate() {
            self.record(t, i, v, p);
        }
    }

    pub fn mean(&self, t: usize, i: usize) -> Option<f64> {
        let c = self.cell(t, i);
        (self.count[c] > 0).then_some(self.mean[c])
    }

    pub fn count(&self, t: usize, i: usize) -> u64 {
        self.count[self.cell(t, i)]
    }

    /// Means for `t = 1..=T` at position `i`; `None` where unvisited.
    pub fn column(&self, i: usize) -> Vec<Option<f64>> {
        (1..=self.steps).map(|t| self.mean(t, i)).collect()
    }

    /// Fraction of steps with at least one sample at position `i`.
    pub fn coverage(&self, i: usize) -> f64 {
        let visited = (1..=self.steps).filter(|&t| self.count(t, i) > 0).count();
        visited as f64 / self.steps as f64
    }
}
