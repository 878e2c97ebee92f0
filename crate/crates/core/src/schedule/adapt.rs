use super::{enforce_column, LossLedger, NoiseSchedule};
use crate::error::{Error, Result};

/// Monotone knots `(L_s, ᾱ_s)` for one position, strictly increasing in `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Knots {
    pub loss: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear interpolation through `(x, y)` knots with strictly increasing `x`,
/// clamped to the end values outside the knot range.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinear {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::InvalidArgument("interpolation needs matching non-empty knots".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("interpolation knots must be strictly increasing".into()));
        }
        Ok(Self { x, y })
    }

    pub fn eval(&self, q: f64) -> f64 {
        let last = self.x.len() - 1;
        if q <= self.x[0] {
            return self.y[0];
        }
        if q >= self.x[last] {
            return self.y[last];
        }
        // First knot strictly above q; q lies in [x[k-1], x[k]).
        let k = self.x.partition_point(|&v| v <= q);
        let (x0, x1, y0, y1) = (self.x[k - 1], self.x[k], self.y[k - 1], self.y[k]);
        (y1 - y0) / (x1 - x0) * (q - x0) + y0
    }
}

/// Pool-adjacent-violators fit of `loss` to a strictly increasing sequence.
/// `alpha_bar` is pooled over the same blocks with the same weights.
pub fn pava(loss: &[f64], alpha_bar: &[f64], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    struct Block {
        l: f64,
        a: f64,
        w: f64,
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(loss.len());
    for ((&l, &a), &w) in loss.iter().zip(alpha_bar).zip(weights) {
        blocks.push(Block { l, a, w });
        while blocks.len() > 1 {
            let n = blocks.len();
            let (hi, lo) = (blocks[n - 1].l, blocks[n - 2].l);
            // Pooled means carry rounding; near-equal neighbours count as ties.
            if hi - lo > 1e-12 * hi.abs().max(lo.abs()) {
                break;
            }
            let top = blocks.pop().unwrap();
            let prev = blocks.last_mut().unwrap();
            let w = prev.w + top.w;
            prev.l = (prev.l * prev.w + top.l * top.w) / w;
            prev.a = (prev.a * prev.w + top.a * top.w) / w;
            prev.w = w;
        }
    }
    blocks.into_iter().map(|b| (b.l, b.a)).unzip()
}

/// Fills unvisited steps by linear interpolation along `t`, holding the
/// nearest recorded value beyond the ends. `None` if nothing was recorded.
pub(crate) fn fill_missing(col: &[Option<f64>]) -> Option<Vec<f64>> {
    let known: Vec<(usize, f64)> = col.iter().enumerate().filter_map(|(t, v)| v.map(|v| (t, v))).collect();
    let (&(first_t, first_v), &(last_t, last_v)) = (known.first()?, known.last()?);
    let mut out = vec![0.0; col.len()];
    for (t, o) in out.iter_mut().enumerate() {
        *o = if t <= first_t {
            first_v
        } else if t >= last_t {
            last_v
        } else {
            let k = known.partition_point(|&(kt, _)| kt <= t);
            let (t0, v0) = known[k - 1];
            let (t1, v1) = known[k];
            v0 + (v1 - v0) * (t - t0) as f64 / (t1 - t0) as f64
        };
    }
    Some(out)
}

/// Stride-`K` window means of loss and ᾱ over `t = 1..=T`, made monotone by
/// [`pava`]. Positions whose coverage is below `min_coverage`, or that were
/// never recorded, yield `None`.
pub fn coarsen(ledger: &LossLedger, schedule: &NoiseSchedule, k: usize, min_coverage: f64) -> Result<Vec<Option<Knots>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("coarsening stride K must be at least 1".into()));
    }
    check_dims(ledger, schedule)?;
    let steps = schedule.steps();
    let mut out = Vec::with_capacity(schedule.positions());
    for i in 0..schedule.positions() {
        let coverage = ledger.coverage(i);
        if coverage == 0.0 || coverage < min_coverage {
            log::debug!("position {i}: coverage {coverage:.3} too low, schedule kept");
            out.push(None);
            continue;
        }
        let Some(filled) = fill_missing(&ledger.column(i)) else {
            out.push(None);
            continue;
        };
        let mut loss = Vec::new();
        let mut alpha = Vec::new();
        let mut weight = Vec::new();
        for start in (1..=steps).step_by(k) {
            let end = (start + k - 1).min(steps);
            let w = (end - start + 1) as f64;
            loss.push((start..=end).map(|t| filled[t - 1]).sum::<f64>() / w);
            alpha.push((start..=end).map(|t| schedule.alpha_bar(t, i)).sum::<f64>() / w);
            weight.push(w);
        }
        if loss.iter().chain(&alpha).any(|v| !v.is_finite()) {
            log::warn!("position {i}: non-finite knot, schedule kept");
            out.push(None);
            continue;
        }
        let (loss, alpha_bar) = pava(&loss, &alpha, &weight);
        out.push(Some(Knots { loss, alpha_bar }));
    }
    Ok(out)
}

/// Positions re-fitted and kept by one [`adapt`] call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdaptReport {
    pub updated: Vec<usize>,
    pub skipped: Vec<usize>,
}

/// Re-fits every position so that, under the recorded losses, equal steps in
/// `t` correspond to equal steps in loss. Target losses for `t = 1..=T` are
/// evenly spaced between the smallest and largest knot. ᾱ_0 is left unchanged.
pub fn adapt(
    schedule: &NoiseSchedule,
    ledger: &LossLedger,
    k: usize,
    min_coverage: f64,
) -> Result<(NoiseSchedule, AdaptReport)> {
    let knots = coarsen(ledger, schedule, k, min_coverage)?;
    let steps = schedule.steps();
    let mut next = schedule.clone();
    let mut report = AdaptReport::default();
    for (i, knots) in knots.into_iter().enumerate() {
        let Some(kn) = knots.filter(|kn| kn.loss.len() >= 2) else {
            report.skipped.push(i);
            continue;
        };
        let (lo, hi) = (kn.loss[0], kn.loss[kn.loss.len() - 1]);
        let map = PiecewiseLinear::new(kn.loss, kn.alpha_bar)?;
        let mut column = schedule.column(i);
        for (t, a) in column.iter_mut().enumerate().skip(1) {
            let target = lo + (hi - lo) * (t - 1) as f64 / (steps - 1) as f64;
            *a = map.eval(target);
        }
        match enforce_column(&mut column) {
            Ok(()) => {
                next.set_column(i, &column);
                report.updated.push(i);
            }
            Err(e) => {
                log::warn!("position {i}: {e}; schedule kept");
                report.skipped.push(i);
            }
        }
    }
    next.validate()?;
    Ok((next, report))
}

fn check_dims(ledger: &LossLedger, schedule: &NoiseSchedule) -> Result<()> {
    if ledger.steps() != schedule.steps() || ledger.positions() != schedule.positions() {
        return Err(Error::shape(
            "adapt",
            &[ledger.steps(), ledger.positions()],
            &[schedule.steps(), schedule.positions()],
        ));
    }
    Ok(())
}
