//! Adam with warm-up followed by linear decay of the learning rate.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Linear warm-up to `base` over `warmup` steps, then linear decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    /// Rate applied by update number `step` (1-based).
    pub fn rate(&self, step: u64) -> f64 {
        if step <= self.warmup && self.warmup > 0 {
            return self.base * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        self.base * (self.total.saturating_sub(step) as f64 / span).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(schedule: LrSchedule, params: &[Tensor<T>]) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_state(
        schedule: LrSchedule,
        step: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Optimizer("moment accumulators disagree in shape".into()));
        }
        Ok(Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// Learning rate that the next call to [`Adam::step`] will use.
    pub fn next_rate(&self) -> f64 {
        self.schedule.rate(self.step + 1)
    }

    /// One bias-corrected Adam update. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<f64> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "expected {} parameters and gradients, got {} and {}",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        if self.step >= self.schedule.total {
            return Err(Error::Optimizer(format!(
                "step counter {} reached the configured maximum {}",
                self.step, self.schedule.total
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                None => return Err(Error::Optimizer(format!("missing gradient for parameter {i}"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::shape("adam", p.shape(), g.shape()));
                }
                Some(g) => g.ensure_finite("adam")?,
            }
        }
        self.step += 1;
        let lr = self.schedule.rate(self.step);
        let b1 = T::from_f64c(self.beta1);
        let b2 = T::from_f64c(self.beta2);
        let c1 = T::from_f64c(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::from_f64c(1.0 - self.beta2.powi(self.step as i32));
        let lr_t = T::from_f64c(lr);
        let eps = T::from_f64c(self.eps);
        let one = T::one();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let g = g.as_ref().expect("checked above");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64c() * v.to_f64c())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            base: 1e-4,
            warmup: 10_000,
            total: 100_000,
        }
    }

    #[test]
    fn warmup_is_linear() {
        let s = sched();
        for step in [1u64, 17, 5000, 9999, 10_000] {
            assert!((s.rate(step) - 1e-4 * step as f64 / 10_000.0).abs() < 1e-18);
        }
    }

    #[test]
    fn decays_linearly_to_zero() {
        let s = sched();
        assert!((s.rate(55_000) - 0.5e-4).abs() < 1e-15);
        assert_eq!(s.rate(100_000), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_fn(&[2, 2], |i| i as f32)];
        let before = p.clone();
        let mut adam = Adam::new(sched(), &p);
        let g = vec![Some(Tensor::zeros(&[2, 2]))];
        for _ in 0..5 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = vec![Tensor::full(&[3], 1.0f64)];
        let mut adam = Adam::new(
            LrSchedule {
                base: 1e-2,
                warmup: 0,
                total: 1000,
            },
            &p,
        );
        let g = vec![Some(Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap())];
        for _ in 0..50 {
            adam.step(&mut p, &g).unwrap();
        }
        let d = p[0].data();
        assert!(d[0] < 1.0 && d[1] > 1.0 && d[2] < 1.0);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = vec![Tensor::full(&[1], 1.0f32)];
        let mut adam = Adam::new(sched(), &p);
        assert!(matches!(adam.step(&mut p, &[None]), Err(Error::Optimizer(_))));
    }

    #[test]
    fn step_past_total_is_rejected() {
        let mut p = vec![Tensor::full(&[1], 1.0f32)];
        let s = LrSchedule {
            base: 1e-3,
            warmup: 0,
            total: 2,
        };
        let mut adam = Adam::new(s, &p);
        let g = vec![Some(Tensor::full(&[1], 1.0f32))];
        adam.step(&mut p, &g).unwrap();
        adam.step(&mut p, &g).unwrap();
        assert!(adam.step(&mut p, &g).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
