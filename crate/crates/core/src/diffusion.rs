//! Continuous diffusion over embedding sequences with per-position schedules.
//!
//! Rows of every `n × d` latent are token positions; each scalar coefficient
//! of the forward process, the posterior and the denoising mean becomes a
//! length-`n` vector applied row by row.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{ParallelPair, TokenSequence};
use crate::denoiser::{Denoiser, Dropout};
use crate::error::{Error, Result};
use crate::numerics::{neg_sq_dist_values, Graph, Scalar, Tensor, Var};
use crate::parallel::Execution;
use crate::schedule::NoiseSchedule;

pub fn standard_normal<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64c(rng.sample(StandardNormal)))
}

fn check_rows<T: Scalar>(op: &'static str, x: &Tensor<T>, schedule: &NoiseSchedule) -> Result<()> {
    if x.rows() != schedule.positions() {
        return Err(Error::shape(op, x.shape(), &[schedule.positions(), x.cols()]));
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `out[i] = a[i]·x[i] + b[i]·y[i]` row by row.
fn rowwise<T: Scalar>(a: &[f64], x: &Tensor<T>, b: &[f64], y: &Tensor<T>) -> Tensor<T> {
    let cols = x.cols();
    let mut out = x.clone();
    for (r, chunk) in out.data_mut().chunks_mut(cols).enumerate() {
        let (ar, br) = (T::from_f64c(a[r]), T::from_f64c(b[r]));
        for (c, o) in chunk.iter_mut().enumerate() {
            *o = ar * x.data()[r * cols + c] + br * y.data()[r * cols + c];
        }
    }
    out
}

/// `z_0 = g_φ(w_y) + sqrt(1 − ᾱ_0) ε` with the given noise.
pub fn embed_forward_with_noise<T: Scalar>(g: &Tensor<T>, schedule: &NoiseSchedule, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_rows("embed_forward", g, schedule)?;
    same_shape("embed_forward", g, eps)?;
    let ones = vec![1.0; g.rows()];
    let noise: Vec<f64> = schedule.row(0).iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok(rowwise(&ones, g, &noise, eps))
}

pub fn embed_forward<T: Scalar>(g: &Tensor<T>, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor<T>> {
    embed_forward_with_noise(g, schedule, &standard_normal(g.shape(), rng))
}

/// `z_t = sqrt(ᾱ_t) z_0 + sqrt(1 − ᾱ_t) ε` with the given noise.
pub fn q_sample_with_noise<T: Scalar>(z0: &Tensor<T>, t: usize, schedule: &NoiseSchedule, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_rows("q_sample", z0, schedule)?;
    same_shape("q_sample", z0, eps)?;
    let c = schedule.coefficients(t)?;
    let signal: Vec<f64> = c.alpha_bar.iter().map(|a| a.sqrt()).collect();
    let noise: Vec<f64> = c.alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok(rowwise(&signal, z0, &noise, eps))
}

pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor<T>> {
    q_sample_with_noise(z0, t, schedule, &standard_normal(z0.shape(), rng))
}

/// One forward transition `z_t = sqrt(α_t) z_{t−1} + sqrt(β_t) ε`.
pub fn q_step<T: Scalar>(z_prev: &Tensor<T>, t: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor<T>> {
    check_rows("q_step", z_prev, schedule)?;
    let c = schedule.coefficients(t)?;
    let signal: Vec<f64> = c.alpha.iter().map(|a| a.sqrt()).collect();
    let noise: Vec<f64> = c.beta.iter().map(|b| b.sqrt()).collect();
    Ok(rowwise(&signal, z_prev, &noise, &standard_normal(z_prev.shape(), rng)))
}

/// Per-position weights of `z_0` and `z_t` in the posterior mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanCoefficients {
    pub z0: Vec<f64>,
    pub zt: Vec<f64>,
}

pub fn mean_coefficients(schedule: &NoiseSchedule, t: usize) -> Result<MeanCoefficients> {
    let c = schedule.coefficients(t)?;
    let n = c.alpha.len();
    let mut z0 = Vec::with_capacity(n);
    let mut zt = Vec::with_capacity(n);
    for i in 0..n {
        let denom = 1.0 - c.alpha_bar[i];
        z0.push(c.alpha_bar_prev[i].sqrt() * c.beta[i] / denom);
        zt.push(c.alpha[i].sqrt() * (1.0 - c.alpha_bar_prev[i]) / denom);
    }
    Ok(MeanCoefficients { z0, zt })
}

fn mean_from<T: Scalar>(op: &'static str, z0: &Tensor<T>, zt: &Tensor<T>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    check_rows(op, z0, schedule)?;
    same_shape(op, z0, zt)?;
    let c = mean_coefficients(schedule, t)?;
    Ok(rowwise(&c.z0, z0, &c.zt, zt))
}

/// Mean of `q(z_{t−1} | z_t, z_0)`.
pub fn posterior_mean<T: Scalar>(z0: &Tensor<T>, zt: &Tensor<T>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    mean_from("posterior_mean", z0, zt, t, schedule)
}

/// Mean of the learned reverse step: the posterior mean with `ẑ_0` in place
/// of `z_0`.
pub fn denoising_mean<T: Scalar>(z0_hat: &Tensor<T>, zt: &Tensor<T>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    mean_from("denoising_mean", z0_hat, zt, t, schedule)
}

/// Per-position rounding distribution, `softmax_w(−‖z_i − g_φ(w)‖²)` (`n × V`).
pub fn rounding_probs<T: Scalar>(z: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    if z.cols() != table.cols() {
        return Err(Error::shape("rounding", z.shape(), table.shape()));
    }
    let (n, vocab, d) = (z.rows(), table.rows(), z.cols());
    let mut logits = neg_sq_dist_values(z.data(), table.data(), n, vocab, d);
    for row in logits.chunks_mut(vocab) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(vec![n, vocab], logits)
}

/// Nearest embedding per row; ties go to the lowest id.
pub fn round_to_tokens<T: Scalar>(z: &Tensor<T>, table: &Tensor<T>) -> Result<Vec<u32>> {
    if z.cols() != table.cols() {
        return Err(Error::shape("rounding", z.shape(), table.shape()));
    }
    let (n, vocab, d) = (z.rows(), table.rows(), z.cols());
    let logits = neg_sq_dist_values(z.data(), table.data(), n, vocab, d);
    Ok(logits
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (w, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = w;
                }
            }
            best as u32
        })
        .collect())
}

/// Replaces each row by its nearest embedding (the clamping trick).
pub fn clamp_to_embeddings<T: Scalar>(z: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    let ids = round_to_tokens(z, table)?;
    let d = z.cols();
    let mut data = Vec::with_capacity(z.numel());
    for &w in &ids {
        data.extend_from_slice(&table.data()[w as usize * d..(w as usize + 1) * d]);
    }
    Tensor::new(z.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rounding {
    /// `log p̃(w_y | z)` summed over non-pad positions.
    pub log_prob: f64,
    pub tokens: Vec<u32>,
}

pub fn rounding_logprob<T: Scalar>(z: &Tensor<T>, ids: &[u32], pad_mask: &[bool], table: &Tensor<T>) -> Result<Rounding> {
    if ids.len() != z.rows() || pad_mask.len() != z.rows() {
        return Err(Error::shape("rounding_logprob", z.shape(), &[ids.len()]));
    }
    let probs = rounding_probs(z, table)?;
    let mut log_prob = 0.0;
    for (i, (&w, &pad)) in ids.iter().zip(pad_mask).enumerate() {
        if !pad {
            log_prob += probs.row(i)[w as usize].to_f64c().ln();
        }
    }
    Ok(Rounding {
        log_prob,
        tokens: round_to_tokens(z, table)?,
    })
}

/// What the training objective needs from a network placed on a tape.
pub trait DenoisingNetwork<T: Scalar> {
    /// The embedding table `g_φ` on the tape.
    fn embedding(&self) -> Var;
    fn encode(&mut self, g: &mut Graph<T>, source: &TokenSequence) -> Result<Var>;
    fn denoise(
        &mut self,
        g: &mut Graph<T>,
        z_t: Var,
        self_cond: Var,
        memory: Var,
        source: &TokenSequence,
        t: usize,
    ) -> Result<Var>;
    /// Estimate with self-condition zero, computed off the tape.
    fn denoise_detached(&self, z_t: &Tensor<T>, memory: &Tensor<T>, source: &TokenSequence, t: usize) -> Result<Tensor<T>>;
}

/// A [`Denoiser`] whose parameters are bound to a tape.
pub struct BoundDenoiser<'m, 'r, T> {
    pub model: &'m Denoiser<T>,
    pub vars: Vec<Var>,
    pub dropout: Dropout<'r>,
}

impl<'m, 'r, T: Scalar> BoundDenoiser<'m, 'r, T> {
    pub fn new(model: &'m Denoiser<T>, g: &mut Graph<T>, dropout: Dropout<'r>) -> Self {
        let vars = model.bind(g);
        Self { model, vars, dropout }
    }
}

impl<T: Scalar> DenoisingNetwork<T> for BoundDenoiser<'_, '_, T> {
    fn embedding(&self) -> Var {
        self.vars[self.model.embedding_index()]
    }

    fn encode(&mut self, g: &mut Graph<T>, source: &TokenSequence) -> Result<Var> {
        self.model.encode_graph(g, &self.vars, source, &mut self.dropout)
    }

    fn denoise(
        &mut self,
        g: &mut Graph<T>,
        z_t: Var,
        self_cond: Var,
        memory: Var,
        source: &TokenSequence,
        t: usize,
    ) -> Result<Var> {
        let mask = source.pad_mask();
        self.model
            .decode_graph(g, &self.vars, z_t, self_cond, memory, &mask, t, &mut self.dropout)
    }

    fn denoise_detached(&self, z_t: &Tensor<T>, memory: &Tensor<T>, source: &TokenSequence, t: usize) -> Result<Tensor<T>> {
        let memory = crate::denoiser::EncoderMemory {
            states: memory.clone(),
            pad_mask: source.pad_mask(),
        };
        self.model.denoise(z_t, &Tensor::zeros(z_t.shape()), &memory, t)
    }
}

/// Components of the simplified objective for one pair. Every squared-error
/// term is a mean over `n × d`; the rounding term is a mean over non-pad
/// positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub mu_t: f64,
    pub anchor: f64,
    pub rounding_nll: f64,
    pub total: f64,
    /// Sampled step of the main term.
    pub t: usize,
    /// `‖ẑ_0^i − z_0^i‖²/d` per position at step `t`.
    pub position_mse: Vec<f64>,
    /// The same at step 1 from the anchor draw.
    pub anchor_position_mse: Vec<f64>,
    pub pad_mask: Vec<bool>,
    pub self_conditioned: bool,
}

fn position_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let d = a.cols();
    a.data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| {
                    let e = (p - q).to_f64c();
                    e * e
                })
                .sum::<f64>()
                / d as f64
        })
        .collect()
}

fn noisy<T: Scalar>(g: &mut Graph<T>, z0: Var, signal: &[f64], noise: &[f64], rng: &mut impl Rng) -> Result<Var> {
    let shape = g.value(z0).shape().to_vec();
    let eps: Tensor<T> = standard_normal(&shape, rng);
    let ones = vec![0.0; signal.len()];
    let scaled_eps = rowwise(noise, &eps, &ones, &eps);
    let s: Vec<T> = signal.iter().map(|&v| T::from_f64c(v)).collect();
    let kept = g.scale_rows(z0, &s)?;
    let e = g.constant(scaled_eps);
    g.add(kept, e)
}

/// Builds the simplified objective for one pair on `g`.
///
/// `t` is drawn uniformly from `2..=T`; the `t = 1` anchor term uses a
/// separate draw. With `self_condition` the network first predicts `ẑ_0`
/// off the tape and that estimate is fed back as a constant.
pub fn training_loss<T: Scalar, N: DenoisingNetwork<T>>(
    g: &mut Graph<T>,
    net: &mut N,
    pair: &ParallelPair,
    schedule: &NoiseSchedule,
    self_condition: bool,
    rng: &mut impl Rng,
) -> Result<(Var, LossBreakdown)> {
    let steps = schedule.steps();
    let n = schedule.positions();
    let target = &pair.target;
    if target.len() != n {
        return Err(Error::shape("training_loss", &[target.len()], &[n]));
    }
    let ids = target.ids_usize();
    let pad_mask = target.pad_mask();
    let emb = net.embedding();
    let gw = g.gather(emb, &ids)?;
    let d = g.value(gw).cols();

    let ones = vec![1.0; n];
    let noise0: Vec<f64> = schedule.row(0).iter().map(|a| (1.0 - a).sqrt()).collect();
    let z0 = noisy(g, gw, &ones, &noise0, rng)?;

    let t = rng.random_range(2..=steps);
    let row_t = schedule.row(t);
    let sig_t: Vec<f64> = row_t.iter().map(|a| a.sqrt()).collect();
    let noi_t: Vec<f64> = row_t.iter().map(|a| (1.0 - a).sqrt()).collect();
    let zt = noisy(g, z0, &sig_t, &noi_t, rng)?;

    let memory = net.encode(g, &pair.source)?;
    let sc_value = if self_condition {
        net.denoise_detached(g.value(zt), g.value(memory), &pair.source, t)?
    } else {
        Tensor::zeros(&[n, d])
    };
    let sc = g.constant(sc_value);
    let zhat = net.denoise(g, zt, sc, memory, &pair.source, t)?;
    let mse = g.mse(zhat, z0)?;
    let position = position_mse(g.value(zhat), g.value(z0));

    let row_1 = schedule.row(1);
    let sig_1: Vec<f64> = row_1.iter().map(|a| a.sqrt()).collect();
    let noi_1: Vec<f64> = row_1.iter().map(|a| (1.0 - a).sqrt()).collect();
    let z1 = noisy(g, z0, &sig_1, &noi_1, rng)?;
    let zero = g.constant(Tensor::zeros(&[n, d]));
    let zhat1 = net.denoise(g, z1, zero, memory, &pair.source, 1)?;
    let anchor = g.mse(zhat1, gw)?;
    let anchor_position = position_mse(g.value(zhat1), g.value(z0));

    let sig_big_t: Vec<T> = schedule.row(steps).iter().map(|a| T::from_f64c(a.sqrt())).collect();
    let mu = g.scale_rows(z0, &sig_big_t)?;
    let mu_sq = g.mul(mu, mu)?;
    let mu_t = g.mean(mu_sq)?;

    let logits = g.neg_sq_dist(z0, emb)?;
    let real = pad_mask.iter().filter(|&&p| !p).count().max(1);
    let weights: Vec<T> = pad_mask
        .iter()
        .map(|&p| if p { T::zero() } else { T::from_f64c(1.0 / real as f64) })
        .collect();
    let nll = g.cross_entropy(logits, &ids, &weights)?;

    let a = g.add(mse, mu_t)?;
    let b = g.add(anchor, nll)?;
    let total = g.add(a, b)?;
    let val = |v: Var| g.value(v).item().to_f64c();
    let breakdown = LossBreakdown {
        mse: val(mse),
        mu_t: val(mu_t),
        anchor: val(anchor),
        rounding_nll: val(nll),
        total: val(total),
        t,
        position_mse: position,
        anchor_position_mse: anchor_position,
        pad_mask,
        self_conditioned: self_condition,
    };
    Ok((total, breakdown))
}

/// Denoising error `‖ẑ_0^i − z_0^i‖²/d` per requested step, overall and per
/// target position, over non-pad positions.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLossProfile {
    pub steps: Vec<usize>,
    /// Mean over all non-pad positions, one entry per step.
    pub mean: Vec<f64>,
    /// `position[k][i]`: mean at step `steps[k]` and position `i`; `None`
    /// where the position was always padding.
    pub position: Vec<Vec<Option<f64>>>,
}

/// Measures [`StepLossProfile`] with zero self-condition. Noise for pair `k`
/// comes from `seed` and `k` only, so the result does not depend on
/// `execution`.
pub fn step_loss_profile<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    pairs: &[ParallelPair],
    steps: &[usize],
    seed: u64,
    execution: Execution,
) -> Result<StepLossProfile> {
    let n = schedule.positions();
    let per_pair = execution.map(pairs.len(), |k| -> Result<Vec<Vec<f64>>> {
        let pair = &pairs[k];
        let mut rng = crate::rng::stream(&[seed, k as u64]);
        let emb = model.embedding();
        let d = emb.cols();
        let rows: Vec<T> = pair.target.ids.iter().flat_map(|&w| emb.row(w as usize).to_vec()).collect();
        let z0 = embed_forward(&Tensor::matrix(pair.target.len(), d, rows)?, schedule, &mut rng)?;
        let memory = model.encode(&pair.source)?;
        let zero = Tensor::zeros(z0.shape());
        steps
            .iter()
            .map(|&t| {
                let zt = q_sample(&z0, t, schedule, &mut rng)?;
                let est = model.denoise(&zt, &zero, &memory, t)?;
                Ok(position_mse(&est, &z0))
            })
            .collect()
    });
    let mut sums = vec![vec![(0.0, 0usize); n]; steps.len()];
    for (k, r) in per_pair.into_iter().enumerate() {
        let mask = pairs[k].target.pad_mask();
        for (acc, errs) in sums.iter_mut().zip(r?) {
            for ((cell, e), &pad) in acc.iter_mut().zip(errs).zip(&mask) {
                if !pad {
                    cell.0 += e;
                    cell.1 += 1;
                }
            }
        }
    }
    let mean = sums
        .iter()
        .map(|row| {
            let (s, c) = row.iter().fold((0.0, 0), |a, &(s, c)| (a.0 + s, a.1 + c));
            s / c.max(1) as f64
        })
        .collect();
    let position = sums
        .iter()
        .map(|row| row.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect())
        .collect();
    Ok(StepLossProfile {
        steps: steps.to_vec(),
        mean,
        position,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{encode_pair, synth_vocab, Framing};
    use crate::denoiser::DenoiserConfig;
    use crate::numerics::check_gradients;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent transcription of the posterior mean formula.
    fn oracle_posterior(z0: &[f64], zt: &[f64], t: usize, s: &NoiseSchedule, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; z0.len()];
        for i in 0..s.positions() {
            let ab = s.alpha_bar(t, i);
            let abp = s.alpha_bar(t - 1, i);
            let alpha = ab / abp;
            let beta = 1.0 - alpha;
            for j in 0..d {
                let k = i * d + j;
                out[k] = abp.sqrt() * beta / (1.0 - ab) * z0[k] + alpha.sqrt() * (1.0 - abp) / (1.0 - ab) * zt[k];
            }
        }
        out
    }

    #[test]
    fn zero_noise_embedding_is_exact() {
        let mut grid = NoiseSchedule::sqrt_init(10, 3, 1e-4).unwrap().grid().to_vec();
        grid[..3].fill(1.0);
        let s = NoiseSchedule::from_grid(10, 3, grid).unwrap();
        let g: Tensor<f32> = standard_normal(&[3, 4], &mut rng(1));
        assert_eq!(embed_forward(&g, &s, &mut rng(2)).unwrap(), g);
    }

    #[test]
    fn noiseless_posterior_identity() {
        let s = NoiseSchedule::sqrt_init(200, 3, 1e-4).unwrap();
        let z0: Tensor<f32> = standard_normal(&[3, 4], &mut rng(3));
        for t in 1..=200 {
            let signal: Vec<f64> = s.row(t).iter().map(|a| a.sqrt()).collect();
            let zt = rowwise(&signal, &z0, &[0.0; 3], &z0);
            let mu = posterior_mean(&z0, &zt, t, &s).unwrap();
            let prev: Vec<f64> = s.row(t - 1).iter().map(|a| a.sqrt()).collect();
            let want = rowwise(&prev, &z0, &[0.0; 3], &z0);
            assert!(mu.max_abs_diff(&want) < 1e-6, "t={t}");
        }
        let zero = Tensor::<f32>::zeros(&[3, 4]);
        assert_eq!(posterior_mean(&zero, &zero, 5, &s).unwrap(), zero);
    }

    #[test]
    fn posterior_matches_oracle_and_denoising_mean() {
        let s = NoiseSchedule::sqrt_init(50, 4, 1e-4).unwrap();
        let mut r = rng(4);
        for t in [2, 17, 50] {
            let z0: Tensor<f64> = standard_normal(&[4, 3], &mut r);
            let zt: Tensor<f64> = standard_normal(&[4, 3], &mut r);
            let mu = posterior_mean(&z0, &zt, t, &s).unwrap();
            let want = oracle_posterior(z0.data(), zt.data(), t, &s, 3);
            for (a, b) in mu.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
            assert_eq!(denoising_mean(&z0, &zt, t, &s).unwrap(), mu);
        }
        let bad: Tensor<f64> = Tensor::zeros(&[3, 3]);
        assert!(posterior_mean(&bad, &bad, 2, &s).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::sqrt_init(10, 2, 1e-4).unwrap();
        let z0: Tensor<f64> = standard_normal(&[2, 3], &mut rng(5));
        let eps = Tensor::zeros(&[2, 3]);
        let z = q_sample_with_noise(&z0, 4, &s, &eps).unwrap();
        assert!((z.data()[0] - s.alpha_bar(4, 0).sqrt() * z0.data()[0]).abs() < 1e-15);
        assert!(q_sample(&z0, 0, &s, &mut rng(1)).is_err());
        assert!(q_sample(&z0, 11, &s, &mut rng(1)).is_err());
    }

    #[test]
    fn rounding_cases() {
        let table = Tensor::<f64>::matrix(3, 2, vec![0.0, 0.0, 10.0, 0.0, -10.0, 0.0]).unwrap();
        let z = Tensor::matrix(2, 2, vec![10.0, 0.0, 0.0, 5.0]).unwrap();
        let r = rounding_logprob(&z, &[1, 0], &[false, true], &table).unwrap();
        assert_eq!(r.tokens[0], 1);
        assert!(r.log_prob.abs() < 1e-12);
        // Equidistant from 1 and 2 at the origin row: tie to the lower id.
        let mid = Tensor::<f64>::matrix(1, 2, vec![0.0, 3.0]).unwrap();
        let tb = Tensor::matrix(3, 2, vec![5.0, 5.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let p = rounding_probs(&mid, &tb).unwrap();
        assert!((p.data()[1] - p.data()[2]).abs() < 1e-15);
        assert_eq!(round_to_tokens(&mid, &tb).unwrap(), vec![1]);
    }

    #[test]
    fn rounding_matches_brute_force() {
        let mut r = rng(6);
        let table: Tensor<f64> = standard_normal(&[5, 2], &mut r);
        let z: Tensor<f64> = standard_normal(&[3, 2], &mut r);
        let p = rounding_probs(&z, &table).unwrap();
        for i in 0..3 {
            let d: Vec<f64> = (0..5)
                .map(|w| {
                    let dx = z.row(i)[0] - table.row(w)[0];
                    let dy = z.row(i)[1] - table.row(w)[1];
                    (-(dx * dx + dy * dy)).exp()
                })
                .collect();
            let total: f64 = d.iter().sum();
            for w in 0..5 {
                assert!((p.row(i)[w] - d[w] / total).abs() < 1e-12);
            }
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// A network that returns the clean embeddings exactly.
    struct Oracle {
        emb: Var,
        ids: Vec<usize>,
    }

    impl DenoisingNetwork<f64> for Oracle {
        fn embedding(&self) -> Var {
            self.emb
        }
        fn encode(&mut self, g: &mut Graph<f64>, _: &TokenSequence) -> Result<Var> {
            Ok(g.constant(Tensor::zeros(&[1, 1])))
        }
        fn denoise(&mut self, g: &mut Graph<f64>, _: Var, _: Var, _: Var, _: &TokenSequence, _: usize) -> Result<Var> {
            g.gather(self.emb, &self.ids)
        }
        fn denoise_detached(&self, z: &Tensor<f64>, _: &Tensor<f64>, _: &TokenSequence, _: usize) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    fn toy_pair(n: usize) -> ParallelPair {
        let v = synth_vocab(4).unwrap();
        let framing = Framing {
            max_source: 4,
            max_target: n,
            truncate: false,
        };
        encode_pair("a b", "b a", &v, framing).unwrap()
    }

    #[test]
    fn perfect_prediction_zeroes_regression_terms() {
        let mut grid = NoiseSchedule::sqrt_init(10, 5, 1e-4).unwrap().grid().to_vec();
        grid[..5].fill(1.0);
        let s = NoiseSchedule::from_grid(10, 5, grid).unwrap();
        let pair = toy_pair(5);
        let mut g = Graph::new();
        let table: Tensor<f64> = standard_normal(&[8, 4], &mut rng(7));
        let emb = g.leaf(table, true);
        let mut net = Oracle {
            emb,
            ids: pair.target.ids_usize(),
        };
        let (_, b) = training_loss(&mut g, &mut net, &pair, &s, false, &mut rng(8)).unwrap();
        assert_eq!(b.mse, 0.0);
        assert_eq!(b.anchor, 0.0);
        assert!(b.rounding_nll >= 0.0 && b.mu_t >= 0.0);
        assert!((2..=10).contains(&b.t));
    }

    #[test]
    fn mu_t_term_closed_form() {
        let mut grid = NoiseSchedule::sqrt_init(10, 4, 1e-4).unwrap().grid().to_vec();
        grid[..4].fill(1.0);
        let s = NoiseSchedule::from_grid(10, 4, grid).unwrap();
        assert_eq!(s.alpha_bar(10, 0), 1e-4);
        let pair = toy_pair(4);
        let mut g = Graph::new();
        let emb = g.leaf(Tensor::full(&[8, 3], 1.0), true);
        let mut net = Oracle {
            emb,
            ids: pair.target.ids_usize(),
        };
        let (_, b) = training_loss(&mut g, &mut net, &pair, &s, false, &mut rng(9)).unwrap();
        assert!((b.mu_t - 1e-4).abs() < 1e-15);
    }

    fn toy_config() -> DenoiserConfig {
        DenoiserConfig {
            vocab: 8,
            embed_dim: 4,
            hidden: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            max_source: 4,
            max_target: 5,
            steps: 10,
        }
    }

    /// Wraps a bound model but feeds a fixed self-conditioning estimate.
    struct Fixed<'a> {
        inner: BoundDenoiser<'a, 'a, f64>,
        estimate: Tensor<f64>,
    }

    impl DenoisingNetwork<f64> for Fixed<'_> {
        fn embedding(&self) -> Var {
            self.inner.embedding()
        }
        fn encode(&mut self, g: &mut Graph<f64>, s: &TokenSequence) -> Result<Var> {
            self.inner.encode(g, s)
        }
        fn denoise(&mut self, g: &mut Graph<f64>, z: Var, c: Var, m: Var, s: &TokenSequence, t: usize) -> Result<Var> {
            self.inner.denoise(g, z, c, m, s, t)
        }
        fn denoise_detached(&self, _: &Tensor<f64>, _: &Tensor<f64>, _: &TokenSequence, _: usize) -> Result<Tensor<f64>> {
            Ok(self.estimate.clone())
        }
    }

    #[test]
    fn self_conditioning_estimate_is_detached() {
        let s = NoiseSchedule::sqrt_init(10, 5, 1e-4).unwrap();
        let model: Denoiser<f64> = Denoiser::new(toy_config(), &mut rng(10)).unwrap();
        let pair = toy_pair(5);

        let mut g = Graph::new();
        let mut net = BoundDenoiser::new(&model, &mut g, Dropout::off());
        let (loss, b) = training_loss(&mut g, &mut net, &pair, &s, true, &mut rng(11)).unwrap();
        assert!(b.self_conditioned);
        let with_b = g.backward(loss).unwrap().param_grads(model.params.len());

        // Same draws, with the estimate supplied as an outside constant.
        // Recover the detached estimate by replaying the same draws.
        let mut r = rng(11);
        let mut gp = Graph::no_grad();
        let mut pnet = BoundDenoiser::new(&model, &mut gp, Dropout::off());
        let emb = pnet.embedding();
        let gw = gp.gather(emb, &pair.target.ids_usize()).unwrap();
        let noise0: Vec<f64> = s.row(0).iter().map(|a| (1.0 - a).sqrt()).collect();
        let z0 = noisy(&mut gp, gw, &[1.0; 5], &noise0, &mut r).unwrap();
        let t = r.random_range(2..=10);
        let sig: Vec<f64> = s.row(t).iter().map(|a| a.sqrt()).collect();
        let noi: Vec<f64> = s.row(t).iter().map(|a| (1.0 - a).sqrt()).collect();
        let zt = noisy(&mut gp, z0, &sig, &noi, &mut r).unwrap();
        let mem = pnet.encode(&mut gp, &pair.source).unwrap();
        let estimate = pnet.denoise_detached(gp.value(zt), gp.value(mem), &pair.source, t).unwrap();
        assert_eq!(t, b.t);

        let mut g2 = Graph::new();
        let inner = BoundDenoiser::new(&model, &mut g2, Dropout::off());
        let mut fixed = Fixed { inner, estimate };
        let (loss2, b2) = training_loss(&mut g2, &mut fixed, &pair, &s, true, &mut rng(11)).unwrap();
        assert_eq!(b2.total, b.total);
        let with_const = g2.backward(loss2).unwrap().param_grads(model.params.len());
        assert_eq!(with_b, with_const);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let s = NoiseSchedule::sqrt_init(10, 5, 1e-4).unwrap();
        let mut model: Denoiser<f64> = Denoiser::new(toy_config(), &mut rng(12)).unwrap();
        for p in model.params.iter_mut() {
            *p = p.map(|v| v * 3.0);
        }
        let pair = toy_pair(5);
        let inputs: Vec<(String, Tensor<f64>)> =
            model.param_names().iter().cloned().zip(model.params.iter().cloned()).collect();
        let mut r = rng(14);
        let estimate: Tensor<f64> = standard_normal(&[5, 4], &mut r);
        for branch in [false, true] {
            let report = check_gradients(
                &inputs,
                |g, vars| {
                    let inner = BoundDenoiser {
                        model: &model,
                        vars: vars.to_vec(),
                        dropout: Dropout::off(),
                    };
                    let mut net = Fixed {
                        inner,
                        estimate: estimate.clone(),
                    };
                    Ok(training_loss(g, &mut net, &pair, &s, branch, &mut rng(13))?.0)
                },
                1e-4,
                Some(10),
            )
            .unwrap();
            assert!(report.passed(), "branch {branch}: {:?}", report.failures());
        }
    }
}
