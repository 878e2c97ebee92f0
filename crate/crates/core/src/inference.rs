//! Reverse-process sampling, rounding, MBR selection, and sampling by prior.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_source, target_body, TokenSequence, Vocabulary, CLS, PAD, SEP};
use crate::denoiser::{Denoiser, EncoderMemory};
use crate::diffusion::{clamp_to_embeddings, denoising_mean, round_to_tokens, standard_normal};
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::numerics::{Scalar, Tensor};
use crate::parallel::Execution;
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Which latent is rounded to tokens after the last step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundFrom {
    /// The final clean-sequence estimate `ẑ_0`.
    #[default]
    Estimate,
    /// The final sampled latent.
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub seed: u64,
    pub self_conditioning: bool,
    pub clamp: bool,
    /// Per-step probability of sampling from the forward-process prior.
    pub prior_p1: f64,
    /// Fraction of the earliest reverse steps where the prior may be used.
    pub prior_p2: f64,
    pub mbr_candidates: usize,
    pub round_from: RoundFrom,
    /// Record the decoded estimate at every step.
    pub trace: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            self_conditioning: true,
            clamp: false,
            prior_p1: 0.0,
            prior_p2: 0.0,
            mbr_candidates: 1,
            round_from: RoundFrom::Estimate,
            trace: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("prior_p1", self.prior_p1), ("prior_p2", self.prior_p2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.mbr_candidates == 0 {
            return Err(Error::Config("mbr_candidates must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether step `t` lies in the earliest `⌈p2·T⌉` reverse steps.
    pub fn prior_eligible(&self, t: usize, steps: usize) -> bool {
        let window = (self.prior_p2 * steps as f64).ceil() as usize;
        t > steps.saturating_sub(window)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Denoising,
    Prior,
    /// `t = 1`: the mean is returned without noise.
    Final,
}

pub struct StepOutput<T> {
    pub z_prev: Tensor<T>,
    pub estimate: Tensor<T>,
    pub branch: Branch,
}

/// One reverse step from `z_t` to `z_{t−1}`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<T: Scalar>(
    model: &Denoiser<T>,
    z_t: &Tensor<T>,
    carry: &Tensor<T>,
    memory: &EncoderMemory<T>,
    t: usize,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput<T>> {
    let zeros;
    let self_cond = if cfg.self_conditioning {
        carry
    } else {
        zeros = Tensor::zeros(z_t.shape());
        &zeros
    };
    let mut estimate = model.denoise(z_t, self_cond, memory, t)?;
    if cfg.clamp {
        estimate = clamp_to_embeddings(&estimate, model.embedding())?;
    }
    let mean = denoising_mean(&estimate, z_t, t, schedule)?;
    let (z_prev, branch) = if t == 1 {
        (mean, Branch::Final)
    } else {
        let use_prior =
            cfg.prior_p1 > 0.0 && cfg.prior_eligible(t, schedule.steps()) && rng.random::<f64>() < cfg.prior_p1;
        let eps: Tensor<T> = standard_normal(z_t.shape(), rng);
        let d = z_t.cols();
        let mut out = if use_prior { estimate.clone() } else { mean };
        let c = schedule.coefficients(t)?;
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let (scale, std) = if use_prior {
                (c.alpha_bar_prev[r].sqrt(), (1.0 - c.alpha_bar_prev[r]).sqrt())
            } else {
                (1.0, c.beta_tilde[r].sqrt())
            };
            let (scale, std) = (T::from_f64c(scale), T::from_f64c(std));
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale * *v + std * eps.data()[r * d + j];
            }
        }
        (out, if use_prior { Branch::Prior } else { Branch::Denoising })
    };
    if !z_prev.is_finite() || !estimate.is_finite() {
        return Err(Error::Generation {
            step: t,
            reason: "non-finite latent".into(),
        });
    }
    Ok(StepOutput {
        z_prev,
        estimate,
        branch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub decoded_argmax_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    /// `[CLS] body [SEP] [PAD]…` rebuilt from the rounded output.
    pub tokens: Vec<u32>,
    /// Rounded ids before reframing.
    pub raw_tokens: Vec<u32>,
    pub text: String,
    pub seed: u64,
    pub risk: Option<f64>,
    pub prior_steps: usize,
    pub trace: Vec<TraceRecord>,
}

impl GenerationCandidate {
    pub fn body(&self) -> Vec<u32> {
        target_body(&self.tokens)
    }
}

fn reframe(raw: &[u32]) -> Vec<u32> {
    let body = target_body(raw);
    let n = raw.len();
    let mut ids = Vec::with_capacity(n);
    ids.push(CLS);
    ids.extend(body.into_iter().take(n.saturating_sub(2)));
    if ids.len() < n {
        ids.push(SEP);
    }
    ids.resize(n, PAD);
    ids
}

/// Seed of candidate `index` under base seed `base`.
pub fn candidate_seed(base: u64, index: usize) -> u64 {
    rng::mix_seed(&[rng::DOMAIN_CANDIDATE, base, index as u64])
}

/// Runs the full reverse chain from `z_T ~ N(0, I)` with an encoded source.
pub fn generate_with_memory<T: Scalar>(
    model: &Denoiser<T>,
    memory: &EncoderMemory<T>,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<GenerationCandidate> {
    let n = model.config().max_target;
    let d = model.config().embed_dim;
    if schedule.positions() != n || schedule.steps() != model.config().steps {
        return Err(Error::shape(
            "generate",
            &[schedule.steps(), schedule.positions()],
            &[model.config().steps, n],
        ));
    }
    let mut rng = rng::stream(&[rng::DOMAIN_CANDIDATE, seed]);
    let mut z: Tensor<T> = standard_normal(&[n, d], &mut rng);
    let mut carry = Tensor::zeros(&[n, d]);
    let mut trace = Vec::new();
    let mut prior_steps = 0;
    for t in (1..=schedule.steps()).rev() {
        let out = reverse_step(model, &z, &carry, memory, t, schedule, cfg, &mut rng)?;
        if out.branch == Branch::Prior {
            prior_steps += 1;
        }
        if cfg.trace {
            let ids = round_to_tokens(&out.estimate, model.embedding())?;
            trace.push(TraceRecord {
                t,
                decoded_argmax_text: vocab.decode(&ids),
            });
        }
        z = out.z_prev;
        carry = out.estimate;
    }
    let source = match cfg.round_from {
        RoundFrom::Estimate => &carry,
        RoundFrom::Latent => &z,
    };
    let raw_tokens = round_to_tokens(source, model.embedding())?;
    let tokens = reframe(&raw_tokens);
    Ok(GenerationCandidate {
        text: vocab.decode_target(&tokens),
        tokens,
        raw_tokens,
        seed,
        risk: None,
        prior_steps,
        trace,
    })
}

/// One generation: encodes the source once, then samples with `seed`.
pub fn generate<T: Scalar>(
    model: &Denoiser<T>,
    source: &TokenSequence,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<GenerationCandidate> {
    let memory = model.encode(source)?;
    generate_with_memory(model, &memory, schedule, vocab, cfg, seed)
}

/// `cfg.mbr_candidates` samples sharing one encoder pass, seeds derived from
/// `(cfg.seed, index)`.
pub fn generate_candidates<T: Scalar>(
    model: &Denoiser<T>,
    source: &TokenSequence,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    cfg: &SampleConfig,
    execution: Execution,
) -> Result<Vec<GenerationCandidate>> {
    let memory = model.encode(source)?;
    execution
        .map(cfg.mbr_candidates, |k| {
            generate_with_memory(model, &memory, schedule, vocab, cfg, candidate_seed(cfg.seed, k))
        })
        .into_iter()
        .collect()
}

/// `risk[a] = mean_b −BLEU(a, b)` over all candidates, including `a` itself.
pub fn mbr_risks(bodies: &[Vec<u32>]) -> Vec<f64> {
    let k = bodies.len() as f64;
    bodies
        .iter()
        .map(|a| -bodies.iter().map(|b| bleu(a, b)).sum::<f64>() / k)
        .collect()
}

/// Fills every candidate's risk and returns the index of the minimum-risk
/// candidate; ties go to the lowest seed.
pub fn mbr_select(candidates: &mut [GenerationCandidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("MBR over an empty candidate set".into()));
    }
    let bodies: Vec<Vec<u32>> = candidates.iter().map(GenerationCandidate::body).collect();
    let risks = mbr_risks(&bodies);
    for (c, &r) in candidates.iter_mut().zip(&risks) {
        c.risk = Some(r);
    }
    let mut best = 0;
    for k in 1..candidates.len() {
        let (rk, rb) = (risks[k], risks[best]);
        if rk < rb || (rk == rb && candidates[k].seed < candidates[best].seed) {
            best = k;
        }
    }
    Ok(best)
}

/// MBR-selected output for one input with all candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub selected: usize,
    pub candidates: Vec<GenerationCandidate>,
}

impl Translation {
    pub fn best(&self) -> &GenerationCandidate {
        &self.candidates[self.selected]
    }
}

/// Generates for every source text, parallel across inputs. Failures are
/// reported per input.
pub fn translate<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    sources: &[String],
    cfg: &SampleConfig,
    truncate: bool,
    execution: Execution,
) -> Vec<Result<Translation>> {
    execution.map(sources.len(), |k| {
        let source = encode_source(&sources[k], vocab, model.config().max_source, truncate)?;
        let mut candidates = generate_candidates(model, &source, schedule, vocab, cfg, Execution::Sequential)?;
        let selected = mbr_select(&mut candidates)?;
        Ok(Translation { selected, candidates })
    })
}

/// Writes one JSON object per trace record.
pub fn write_trace(w: &mut impl Write, trace: &[TraceRecord]) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
