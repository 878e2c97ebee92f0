//! Training loop: batched loss, Adam updates, loss ledger, schedule adaptation,
//! JSONL logging and checkpoints.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{encode_pair, read_tsv, synth_corpus, synth_vocab, Batcher, ParallelPair, TextPair, Vocabulary};
use crate::denoiser::{Denoiser, Dropout};
use crate::diffusion::{training_loss, BoundDenoiser, LossBreakdown};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::inference::translate;
use crate::numerics::{clip_global_norm, Adam, Graph, LrSchedule, Tensor};
use crate::parallel::Execution;
use crate::rng;
use crate::schedule::{adapt, LossLedger, NoiseSchedule, SQRT_S0};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        step: u64,
        total: f64,
        mse: f64,
        mu_t: f64,
        anchor: f64,
        rounding_nll: f64,
        lr: f64,
        grad_norm: f64,
        self_conditioned: bool,
    },
    ScheduleUpdate {
        step: u64,
        updated: usize,
        skipped: Vec<usize>,
    },
    Checkpoint {
        step: u64,
        path: String,
    },
    /// Mean sentence BLEU on the development set at a checkpoint.
    DevEval {
        step: u64,
        bleu: f64,
        best: bool,
    },
}

/// Batch means of the loss terms for one update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub mu_t: f64,
    pub anchor: f64,
    pub rounding_nll: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub self_conditioned: bool,
    pub schedule_update: Option<(usize, Vec<usize>)>,
}

/// Training text pairs and vocabulary for a config.
pub fn load_corpus(config: &RunConfig) -> Result<(Vocabulary, Vec<TextPair>)> {
    if let Some(spec) = config.synth_spec() {
        return Ok((synth_vocab(spec.symbols)?, synth_corpus(spec)?));
    }
    let path = config.train_path.as_ref().ok_or_else(|| Error::Config("train_path is not set".into()))?;
    let pairs = read_tsv(RunConfig::resolve(path))?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} has no pairs", path.display())));
    }
    let vocab = Vocabulary::build(pairs.iter().flat_map(|p| [&p.source, &p.target]), config.tokenizer)?;
    Ok((vocab, pairs))
}

pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub ledger: LossLedger,
    pub adam: Adam<f32>,
    pub step: u64,
    pub execution: Execution,
    corpus: Vec<ParallelPair>,
    batcher: Batcher,
    dev: Vec<TextPair>,
    best_dev: Option<f64>,
}

impl Trainer {
    /// Fresh model with the square-root schedule. Corpus and config errors
    /// surface here, before any step runs.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (vocab, pairs) = load_corpus(&config)?;
        let model = Denoiser::new(
            config.denoiser_config(vocab.len()),
            &mut rng::stream(&[rng::DOMAIN_INIT, config.seed]),
        )?;
        let schedule = NoiseSchedule::sqrt_init(config.diffusion_steps, config.max_target, SQRT_S0)?;
        let ledger = LossLedger::new(config.diffusion_steps, config.max_target, config.ledger_decay)?;
        let adam = Adam::new(lr_schedule(&config), &model.params);
        Self::assemble(config, vocab, pairs, model, schedule, ledger, adam, 0)
    }

    /// Continues the run saved in `ckpt`. `config` must have the same digest.
    pub fn resume(ckpt: Checkpoint, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let digest = config.digest();
        if digest != ckpt.digest {
            return Err(Error::Config(format!(
                "config digest {digest} does not match checkpoint digest {}",
                ckpt.digest
            )));
        }
        let (_, pairs) = load_corpus(&config)?;
        let model = model_from_checkpoint(&ckpt)?;
        let adam = Adam::from_state(lr_schedule(&config), ckpt.adam_step, ckpt.adam_first, ckpt.adam_second)?;
        Self::assemble(config, ckpt.vocab, pairs, model, ckpt.schedule, ckpt.ledger, adam, ckpt.step)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        vocab: Vocabulary,
        pairs: Vec<TextPair>,
        model: Denoiser<f32>,
        schedule: NoiseSchedule,
        ledger: LossLedger,
        adam: Adam<f32>,
        step: u64,
    ) -> Result<Self> {
        let framing = config.framing();
        let corpus = pairs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                encode_pair(&p.source, &p.target, &vocab, framing).map_err(|e| Error::Data(format!("pair {}: {e}", k + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let batcher = Batcher::new(corpus.len(), config.batch_size, config.seed)?;
        let dev = match &config.dev_path {
            Some(p) => read_tsv(RunConfig::resolve(p))?,
            None => Vec::new(),
        };
        Ok(Self {
            config,
            vocab,
            model,
            schedule,
            ledger,
            adam,
            step,
            execution: Execution::default(),
            corpus,
            batcher,
            dev,
            best_dev: None,
        })
    }

    pub fn corpus(&self) -> &[ParallelPair] {
        &self.corpus
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.max_steps
    }

    fn example(&self, step: u64, j: usize, pair: &ParallelPair, self_condition: bool) -> Result<(Vec<Option<Tensor<f32>>>, LossBreakdown)> {
        let mut rng = rng::stream(&[rng::DOMAIN_EXAMPLE, self.config.seed, step, j as u64]);
        let mut drop_rng = rng::stream(&[rng::DOMAIN_EXAMPLE, self.config.seed, step, j as u64, 1]);
        let mut g = Graph::new();
        let dropout = if self.config.dropout > 0.0 {
            Dropout::new(self.config.dropout, &mut drop_rng)
        } else {
            Dropout::off()
        };
        let mut net = BoundDenoiser::new(&self.model, &mut g, dropout);
        let (loss, breakdown) = training_loss(&mut g, &mut net, pair, &self.schedule, self_condition, &mut rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let grads = g.backward(loss)?.param_grads(self.model.params.len());
        Ok((grads, breakdown))
    }

    /// One optimizer update on the batch for the current step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.finished() {
            return Err(Error::InvalidArgument(format!("already at max_steps {}", self.config.max_steps)));
        }
        let s = self.step;
        let indices = self.batcher.batch_for_step(s);
        let self_condition =
            self.config.self_conditioning && rng::stream(&[rng::DOMAIN_STEP, self.config.seed, s]).random::<bool>();
        let this = &*self;
        let results = self.execution.map(indices.len(), |j| {
            this.example(s, j, &this.corpus[indices[j]], self_condition)
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let count = self.model.params.len();
        let mut grads: Vec<Option<Tensor<f32>>> = (0..count).map(|_| None).collect();
        for (example, _) in &results {
            for (acc, g) in grads.iter_mut().zip(example) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(g),
                    (None, Some(g)) => *acc = Some(g.clone()),
                    _ => {}
                }
            }
        }
        let scale = 1.0 / results.len() as f32;
        for (k, g) in grads.iter_mut().enumerate() {
            match g {
                Some(g) => g.data_mut().iter_mut().for_each(|v| *v *= scale),
                None => *g = Some(Tensor::zeros(self.model.params[k].shape())),
            }
        }
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, 0.0),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let lr = self.adam.step(&mut self.model.params, &grads)?;

        let b = results.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| results.iter().map(|(_, r)| f(r)).sum::<f64>() / b;
        for (_, r) in &results {
            self.ledger.record_row(r.t, &r.position_mse, &r.pad_mask);
            self.ledger.record_row(1, &r.anchor_position_mse, &r.pad_mask);
        }
        self.step = s + 1;
        let mut schedule_update = None;
        // Never on the final step.
        if self.config.adaptive_schedule
            && self.step % self.config.schedule_update_every == 0
            && self.step < self.config.max_steps
        {
            let (next, report) = adapt(&self.schedule, &self.ledger, self.config.schedule_stride, self.config.min_coverage)?;
            self.schedule = next;
            schedule_update = Some((report.updated.len(), report.skipped));
        }
        Ok(StepReport {
            step: self.step,
            total: mean(|r| r.total),
            mse: mean(|r| r.mse),
            mu_t: mean(|r| r.mu_t),
            anchor: mean(|r| r.anchor),
            rounding_nll: mean(|r| r.rounding_nll),
            lr,
            grad_norm,
            self_conditioned: self_condition,
            schedule_update,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.adam.moments();
        Checkpoint {
            config: self.config.clone(),
            digest: self.config.digest(),
            vocab: self.vocab.clone(),
            step: self.step,
            param_names: self.model.param_names().to_vec(),
            params: self.model.params.clone(),
            adam_step: self.adam.step_count(),
            adam_first: m.to_vec(),
            adam_second: v.to_vec(),
            schedule: self.schedule.clone(),
            ledger: self.ledger.clone(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        RunConfig::resolve(&self.config.out_dir).join("checkpoint.bin")
    }

    /// Copy of the checkpoint with the best development BLEU so far.
    pub fn best_checkpoint_path(&self) -> PathBuf {
        RunConfig::resolve(&self.config.out_dir).join("best.bin")
    }

    /// Mean sentence BLEU of the current model on the development pairs.
    /// Inputs that fail to generate score zero.
    pub fn dev_bleu(&self) -> Result<f64> {
        if self.dev.is_empty() {
            return Err(Error::Data("no development set configured".into()));
        }
        let sources: Vec<String> = self.dev.iter().map(|p| p.source.clone()).collect();
        let hyps: Vec<String> = translate(
            &self.model,
            &self.schedule,
            &self.vocab,
            &sources,
            &self.config.sample_config(),
            self.config.truncate,
            self.execution,
        )
        .into_iter()
        .map(|r| r.map(|t| t.best().text.clone()).unwrap_or_default())
        .collect();
        let refs: Vec<String> = self.dev.iter().map(|p| p.target.clone()).collect();
        Ok(evaluate(&hyps, &refs, self.config.tokenizer)?.bleu)
    }

    /// Trains until `max_steps` or `stop_at`, whichever comes first, writing
    /// JSONL events to `log`. The checkpoint is replaced only after a
    /// successful step, so a numeric failure leaves the last good one.
    pub fn run(&mut self, log: &mut impl Write, stop_at: Option<u64>) -> Result<Vec<StepReport>> {
        let end = stop_at.unwrap_or(u64::MAX).min(self.config.max_steps);
        let path = self.checkpoint_path();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut reports = Vec::new();
        while self.step < end {
            let r = self.train_step()?;
            if r.step % self.config.log_every == 0 || r.step == end {
                emit(log, &LogEvent::Step {
                    step: r.step,
                    total: r.total,
                    mse: r.mse,
                    mu_t: r.mu_t,
                    anchor: r.anchor,
                    rounding_nll: r.rounding_nll,
                    lr: r.lr,
                    grad_norm: r.grad_norm,
                    self_conditioned: r.self_conditioned,
                })?;
            }
            if let Some((updated, skipped)) = &r.schedule_update {
                emit(log, &LogEvent::ScheduleUpdate {
                    step: r.step,
                    updated: *updated,
                    skipped: skipped.clone(),
                })?;
            }
            if r.step % self.config.checkpoint_every == 0 || r.step == end {
                let ckpt = self.checkpoint();
                ckpt.save(&path)?;
                emit(log, &LogEvent::Checkpoint {
                    step: r.step,
                    path: path.display().to_string(),
                })?;
                if !self.dev.is_empty() {
                    let bleu = self.dev_bleu()?;
                    let best = self.best_dev.is_none_or(|b| bleu > b);
                    if best {
                        self.best_dev = Some(bleu);
                        ckpt.save(&self.best_checkpoint_path())?;
                    }
                    emit(log, &LogEvent::DevEval { step: r.step, bleu, best })?;
                }
            }
            reports.push(r);
        }
        Ok(reports)
    }
}

fn emit(log: &mut impl Write, event: &LogEvent) -> Result<()> {
    serde_json::to_writer(&mut *log, event)?;
    log.write_all(b"\n")?;
    Ok(())
}

fn lr_schedule(config: &RunConfig) -> LrSchedule {
    LrSchedule {
        base: config.learning_rate,
        warmup: config.warmup_steps,
        total: config.max_steps,
    }
}

/// Rebuilds the denoiser stored in a checkpoint, checking parameter names.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Denoiser<f32>> {
    let model = Denoiser::from_params(ckpt.config.denoiser_config(ckpt.vocab.len()), ckpt.params.clone())?;
    if model.param_names() != ckpt.param_names.as_slice() {
        return Err(Error::Format("checkpoint parameter names do not match the model layout".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthTask;

    fn tiny() -> RunConfig {
        RunConfig {
            task: Some(SynthTask::Copy),
            synth_size: 40,
            synth_symbols: 6,
            synth_min_len: 2,
            synth_max_len: 4,
            max_source: 6,
            max_target: 6,
            embed_dim: 4,
            hidden: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            diffusion_steps: 20,
            batch_size: 4,
            max_steps: 12,
            warmup_steps: 2,
            learning_rate: 1e-2,
            schedule_update_every: 5,
            schedule_stride: 2,
            min_coverage: 0.0,
            checkpoint_every: 4,
            out_dir: std::env::temp_dir().join(format!("seqdiff-train-{}", std::process::id())),
            ..RunConfig::default()
        }
    }

    #[test]
    fn no_schedule_update_on_the_final_step() {
        let mut c = tiny();
        c.max_steps = 10;
        let mut t = Trainer::new(c).unwrap();
        let updates: Vec<u64> = t
            .run(&mut Vec::new(), None)
            .unwrap()
            .into_iter()
            .filter(|r| r.schedule_update.is_some())
            .map(|r| r.step)
            .collect();
        assert_eq!(updates, vec![5]);
    }

    #[test]
    fn schedule_updates_follow_cadence() {
        let mut t = Trainer::new(tiny()).unwrap();
        let mut log = Vec::new();
        let reports = t.run(&mut log, None).unwrap();
        assert_eq!(reports.len(), 12);
        let text = String::from_utf8(log).unwrap();
        let events: Vec<LogEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let updates: Vec<u64> = events
            .iter()
            .filter_map(|e| match e {
                LogEvent::ScheduleUpdate { step, .. } => Some(*step),
                _ => None,
            })
            .collect();
        assert_eq!(updates, vec![5, 10]);
        let ckpts = events.iter().filter(|e| matches!(e, LogEvent::Checkpoint { .. })).count();
        assert_eq!(ckpts, 3);
        t.schedule.validate().unwrap();
    }

    #[test]
    fn resume_continues_identically() {
        let mut config = tiny();
        config.out_dir = config.out_dir.join("resume");
        let mut full = Trainer::new(config.clone()).unwrap();
        let whole = full.run(&mut std::io::sink(), None).unwrap();
        let mut first = Trainer::new(config.clone()).unwrap();
        first.run(&mut std::io::sink(), Some(7)).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.to_bytes(), bytes);
        let mut second = Trainer::resume(ckpt, config.clone()).unwrap();
        let rest = second.run(&mut std::io::sink(), None).unwrap();
        assert_eq!(&whole[7..], rest.as_slice());
        assert_eq!(full.checkpoint().to_bytes(), second.checkpoint().to_bytes());

        let mut other = config;
        other.seed = 9;
        assert!(matches!(Trainer::resume(first.checkpoint(), other), Err(Error::Config(_))));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut a = Trainer::new(tiny()).unwrap();
        let mut b = Trainer::new(tiny()).unwrap();
        a.execution = Execution::Sequential;
        b.execution = Execution::Parallel;
        for _ in 0..3 {
            assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
        }
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn dev_set_selects_best_checkpoint() {
        let mut config = tiny();
        config.out_dir = config.out_dir.join("dev");
        let dev_file = std::env::temp_dir().join(format!("seqdiff-dev-{}.tsv", std::process::id()));
        std::fs::write(&dev_file, "a b\ta b\nc\tc\n").unwrap();
        config.dev_path = Some(dev_file);
        let mut t = Trainer::new(config).unwrap();
        let mut log = Vec::new();
        t.run(&mut log, None).unwrap();
        let text = String::from_utf8(log).unwrap();
        let evals: Vec<LogEvent> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .filter(|e| matches!(e, LogEvent::DevEval { .. }))
            .collect();
        assert_eq!(evals.len(), 3);
        assert!(matches!(evals[0], LogEvent::DevEval { best: true, .. }));
        assert!(t.best_checkpoint_path().exists());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let t = Trainer::new(tiny()).unwrap();
        let bytes = t.checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, t.checkpoint());
        let m = model_from_checkpoint(&back).unwrap();
        assert_eq!(m.params, t.model.params);
    }
}
