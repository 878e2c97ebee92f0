//! Run configuration: a flat JSON object with `key=value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{Framing, SynthSpec, SynthTask, Tokenizer};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::inference::{RoundFrom, SampleConfig};

/// Environment variable naming the base directory for relative data paths.
pub const DATA_DIR_ENV: &str = "SEQDIFF_DATA_DIR";

/// Keys that name files rather than affect results; excluded from the digest.
const PATH_KEYS: [&str; 3] = ["train_path", "dev_path", "out_dir"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic task generated in memory instead of reading `train_path`.
    pub task: Option<SynthTask>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub synth_size: usize,
    pub synth_symbols: usize,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub synth_seed: u64,

    pub tokenizer: Tokenizer,
    pub truncate: bool,
    pub max_source: usize,
    pub max_target: usize,

    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,

    pub diffusion_steps: usize,
    pub adaptive_schedule: bool,
    pub schedule_update_every: u64,
    pub schedule_stride: usize,
    pub ledger_decay: f64,
    pub min_coverage: f64,
    pub self_conditioning: bool,

    pub batch_size: usize,
    pub max_steps: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,

    pub clamp: bool,
    pub prior_p1: f64,
    pub prior_p2: f64,
    pub mbr_candidates: usize,
    pub sample_seed: u64,
    pub round_from_latent: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            train_path: None,
            dev_path: None,
            out_dir: PathBuf::from("run"),
            synth_size: 2000,
            synth_symbols: 16,
            synth_min_len: 4,
            synth_max_len: 12,
            synth_seed: 0,
            tokenizer: Tokenizer::Whitespace,
            truncate: false,
            max_source: 128,
            max_target: 64,
            embed_dim: 16,
            hidden: 32,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.0,
            diffusion_steps: 2000,
            adaptive_schedule: true,
            schedule_update_every: 20_000,
            schedule_stride: 20,
            ledger_decay: 0.99,
            min_coverage: 0.5,
            self_conditioning: true,
            batch_size: 128,
            max_steps: 100_000,
            learning_rate: 1e-4,
            warmup_steps: 10_000,
            grad_clip: None,
            checkpoint_every: 10_000,
            log_every: 1,
            seed: 0,
            clamp: false,
            prior_p1: 0.0,
            prior_p2: 0.0,
            mbr_candidates: 1,
            sample_seed: 0,
            round_from_latent: false,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

impl RunConfig {
    /// Parses a JSON object, applies `key=value` overrides, and validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        apply_overrides(&mut map, overrides)?;
        let config: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.task.is_none() && self.train_path.is_none() {
            return fail("either task or train_path must be set".into());
        }
        if self.max_target < 2 || self.max_source < 1 {
            return fail("max_target must be at least 2 and max_source at least 1".into());
        }
        if self.diffusion_steps < 2 {
            return fail("diffusion_steps must be at least 2".into());
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return fail("batch_size and max_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.ledger_decay) {
            return fail(format!("ledger_decay must be in [0, 1), got {}", self.ledger_decay));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return fail(format!("min_coverage must be in [0, 1], got {}", self.min_coverage));
        }
        if self.schedule_update_every == 0 || self.schedule_stride == 0 {
            return fail("schedule_update_every and schedule_stride must be positive".into());
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return fail("checkpoint_every and log_every must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.task.is_some() && (self.synth_size == 0 || self.synth_min_len == 0 || self.synth_min_len > self.synth_max_len) {
            return fail("synthetic corpus needs synth_size ≥ 1 and 1 ≤ synth_min_len ≤ synth_max_len".into());
        }
        self.sample_config().validate()?;
        self.denoiser_config(1).validate()
    }

    pub fn denoiser_config(&self, vocab: usize) -> DenoiserConfig {
        DenoiserConfig {
            vocab,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            max_source: self.max_source,
            max_target: self.max_target,
            steps: self.diffusion_steps,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            seed: self.sample_seed,
            self_conditioning: self.self_conditioning,
            clamp: self.clamp,
            prior_p1: self.prior_p1,
            prior_p2: self.prior_p2,
            mbr_candidates: self.mbr_candidates,
            round_from: if self.round_from_latent {
                RoundFrom::Latent
            } else {
                RoundFrom::Estimate
            },
            trace: false,
        }
    }

    pub fn framing(&self) -> Framing {
        Framing {
            max_source: self.max_source,
            max_target: self.max_target,
            truncate: self.truncate,
        }
    }

    pub fn synth_spec(&self) -> Option<SynthSpec> {
        self.task.map(|task| SynthSpec {
            task,
            size: self.synth_size,
            seed: self.synth_seed,
            symbols: self.synth_symbols,
            min_len: self.synth_min_len,
            max_len: self.synth_max_len,
        })
    }

    /// SHA-256 over every non-path field, as lowercase hex.
    pub fn digest(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is an object")
        };
        let sorted: BTreeMap<String, Value> = map.into_iter().filter(|(k, _)| !PATH_KEYS.contains(&k.as_str())).collect();
        let bytes = serde_json::to_vec(&sorted).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Resolves a relative path against `SEQDIFF_DATA_DIR` when it is set.
    pub fn resolve(path: &Path) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(base) if path.is_relative() => PathBuf::from(base).join(path),
            _ => path.to_path_buf(),
        }
    }
}

/// Applies `key=value` overrides; values are parsed as JSON, falling back to strings.
pub fn apply_overrides(map: &mut Map<String, Value>, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            return Err(Error::Config(format!("override {item:?} is not key=value")));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("override {item:?} has an empty key")));
        }
        map.insert(key.to_owned(), parse_value(raw.trim()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::from_json_with_overrides(
            r#"{"task": "copy", "batch_size": 8}"#,
            &["max_steps=300".into(), "task=reverse".into(), "grad_clip=1.5".into()],
        )
        .unwrap();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.max_steps, 300);
        assert_eq!(c.task, Some(SynthTask::Reverse));
        assert_eq!(c.grad_clip, Some(1.5));
        let err = RunConfig::from_json_with_overrides(r#"{"task": "copy", "batch_sise": 8}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        assert!(RunConfig::from_json_with_overrides(r#"{"task": "copy"}"#, &["nokey".into()]).is_err());
    }

    #[test]
    fn ranges_are_enforced() {
        for bad in [r#"{"task":"copy","dropout":1.0}"#, r#"{"task":"copy","heads":3}"#, r#"{}"#, r#"{"task":"copy","prior_p1":2}"#] {
            assert!(RunConfig::from_json_with_overrides(bad, &[]).is_err(), "{bad}");
        }
    }

    #[test]
    fn defaults_follow_paper_scale_training_setup() {
        let c = RunConfig::default();
        assert_eq!(c.diffusion_steps, 2000);
        assert_eq!(c.schedule_stride, 20);
        assert_eq!(c.schedule_update_every, 20_000);
        assert_eq!(c.warmup_steps, 10_000);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!((c.max_source, c.max_target), (128, 64));
    }

    #[test]
    fn digest_ignores_paths() {
        let a = RunConfig {
            task: Some(SynthTask::Copy),
            ..RunConfig::default()
        };
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
