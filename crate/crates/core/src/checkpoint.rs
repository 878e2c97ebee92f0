//! Versioned binary checkpoint: little-endian, length-prefixed named blocks.
//!
//! Layout: magic `SQDFCKPT`, `u32` version, `u32` block count, then per block
//! a `u32` name length, the UTF-8 name, a `u64` payload length and the payload.
//! Tensor payloads are a `u32` rank, `u64` dims and `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::schedule::{LossLedger, NoiseSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQDFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub digest: String,
    pub vocab: Vocabulary,
    pub step: u64,
    pub param_names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
    pub adam_step: u64,
    pub adam_first: Vec<Tensor<f32>>,
    pub adam_second: Vec<Tensor<f32>>,
    pub schedule: NoiseSchedule,
    pub ledger: LossLedger,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!("{} is truncated", self.what)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("block too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("{}: implausible rank {rank}", self.what)));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let data = self.f32s(numel)?;
        Tensor::new(shape, data)
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} has {} trailing bytes", self.what, self.bytes.len())))
        }
    }
}

fn text_block(blocks: &[(String, Vec<u8>)], name: &str) -> Result<String> {
    String::from_utf8(find(blocks, name)?.to_vec()).map_err(|_| Error::Format(format!("block {name} is not UTF-8")))
}

fn find<'a>(blocks: &'a [(String, Vec<u8>)], name: &str) -> Result<&'a [u8]> {
    blocks
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| b.as_slice())
        .ok_or_else(|| Error::Format(format!("checkpoint lacks block {name}")))
}

fn tensors(blocks: &[(String, Vec<u8>)], name: &str) -> Result<Vec<Tensor<f32>>> {
    let mut c = Cursor {
        bytes: find(blocks, name)?,
        what: name,
    };
    let count = c.u64()? as usize;
    let out = (0..count).map(|_| c.tensor()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    Ok(out)
}

fn u64_block(blocks: &[(String, Vec<u8>)], name: &str) -> Result<u64> {
    let mut c = Cursor {
        bytes: find(blocks, name)?,
        what: name,
    };
    let v = c.u64()?;
    c.finish()?;
    Ok(v)
}

impl Checkpoint {
    fn blocks(&self) -> Vec<(String, Vec<u8>)> {
        let mut blocks = vec![
            ("config".to_string(), self.config.to_json().into_bytes()),
            ("digest".to_string(), self.digest.clone().into_bytes()),
            ("vocab".to_string(), self.vocab.to_text().into_bytes()),
            ("step".to_string(), self.step.to_le_bytes().to_vec()),
        ];
        for (name, t) in self.param_names.iter().zip(&self.params) {
            let mut b = Vec::new();
            put_tensor(&mut b, t);
            blocks.push((format!("param/{name}"), b));
        }
        for (name, set) in [("adam/m", &self.adam_first), ("adam/v", &self.adam_second)] {
            let mut b = (set.len() as u64).to_le_bytes().to_vec();
            for t in set {
                put_tensor(&mut b, t);
            }
            blocks.push((name.to_string(), b));
        }
        blocks.push(("adam/step".to_string(), self.adam_step.to_le_bytes().to_vec()));
        let mut sched = Vec::new();
        crate::schedule::write_schedule(&mut sched, &self.schedule).expect("writing to memory");
        blocks.push(("schedule".to_string(), sched));
        let (mean, count) = self.ledger.raw();
        let mut ledger = Vec::new();
        for v in [self.ledger.steps() as u64, self.ledger.positions() as u64] {
            ledger.extend_from_slice(&v.to_le_bytes());
        }
        ledger.extend_from_slice(&self.ledger.decay().to_le_bytes());
        for m in mean {
            ledger.extend_from_slice(&m.to_le_bytes());
        }
        for c in count {
            ledger.extend_from_slice(&c.to_le_bytes());
        }
        blocks.push(("ledger".to_string(), ledger));
        blocks
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let blocks = self.blocks();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, payload) in &blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(payload.len() as u64).to_le_bytes())?;
            w.write_all(payload)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, what: "checkpoint" };
        if c.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = c.u32()? as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let size = c.u64()? as usize;
            blocks.push((name, c.take(size)?.to_vec()));
        }
        c.finish()?;

        let config = RunConfig::from_json_with_overrides(&text_block(&blocks, "config")?, &[])?;
        let digest = text_block(&blocks, "digest")?;
        let vocab = Vocabulary::parse(&text_block(&blocks, "vocab")?, config.tokenizer)?;
        let mut param_names = Vec::new();
        let mut params = Vec::new();
        for (name, payload) in &blocks {
            if let Some(p) = name.strip_prefix("param/") {
                let mut c = Cursor { bytes: payload, what: name };
                params.push(c.tensor()?);
                c.finish()?;
                param_names.push(p.to_string());
            }
        }
        let schedule = crate::schedule::read_schedule(&mut find(&blocks, "schedule")?)?;
        let mut lc = Cursor {
            bytes: find(&blocks, "ledger")?,
            what: "ledger",
        };
        let (steps, positions) = (lc.u64()? as usize, lc.u64()? as usize);
        let decay = f64::from_le_bytes(lc.take(8)?.try_into().expect("8 bytes"));
        let cells = steps.checked_mul(positions).ok_or_else(|| Error::Format("ledger too large".into()))?;
        let mean = lc.f64s(cells)?;
        let count = (0..cells).map(|_| lc.u64()).collect::<Result<Vec<_>>>()?;
        lc.finish()?;
        let ledger = LossLedger::from_parts(steps, positions, decay, mean, count)?;
        Ok(Self {
            config,
            digest,
            vocab,
            step: u64_block(&blocks, "step")?,
            param_names,
            params,
            adam_step: u64_block(&blocks, "adam/step")?,
            adam_first: tensors(&blocks, "adam/m")?,
            adam_second: tensors(&blocks, "adam/v")?,
            schedule,
            ledger,
        })
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes to a sibling temporary file first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
