//! Vocabulary, sequence framing, synthetic parallel corpora and batching.
//!
//! Target sequences are framed as `[CLS] body [SEP] [PAD]…` to exactly `n`
//! ids. Source sequences are `body [SEP]` padded with `[PAD]`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIALS.len()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    Character,
}

impl Tokenizer {
    /// Lowercases, then splits into tokens.
    pub fn tokenize(self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        match self {
            Tokenizer::Whitespace => lower.split_whitespace().map(str::to_owned).collect(),
            Tokenizer::Character => lower
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }

    pub fn join(self, tokens: &[&str]) -> String {
        match self {
            Tokenizer::Whitespace => tokens.join(" "),
            Tokenizer::Character => tokens.concat(),
        }
    }
}

/// Token ↔ id bijection with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    tokenizer: Tokenizer,
}

impl Vocabulary {
    /// Builds a vocabulary over every token in `texts`, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<S: AsRef<str>>(texts: impl IntoIterator<Item = S>, tokenizer: Tokenizer) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for tok in tokenizer.tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any || counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens, tokenizer)
    }

    pub fn from_tokens(tokens: Vec<String>, tokenizer: Tokenizer) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) && tokenizer == Tokenizer::Whitespace {
                return Err(Error::Data(format!("invalid vocabulary entry {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            tokenizer,
        })
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, tokenizer: Tokenizer) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect(), tokenizer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, tokenizer: Tokenizer) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, tokenizer)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenizer.tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins the non-special tokens of `ids`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| !is_special(i))
            .filter_map(|&i| self.token(i))
            .collect();
        self.tokenizer.join(&toks)
    }

    /// Body of a generated target: skips a leading `[CLS]`, stops at the first
    /// `[SEP]`, and drops any other specials.
    pub fn decode_target(&self, ids: &[u32]) -> String {
        self.decode(&target_body(ids))
    }
}

/// Body ids of a target sequence, see [`Vocabulary::decode_target`].
pub fn target_body(ids: &[u32]) -> Vec<u32> {
    let start = usize::from(ids.first() == Some(&CLS));
    ids[start..]
        .iter()
        .take_while(|&&i| i != SEP)
        .copied()
        .filter(|&i| !is_special(i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of ids before padding.
    pub true_length: usize,
    pub role: Role,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` at padding positions.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i >= self.true_length).collect()
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: TokenSequence,
    pub target: TokenSequence,
}

/// Sequence limits and over-length policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub max_source: usize,
    pub max_target: usize,
    pub truncate: bool,
}

impl Default for Framing {
    fn default() -> Self {
        Self {
            max_source: 128,
            max_target: 64,
            truncate: false,
        }
    }
}

fn fit_body(mut body: Vec<u32>, room: usize, truncate: bool, what: &str, limit: usize) -> Result<Vec<u32>> {
    if body.len() > room {
        if !truncate {
            return Err(Error::Data(format!(
                "{what} has {} tokens but at most {room} fit in length {limit} with special tokens",
                body.len()
            )));
        }
        body.truncate(room);
    }
    Ok(body)
}

/// `body [SEP] [PAD]…` padded to `max_len`.
pub fn encode_source(text: &str, vocab: &Vocabulary, max_len: usize, truncate: bool) -> Result<TokenSequence> {
    if max_len < 1 {
        return Err(Error::InvalidArgument("source length must be at least 1".into()));
    }
    let mut ids = fit_body(vocab.encode(text), max_len - 1, truncate, "source", max_len)?;
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence {
        ids,
        true_length,
        role: Role::Source,
    })
}

/// `[CLS] body [SEP] [PAD]…` with exactly `n` ids.
pub fn encode_target(text: &str, vocab: &Vocabulary, n: usize, truncate: bool) -> Result<TokenSequence> {
    if n < 2 {
        return Err(Error::InvalidArgument("target length must be at least 2".into()));
    }
    let body = fit_body(vocab.encode(text), n - 2, truncate, "target", n)?;
    let mut ids = Vec::with_capacity(n);
    ids.push(CLS);
    ids.extend(body);
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(n, PAD);
    Ok(TokenSequence {
        ids,
        true_length,
        role: Role::Target,
    })
}

pub fn encode_pair(source: &str, target: &str, vocab: &Vocabulary, framing: Framing) -> Result<ParallelPair> {
    Ok(ParallelPair {
        source: encode_source(source, vocab, framing.max_source, framing.truncate)?,
        target: encode_target(target, vocab, framing.max_target, framing.truncate)?,
    })
}

/// A source/target sentence pair before tokenization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub source: String,
    pub target: String,
}

/// Reads `source<TAB>target` lines. Blank lines are skipped.
pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<TextPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    parse_tsv(&text)
}

pub fn parse_tsv(text: &str) -> Result<Vec<TextPair>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((s, t)) = line.split_once('\t') else {
            return Err(Error::Data(format!("line {}: expected source<TAB>target", lineno + 1)));
        };
        out.push(TextPair {
            source: s.to_owned(),
            target: t.to_owned(),
        });
    }
    Ok(out)
}

pub fn write_tsv(path: impl AsRef<Path>, pairs: &[TextPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&p.source);
        s.push('\t');
        s.push_str(&p.target);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    Copy,
    Reverse,
    MapRule,
    /// Each source word becomes one of two target words, chosen uniformly.
    MapChoice,
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "map-rule" => Ok(Self::MapRule),
            "map-choice" => Ok(Self::MapChoice),
            other => Err(Error::InvalidArgument(format!(
                "unknown task {other:?} (expected copy, reverse, map-rule or map-choice)"
            ))),
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::MapRule => "map-rule",
            Self::MapChoice => "map-choice",
        })
    }
}

/// Synthetic corpus parameters. Sentences are drawn over `symbols` distinct
/// words with lengths uniform in `min_len..=max_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub size: usize,
    pub seed: u64,
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
}

/// Name of synthetic word `k`: letters for small alphabets.
pub fn symbol(k: usize) -> String {
    if k < 26 {
        char::from(b'a' + k as u8).to_string()
    } else {
        format!("w{k}")
    }
}

/// The fixed substitution cipher of the map-rule task: `k ↦ (a·k + 3) mod S`
/// with `a` coprime to `S`.
pub fn cipher(k: usize, symbols: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let a = [5, 7, 3, 11, 13]
        .into_iter()
        .find(|&a| gcd(a, symbols) == 1)
        .unwrap_or(1);
    (a * k + 3) % symbols
}

/// The two admissible images of `k` in the map-choice task: the cipher image
/// and the word half an alphabet away from it.
pub fn choices(k: usize, symbols: usize) -> (usize, usize) {
    let c = cipher(k, symbols);
    (c, (c + symbols / 2) % symbols)
}

pub fn synth_corpus(spec: SynthSpec) -> Result<Vec<TextPair>> {
    if spec.size == 0 {
        return Err(Error::InvalidArgument("synthetic corpus size must be at least 1".into()));
    }
    if spec.symbols == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(format!(
            "invalid synthetic corpus parameters: {} symbols, lengths {}..={}",
            spec.symbols, spec.min_len, spec.max_len
        )));
    }
    let mut rng = rng::stream(&[rng::DOMAIN_SYNTH, spec.seed]);
    let mut out = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.symbols)).collect();
        let tgt: Vec<usize> = match spec.task {
            SynthTask::Copy => src.clone(),
            SynthTask::Reverse => src.iter().rev().copied().collect(),
            SynthTask::MapRule => src.iter().map(|&k| cipher(k, spec.symbols)).collect(),
            SynthTask::MapChoice => src
                .iter()
                .map(|&k| {
                    let (a, b) = choices(k, spec.symbols);
                    if rng.random::<bool>() { a } else { b }
                })
                .collect(),
        };
        let join = |v: &[usize]| v.iter().map(|&k| symbol(k)).collect::<Vec<_>>().join(" ");
        out.push(TextPair {
            source: join(&src),
            target: join(&tgt),
        });
    }
    Ok(out)
}

/// Vocabulary containing exactly the synthetic alphabet.
pub fn synth_vocab(symbols: usize) -> Result<Vocabulary> {
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain((0..symbols).map(symbol))
        .collect();
    Vocabulary::from_tokens(tokens, Tokenizer::Whitespace)
}

/// Seeded per-epoch shuffling with random access by global step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Batcher {
    pub items: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Batcher {
    pub fn new(items: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if items == 0 {
            return Err(Error::Data("cannot batch an empty corpus".into()));
        }
        Ok(Self {
            items,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.items.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items).collect();
        order.shuffle(&mut rng::stream(&[rng::DOMAIN_SHUFFLE, self.seed, epoch]));
        order
    }

    /// Item indices of batch `index` of `epoch`.
    pub fn batch_in_epoch(&self, epoch: u64, index: usize) -> Vec<usize> {
        let order = self.epoch_order(epoch);
        let start = index * self.batch_size;
        order[start.min(self.items)..(start + self.batch_size).min(self.items)].to_vec()
    }

    /// Item indices for global training step `step` (0-based).
    pub fn batch_for_step(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        self.batch_in_epoch(step / per, (step % per) as usize)
    }
}

/// A batch of pairs with the target padding masks.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub pairs: Vec<&'a ParallelPair>,
    /// `true` at target `[PAD]` positions, one row per pair.
    pub target_pad_mask: Vec<Vec<bool>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One epoch of shuffled batches; the last batch may be partial.
pub fn batch_iter(
    corpus: &[ParallelPair],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch<'_>>> {
    let batcher = Batcher::new(corpus.len(), batch_size, seed)?;
    let order = batcher.epoch_order(epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let pairs: Vec<&ParallelPair> = idx.iter().map(|&i| &corpus[i]).collect();
        let target_pad_mask = pairs.iter().map(|p| p.target.pad_mask()).collect();
        Batch { pairs, target_pad_mask }
    }))
}
