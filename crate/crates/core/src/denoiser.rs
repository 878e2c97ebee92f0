//! Encoder-decoder transformer predicting the clean embedding sequence from a
//! noisy latent, a self-conditioning estimate, the source, and the time step.
//!
//! Blocks are pre-norm. The encoder reads source tokens through the shared
//! embedding table. The decoder projects `[z_t ; ẑ_0]` (width `2d`) to the
//! model width, adds learned positions and a time embedding, and attends to
//! every latent position (no causal mask) and to the non-pad source memory.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab: usize,
    /// Embedding width `d`.
    pub embed_dim: usize,
    /// Transformer width `h`.
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_source: usize,
    /// Output length `n`.
    pub max_target: usize,
    /// Diffusion steps `T`, used to normalize the time input.
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("max_source", self.max_source),
            ("max_target", self.max_target),
            ("steps", self.steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config("hidden width must be even for the time embedding".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    norm: Norm,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    cross_attn: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    enc_in: Linear,
    enc_pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    dec_in: Linear,
    dec_pos: usize,
    time: Linear,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Spec {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_std(name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    fn linear_std(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Linear {
        Linear {
            w: self.push(format!("{name}.w"), vec![fan_in, fan_out], Init::Normal(std)),
            b: self.push(format!("{name}.b"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.push(format!("{name}.gain"), vec![width], Init::Ones),
            b: self.push(format!("{name}.bias"), vec![width], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, h: usize) -> Attention {
        Attention {
            norm: self.norm(&format!("{name}.norm"), h),
            q: self.linear(&format!("{name}.q"), h, h),
            k: self.linear(&format!("{name}.k"), h, h),
            v: self.linear(&format!("{name}.v"), h, h),
            o: self.linear(&format!("{name}.o"), h, h),
        }
    }

    fn ffn(&mut self, name: &str, h: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.norm"), h),
            up: self.linear(&format!("{name}.up"), h, 4 * h),
            down: self.linear(&format!("{name}.down"), 4 * h, h),
        }
    }
}

fn build_layout(c: &DenoiserConfig) -> (Layout, Spec) {
    let (d, h) = (c.embed_dim, c.hidden);
    let mut s = Spec {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let embedding = s.push("embedding".into(), vec![c.vocab, d], Init::Normal(1.0));
    let enc_in = s.linear("encoder.input", d, h);
    let enc_pos = s.push("encoder.position".into(), vec![c.max_source, h], Init::Normal(0.1));
    let encoder = (0..c.encoder_layers)
        .map(|l| EncoderLayer {
            attn: s.attention(&format!("encoder.{l}.attn"), h),
            ffn: s.ffn(&format!("encoder.{l}.ffn"), h),
        })
        .collect();
    let enc_norm = s.norm("encoder.norm", h);
    let dec_in = s.linear("decoder.input", 2 * d, h);
    let dec_pos = s.push("decoder.position".into(), vec![c.max_target, h], Init::Normal(0.1));
    let time = s.linear("decoder.time", h, h);
    let decoder = (0..c.decoder_layers)
        .map(|l| DecoderLayer {
            self_attn: s.attention(&format!("decoder.{l}.self"), h),
            cross_attn: s.attention(&format!("decoder.{l}.cross"), h),
            ffn: s.ffn(&format!("decoder.{l}.ffn"), h),
        })
        .collect();
    let dec_norm = s.norm("decoder.norm", h);
    let out = s.linear_std("decoder.output", h, d, 1e-3);
    let layout = Layout {
        embedding,
        enc_in,
        enc_pos,
        encoder,
        enc_norm,
        dec_in,
        dec_pos,
        time,
        decoder,
        dec_norm,
        out,
    };
    (layout, s)
}

/// Sinusoidal features of `t/T`, one row of width `h`.
pub fn time_features<T: Scalar>(t: usize, steps: usize, width: usize) -> Tensor<T> {
    let x = 1000.0 * t as f64 / steps as f64;
    let half = width / 2;
    Tensor::from_fn(&[1, width], |j| {
        let k = j % half;
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        let v = if j < half { (x * freq).sin() } else { (x * freq).cos() };
        T::from_f64c(v)
    })
}

/// Source-side encoder output, reused for every reverse step.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMemory<T> {
    pub states: Tensor<T>,
    /// `true` at source padding positions.
    pub pad_mask: Vec<bool>,
}

/// Inverted dropout state threaded through a forward pass.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, *rng),
            _ => Ok(x),
        }
    }
}

/// The denoising network and its parameters.
pub struct Denoiser<T> {
    config: DenoiserConfig,
    pub params: Vec<Tensor<T>>,
    names: Vec<String>,
    layout: Layout,
    encoder_calls: AtomicU64,
}

impl<T: Scalar> Clone for Denoiser<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            encoder_calls: AtomicU64::new(self.encoder_calls()),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Denoiser<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (layout, spec) = build_layout(&config);
        let params = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(shape, init)| match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(shape, |_| T::from_f64c(dist.sample(rng)))
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            names: spec.names,
            layout,
            encoder_calls: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: DenoiserConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, spec) = build_layout(&config);
        if params.len() != spec.shapes.len() {
            return Err(Error::Format(format!(
                "expected {} parameter blocks, found {}",
                spec.shapes.len(),
                params.len()
            )));
        }
        for ((p, shape), name) in params.iter().zip(&spec.shapes).zip(&spec.names) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            names: spec.names,
            layout,
            encoder_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn embedding_index(&self) -> usize {
        self.layout.embedding
    }

    /// The word-embedding table `g_φ` (`V × d`).
    pub fn embedding(&self) -> &Tensor<T> {
        &self.params[self.layout.embedding]
    }

    /// Number of encoder forward passes run so far.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config,
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            encoder_calls: AtomicU64::new(0),
        }
    }

    /// Places every parameter on `g`, returning one var per parameter.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().enumerate().map(|(i, p)| g.param(p, i)).collect()
    }

    fn linear(g: &mut Graph<T>, p: &[Var], l: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[l.w])?;
        g.add_row(y, p[l.b])
    }

    fn norm(g: &mut Graph<T>, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, p[n.g], p[n.b], T::from_f64c(LN_EPS))
    }

    fn attention(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        a: Attention,
        x: Var,
        kv: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.hidden / heads;
        let q = Self::linear(g, p, a.q, x)?;
        let k = Self::linear(g, p, a.k, kv)?;
        let v = Self::linear(g, p, a.v, kv)?;
        let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, hd * dh, dh)?,
                    g.slice_cols(k, hd * dh, dh)?,
                    g.slice_cols(v, hd * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(mask) = key_mask {
                scores = g.masked_fill(scores, mask, T::from_f64c(MASK_FILL))?;
            }
            let att = g.softmax(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Self::linear(g, p, a.o, joined)
    }

    fn feed_forward(g: &mut Graph<T>, p: &[Var], f: FeedForward, x: Var) -> Result<Var> {
        let hidden = Self::linear(g, p, f.up, x)?;
        let hidden = g.gelu(hidden)?;
        Self::linear(g, p, f.down, hidden)
    }

    fn positions(g: &mut Graph<T>, table: Var, count: usize) -> Result<Var> {
        let ids: Vec<usize> = (0..count).collect();
        g.gather(table, &ids)
    }

    /// Encoder forward on the tape; returns the `m × h` memory.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &[Var], source: &TokenSequence, drop: &mut Dropout) -> Result<Var> {
        let m = source.len();
        if m == 0 || m > self.config.max_source {
            return Err(Error::Data(format!(
                "source length {m} outside 1..={}",
                self.config.max_source
            )));
        }
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let l = &self.layout;
        let mask = source.pad_mask();
        let tokens = g.gather(p[l.embedding], &source.ids_usize())?;
        let x = Self::linear(g, p, l.enc_in, tokens)?;
        let pos = Self::positions(g, p[l.enc_pos], m)?;
        let mut x = g.add(x, pos)?;
        for layer in &l.encoder {
            let h = Self::norm(g, p, layer.attn.norm, x)?;
            let a = self.attention(g, p, layer.attn, h, h, Some(&mask))?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, p, layer.ffn.norm, x)?;
            let f = Self::feed_forward(g, p, layer.ffn, h)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        Self::norm(g, p, l.enc_norm, x)
    }

    /// Decoder forward on the tape; returns the `n × d` clean-sequence estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        z_t: Var,
        self_cond: Var,
        memory: Var,
        memory_mask: &[bool],
        t: usize,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let c = &self.config;
        let (n, d) = (c.max_target, c.embed_dim);
        for v in [z_t, self_cond] {
            if g.value(v).shape() != [n, d] {
                return Err(Error::shape("denoise", g.value(v).shape(), &[n, d]));
            }
        }
        if t == 0 || t > c.steps {
            return Err(Error::InvalidArgument(format!("time step {t} outside 1..={}", c.steps)));
        }
        let l = &self.layout;
        let input = g.concat_cols(&[z_t, self_cond])?;
        let x = Self::linear(g, p, l.dec_in, input)?;
        let pos = Self::positions(g, p[l.dec_pos], n)?;
        let x = g.add(x, pos)?;
        let feats = g.constant(time_features(t, c.steps, c.hidden));
        let temb = Self::linear(g, p, l.time, feats)?;
        let mut x = g.add_row(x, temb)?;
        for layer in &l.decoder {
            let h = Self::norm(g, p, layer.self_attn.norm, x)?;
            let a = self.attention(g, p, layer.self_attn, h, h, None)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, p, layer.cross_attn.norm, x)?;
            let a = self.attention(g, p, layer.cross_attn, h, memory, Some(memory_mask))?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, p, layer.ffn.norm, x)?;
            let f = Self::feed_forward(g, p, layer.ffn, h)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        let x = Self::norm(g, p, l.dec_norm, x)?;
        Self::linear(g, p, l.out, x)
    }

    /// Runs the encoder once without recording gradients.
    pub fn encode(&self, source: &TokenSequence) -> Result<EncoderMemory<T>> {
        let mut g = Graph::no_grad();
        let p = self.bind(&mut g);
        let out = self.encode_graph(&mut g, &p, source, &mut Dropout::off())?;
        Ok(EncoderMemory {
            states: g.value(out).clone(),
            pad_mask: source.pad_mask(),
        })
    }

    /// Clean-sequence estimate without recording gradients.
    pub fn denoise(&self, z_t: &Tensor<T>, self_cond: &Tensor<T>, memory: &EncoderMemory<T>, t: usize) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let p = self.bind(&mut g);
        let z = g.constant(z_t.clone());
        let s = g.constant(self_cond.clone());
        let m = g.constant(memory.states.clone());
        let out = self.decode_graph(&mut g, &p, z, s, m, &memory.pad_mask, t, &mut Dropout::off())?;
        Ok(g.value(out).clone())
    }
}
