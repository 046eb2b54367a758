//! A toy-scale hollow transformer. Two causal content streams run in
//! opposite directions over inputs shifted by one position, so the forward
//! stream at `d` sees `x^{<d}` and the backward stream sees `x^{>d}`. Both
//! streams use the same layer weights. Every `mix_every` layers a query
//! stream of width `2E` attends to `(F^{<=d}, B^{>=d})`; its final state is
//! projected to per-position logits. Output row `d` therefore never depends
//! on `x^d`.
//!
//! Conventions fixed here: pre-norm residual blocks, softmax attention,
//! feedforward width `4x`, GELU (tanh form), learned absolute positions,
//! and a dedicated padding embedding for the slots vacated by the shift.
//! All sums run in a fixed order so hollowness holds bit-for-bit.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::sequence::SequenceState;

const LN_EPS: f64 = 1e-5;
const PARAMS_MAGIC: &str = "hollow-params v1";

/// One row of activations per position.
pub type Streams = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HollowConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Number of (weight-tied) causal layers.
    pub layers: usize,
    /// A mixing layer follows every `mix_every` causal layers; a final
    /// partial block also gets one.
    pub mix_every: usize,
    pub embed: usize,
    pub heads: usize,
}

impl HollowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.max_len == 0 || self.layers == 0 || self.mix_every == 0 || self.embed == 0 || self.heads == 0 {
            return bad("max_len, layers, mix_every, embed and heads must be positive");
        }
        if !self.embed.is_multiple_of(self.heads) {
            return bad("embed must be divisible by heads");
        }
        Ok(())
    }

    pub fn n_mixers(&self) -> usize {
        self.layers.div_ceil(self.mix_every)
    }

    fn mixes_after(&self, layer: usize) -> bool {
        (layer + 1).is_multiple_of(self.mix_every) || layer + 1 == self.layers
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gain: Array2<f64>,
    bias: Array2<f64>,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        Self { gain: Array2::ones((1, width)), bias: Array2::zeros((1, width)) }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (x[i] - mean) * inv * self.gain[[0, i]] + self.bias[[0, i]];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Attention {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct FeedForward {
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct CausalBlock {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct MixBlock {
    ln_query: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Parameters and forward pass of the hollow transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct HollowNet {
    config: HollowConfig,
    /// `(S + 2) x E`: tokens, then mask, then the edge padding row.
    token_embed: Array2<f64>,
    pos_embed: Array2<f64>,
    blocks: Vec<CausalBlock>,
    mixers: Vec<MixBlock>,
    ln_out: LayerNorm,
    out_proj: Array2<f64>,
    out_bias: Array2<f64>,
}

fn affine(x: &[f64], w: &Array2<f64>, bias: Option<&Array2<f64>>, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = bias.map_or(0.0, |b| b[[0, j]]);
    }
    for (i, &xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w[[i, j]];
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

impl FeedForward {
    fn init(rng: &mut ChaCha8Rng, width: usize) -> Self {
        Self {
            w1: normal(rng, width, 4 * width, (1.0 / width as f64).sqrt()),
            b1: Array2::zeros((1, 4 * width)),
            w2: normal(rng, 4 * width, width, (1.0 / (4 * width) as f64).sqrt()),
            b2: Array2::zeros((1, width)),
        }
    }

    fn residual(&self, ln: &LayerNorm, h: &mut [f64]) {
        let mut normed = vec![0.0; h.len()];
        ln.apply(h, &mut normed);
        let mut hidden = vec![0.0; self.w1.ncols()];
        affine(&normed, &self.w1, Some(&self.b1), &mut hidden);
        hidden.iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = vec![0.0; h.len()];
        affine(&hidden, &self.w2, Some(&self.b2), &mut out);
        for (a, b) in h.iter_mut().zip(out) {
            *a += b;
        }
    }
}

impl Attention {
    fn init(rng: &mut ChaCha8Rng, in_q: usize, in_kv: usize, width: usize) -> Self {
        Self {
            wq: normal(rng, in_q, width, (1.0 / in_q as f64).sqrt()),
            wk: normal(rng, in_kv, width, (1.0 / in_kv as f64).sqrt()),
            wv: normal(rng, in_kv, width, (1.0 / in_kv as f64).sqrt()),
            wo: normal(rng, width, width, (1.0 / width as f64).sqrt()),
        }
    }

    /// Multi-head attention of one query over `keys`/`values` (already
    /// projected), returning the output projection.
    fn attend(&self, query: &[f64], keys: &[&[f64]], values: &[&[f64]], heads: usize) -> Vec<f64> {
        let width = self.wq.ncols();
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut q = vec![0.0; width];
        affine(query, &self.wq, None, &mut q);
        let mut mixed = vec![0.0; width];
        let mut weights = vec![0.0; keys.len()];
        for h in 0..heads {
            let span = h * head_dim..(h + 1) * head_dim;
            for (w, k) in weights.iter_mut().zip(keys) {
                *w = q[span.clone()].iter().zip(&k[span.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut weights);
            for (w, v) in weights.iter().zip(values) {
                for i in span.clone() {
                    mixed[i] += w * v[i];
                }
            }
        }
        let mut out = vec![0.0; width];
        affine(&mixed, &self.wo, None, &mut out);
        out
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl HollowNet {
    /// Deterministic initialization from `seed`.
    pub fn init(config: HollowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed;
        let token_embed = normal(&mut rng, config.vocab_size + 2, e, 1.0);
        let pos_embed = normal(&mut rng, config.max_len, e, 0.5);
        let blocks = (0..config.layers)
            .map(|_| CausalBlock {
                ln_attn: LayerNorm::new(e),
                attn: Attention::init(&mut rng, e, e, e),
                ln_ff: LayerNorm::new(e),
                ff: FeedForward::init(&mut rng, e),
            })
            .collect();
        let mixers = (0..config.n_mixers())
            .map(|_| MixBlock {
                ln_query: LayerNorm::new(2 * e),
                ln_kv: LayerNorm::new(e),
                attn: Attention::init(&mut rng, 2 * e, e, 2 * e),
                ln_ff: LayerNorm::new(2 * e),
                ff: FeedForward::init(&mut rng, 2 * e),
            })
            .collect();
        let out_proj = normal(&mut rng, 2 * e, config.vocab_size, (1.0 / (2 * e) as f64).sqrt());
        Ok(Self {
            config,
            token_embed,
            pos_embed,
            blocks,
            mixers,
            ln_out: LayerNorm::new(2 * e),
            out_proj,
            out_bias: Array2::zeros((1, config.vocab_size)),
        })
    }

    pub fn config(&self) -> &HollowConfig {
        &self.config
    }

    fn check_input(&self, x: &SequenceState) -> Result<()> {
        if x.spec().vocab_size != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "input vocabulary {} but network built for {}",
                x.spec().vocab_size,
                self.config.vocab_size
            )));
        }
        if x.len() > self.config.max_len {
            return Err(Error::Shape(format!("input length {} exceeds max_len {}", x.len(), self.config.max_len)));
        }
        Ok(())
    }

    fn embed_shifted(&self, x: &SequenceState, offset: isize) -> Vec<Vec<f64>> {
        let pad = self.config.vocab_size + 1;
        (0..x.len())
            .map(|d| {
                let src = d as isize + offset;
                let token = if src < 0 || src >= x.len() as isize { pad } else { x.get(src as usize) as usize };
                (0..self.config.embed).map(|i| self.token_embed[[token, i]] + self.pos_embed[[d, i]]).collect()
            })
            .collect()
    }

    /// One causal layer; `forward` attends to `<= d`, otherwise to `>= d`.
    fn causal_layer(&self, block: &CausalBlock, stream: &mut [Vec<f64>], forward: bool) {
        let len = stream.len();
        let e = self.config.embed;
        let mut normed = vec![vec![0.0; e]; len];
        let mut keys = vec![vec![0.0; e]; len];
        let mut values = vec![vec![0.0; e]; len];
        for d in 0..len {
            block.ln_attn.apply(&stream[d], &mut normed[d]);
            affine(&normed[d], &block.attn.wk, None, &mut keys[d]);
            affine(&normed[d], &block.attn.wv, None, &mut values[d]);
        }
        for d in 0..len {
            let range = if forward { 0..d + 1 } else { d..len };
            let ks: Vec<&[f64]> = keys[range.clone()].iter().map(Vec::as_slice).collect();
            let vs: Vec<&[f64]> = values[range].iter().map(Vec::as_slice).collect();
            let out = block.attn.attend(&normed[d], &ks, &vs, self.config.heads);
            for (a, b) in stream[d].iter_mut().zip(out) {
                *a += b;
            }
            block.ff.residual(&block.ln_ff, &mut stream[d]);
        }
    }

    fn mix_layer(&self, mixer: &MixBlock, mix: &mut [Vec<f64>], fwd: &[Vec<f64>], bwd: &[Vec<f64>]) {
        let len = mix.len();
        let e = self.config.embed;
        let width = 2 * e;
        let project = |stream: &[Vec<f64>]| {
            let mut ks = vec![vec![0.0; width]; len];
            let mut vs = vec![vec![0.0; width]; len];
            let mut normed = vec![0.0; e];
            for d in 0..len {
                mixer.ln_kv.apply(&stream[d], &mut normed);
                affine(&normed, &mixer.attn.wk, None, &mut ks[d]);
                affine(&normed, &mixer.attn.wv, None, &mut vs[d]);
            }
            (ks, vs)
        };
        let (fk, fv) = project(fwd);
        let (bk, bv) = project(bwd);
        let mut normed = vec![0.0; width];
        for d in 0..len {
            // query h = M^d + concat(F^d, B^d); it is also the residual base
            let mut h = mix[d].clone();
            for i in 0..e {
                h[i] += fwd[d][i];
                h[e + i] += bwd[d][i];
            }
            mixer.ln_query.apply(&h, &mut normed);
            let mut ks: Vec<&[f64]> = fk[..=d].iter().map(Vec::as_slice).collect();
            ks.extend(bk[d..].iter().map(Vec::as_slice));
            let mut vs: Vec<&[f64]> = fv[..=d].iter().map(Vec::as_slice).collect();
            vs.extend(bv[d..].iter().map(Vec::as_slice));
            let out = mixer.attn.attend(&normed, &ks, &vs, self.config.heads);
            for (a, b) in h.iter_mut().zip(out) {
                *a += b;
            }
            mixer.ff.residual(&mixer.ln_ff, &mut h);
            mix[d] = h;
        }
    }

    /// Final forward and backward content-stream states.
    pub fn content_streams(&self, x: &SequenceState) -> Result<(Streams, Streams)> {
        self.check_input(x)?;
        let mut fwd = self.embed_shifted(x, -1);
        let mut bwd = self.embed_shifted(x, 1);
        for block in &self.blocks {
            self.causal_layer(block, &mut fwd, true);
            self.causal_layer(block, &mut bwd, false);
        }
        Ok((fwd, bwd))
    }

    /// Per-position distributions over the `S` clean tokens.
    pub fn forward(&self, x: &SequenceState) -> Result<DenoiserOutput> {
        self.check_input(x)?;
        let len = x.len();
        let e = self.config.embed;
        let mut fwd = self.embed_shifted(x, -1);
        let mut bwd = self.embed_shifted(x, 1);
        let mut mix = vec![vec![0.0; 2 * e]; len];
        let mut mixers = self.mixers.iter();
        for (l, block) in self.blocks.iter().enumerate() {
            self.causal_layer(block, &mut fwd, true);
            self.causal_layer(block, &mut bwd, false);
            if self.config.mixes_after(l) {
                let mixer = mixers.next().expect("one mixer per block");
                self.mix_layer(mixer, &mut mix, &fwd, &bwd);
            }
        }
        let s = self.config.vocab_size;
        let mut probs = Array2::zeros((len, s));
        let mut normed = vec![0.0; 2 * e];
        let mut logits = vec![0.0; s];
        for d in 0..len {
            self.ln_out.apply(&mix[d], &mut normed);
            affine(&normed, &self.out_proj, Some(&self.out_bias), &mut logits);
            softmax_in_place(&mut logits);
            for (i, &p) in logits.iter().enumerate() {
                probs[[d, i]] = p;
            }
        }
        Ok(DenoiserOutput::new(probs))
    }

    /// Whether the two content streams share weights. Always true: there is
    /// only one set of causal blocks.
    pub fn weights_tied(&self) -> bool {
        true
    }

    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("token_embed".into(), &self.token_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            ln(&mut out, format!("{p}.ln_attn"), &b.ln_attn);
            push_attention(&mut out, &p, &b.attn);
            ln(&mut out, format!("{p}.ln_ff"), &b.ln_ff);
            push_ff(&mut out, &p, &b.ff);
        }
        for (i, m) in self.mixers.iter().enumerate() {
            let p = format!("mixer{i}");
            ln(&mut out, format!("{p}.ln_query"), &m.ln_query);
            ln(&mut out, format!("{p}.ln_kv"), &m.ln_kv);
            push_attention(&mut out, &p, &m.attn);
            ln(&mut out, format!("{p}.ln_ff"), &m.ln_ff);
            push_ff(&mut out, &p, &m.ff);
        }
        ln(&mut out, "ln_out".into(), &self.ln_out);
        out.push(("out_proj".into(), &self.out_proj));
        out.push(("out_bias".into(), &self.out_bias));
        out
    }

    /// Writes a text container: a magic line, a config line, then for each
    /// tensor a `tensor <name> <rows> <cols>` header followed by one line of
    /// row-major values. Values use the shortest round-trip representation.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{PARAMS_MAGIC}")?;
        let c = &self.config;
        writeln!(
            w,
            "config vocab_size={} max_len={} layers={} mix_every={} embed={} heads={}",
            c.vocab_size, c.max_len, c.layers, c.mix_every, c.embed, c.heads
        )?;
        for (name, t) in self.tensors() {
            writeln!(w, "tensor {name} {} {}", t.nrows(), t.ncols())?;
            let mut line = String::new();
            for (i, v) in t.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:?}").expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let bad = |m: String| Error::InvalidInput(format!("parameter file: {m}"));
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String> { lines.next().ok_or_else(|| bad("unexpected end".into()))?.map_err(Error::from) };
        if next()?.trim() != PARAMS_MAGIC {
            return Err(bad("missing header".into()));
        }
        let cfg_line = next()?;
        let mut fields = std::collections::HashMap::new();
        for kv in cfg_line.split_whitespace().skip(1) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad config field `{kv}`")))?;
            let v: usize = v.parse().map_err(|_| bad(format!("bad value in `{kv}`")))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("config missing `{k}`")));
        let config = HollowConfig {
            vocab_size: get("vocab_size")?,
            max_len: get("max_len")?,
            layers: get("layers")?,
            mix_every: get("mix_every")?,
            embed: get("embed")?,
            heads: get("heads")?,
        };
        let mut net = HollowNet::init(config, 0)?;
        let expected: Vec<(String, usize, usize)> =
            net.tensors().into_iter().map(|(n, t)| (n, t.nrows(), t.ncols())).collect();
        let mut loaded = Vec::with_capacity(expected.len());
        for (name, rows, cols) in &expected {
            let header = next()?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" || parts[1] != name {
                return Err(bad(format!("expected tensor `{name}`, found `{header}`")));
            }
            let (r, c): (usize, usize) = (
                parts[2].parse().map_err(|_| bad(header.clone()))?,
                parts[3].parse().map_err(|_| bad(header.clone()))?,
            );
            if (r, c) != (*rows, *cols) {
                return Err(Error::Shape(format!("{name}: file has {r}x{c}, expected {rows}x{cols}")));
            }
            let values: Vec<f64> = next()?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}` in {name}"))))
                .collect::<Result<_>>()?;
            let t = Array2::from_shape_vec((r, c), values).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
            loaded.push(t);
        }
        for (slot, t) in net.tensors_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        Ok(net)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.token_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend([&mut b.ln_attn.gain, &mut b.ln_attn.bias]);
            out.extend([&mut b.attn.wq, &mut b.attn.wk, &mut b.attn.wv, &mut b.attn.wo]);
            out.extend([&mut b.ln_ff.gain, &mut b.ln_ff.bias]);
            out.extend([&mut b.ff.w1, &mut b.ff.b1, &mut b.ff.w2, &mut b.ff.b2]);
        }
        for m in &mut self.mixers {
            out.extend([&mut m.ln_query.gain, &mut m.ln_query.bias, &mut m.ln_kv.gain, &mut m.ln_kv.bias]);
            out.extend([&mut m.attn.wq, &mut m.attn.wk, &mut m.attn.wv, &mut m.attn.wo]);
            out.extend([&mut m.ln_ff.gain, &mut m.ln_ff.bias]);
            out.extend([&mut m.ff.w1, &mut m.ff.b1, &mut m.ff.w2, &mut m.ff.b2]);
        }
        out.extend([&mut self.ln_out.gain, &mut self.ln_out.bias, &mut self.out_proj, &mut self.out_bias]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn ln<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, name: String, l: &'a LayerNorm) {
    out.push((format!("{name}.gain"), &l.gain));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_attention<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, p: &str, a: &'a Attention) {
    out.push((format!("{p}.attn.wq"), &a.wq));
    out.push((format!("{p}.attn.wk"), &a.wk));
    out.push((format!("{p}.attn.wv"), &a.wv));
    out.push((format!("{p}.attn.wo"), &a.wo));
}

fn push_ff<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, p: &str, f: &'a FeedForward) {
    out.push((format!("{p}.ff.w1"), &f.w1));
    out.push((format!("{p}.ff.b1"), &f.b1));
    out.push((format!("{p}.ff.w2"), &f.w2));
    out.push((format!("{p}.ff.b2"), &f.b2));
}

impl Denoiser for HollowNet {
    fn evaluate(&self, x: &SequenceState, _t: f64) -> Result<DenoiserOutput> {
        self.forward(x)
    }
}
