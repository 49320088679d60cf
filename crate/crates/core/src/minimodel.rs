//! A tiny summarizer with exact gradients: a mean-of-embeddings encoder
//! and a one-layer autoregressive decoder.
//!
//! For each target position `t` the decoder reads `z = [c; E[y_{t-1}]]`,
//! where `c` is the mean source embedding, computes `h = tanh(W z + b)`
//! and scores the vocabulary with `U h`. The loss is the per-example
//! length-normalized cross entropy averaged over the batch.
//!
//! The forward/backward pass is generic over [`Scalar`], so running it on
//! [`Dual`] numbers yields exact Hessian-vector products.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::tokenize_text;
use crate::seed::{derive_seed, rng, sha256_hex};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const PAD: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<s>", "</s>", "<unk>", "<pad>"];

/// Source truncation length.
pub const MAX_SOURCE: usize = 256;
/// Target truncation length, including the final EOS.
pub const MAX_TARGET: usize = 128;

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("example {0} has an empty target")]
    EmptyTarget(usize),
    #[error("token index {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("parameter length {got} does not match dimensions ({expected})")]
    BadLength { got: usize, expected: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

/// Shared token table for code and summaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens[SPECIALS.len()..].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Vocab::from_tokens(Vec::<String>::deserialize(d)?))
    }
}

impl Vocab {
    /// Vocabulary of the specials followed by `tokens` (duplicates and
    /// special names are skipped).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in SPECIALS.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len() as u32);
                v.tokens.push(t);
            }
        }
        v
    }

    /// Builds a vocabulary from texts, keeping tokens seen at least
    /// `min_count` times, ordered by descending count then lexically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for t in tokenize_text(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut items: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_size {
            items.truncate(max.saturating_sub(SPECIALS.len()));
        }
        Self::from_tokens(items.into_iter().map(|(t, _)| t).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes and maps to indices, with UNK for unknown tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize_text(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, stopping at EOS and skipping BOS/PAD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable content hash (hex SHA-256 of the newline-joined tokens).
    pub fn hash(&self) -> String {
        sha256_hex(self.tokens.join("\n").as_bytes())
    }
}

/// A tokenized, truncated (source, target) pair; the target ends in EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl Encoded {
    pub fn new(vocab: &Vocab, code: &str, summary: &str) -> Self {
        let mut source = vocab.encode(code);
        source.truncate(MAX_SOURCE);
        let mut target = vocab.encode(summary);
        target.truncate(MAX_TARGET - 1);
        target.push(EOS);
        Encoded { source, target }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub d: usize,
    pub d_out: usize,
}

/// Named block of a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// Token embeddings, `vocab × d`.
    Embedding,
    /// Decoder matrix, `d_out × 2d`.
    Decoder,
    /// Decoder bias, `d_out`.
    Bias,
    /// Output projection, `vocab × d_out`.
    Output,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Embedding, Block::Decoder, Block::Bias, Block::Output];
}

impl Dims {
    pub fn block_len(&self, b: Block) -> usize {
        match b {
            Block::Embedding => self.vocab * self.d,
            Block::Decoder => self.d_out * 2 * self.d,
            Block::Bias => self.d_out,
            Block::Output => self.vocab * self.d_out,
        }
    }

    pub fn block_range(&self, b: Block) -> std::ops::Range<usize> {
        let start: usize = Block::ALL.iter().take_while(|x| **x != b).map(|x| self.block_len(*x)).sum();
        start..start + self.block_len(b)
    }

    pub fn total(&self) -> usize {
        Block::ALL.iter().map(|b| self.block_len(*b)).sum()
    }
}

/// Flat model parameters partitioned into [`Block`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(dims: Dims) -> Self {
        ParamVector { dims, data: vec![0.0; dims.total()] }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != dims.total() {
            return Err(ModelError::BadLength { got: data.len(), expected: dims.total() });
        }
        Ok(ParamVector { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.data[self.dims.block_range(b)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let r = self.dims.block_range(b);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Hex SHA-256 of the little-endian bytes.
    pub fn hash(&self) -> String {
        sha256_hex(&to_le_bytes(&self.data))
    }
}

/// Seeded uniform initialization in `[-INIT_SCALE, INIT_SCALE]`, bias zero.
pub fn init_params(vocab_size: usize, d: usize, d_out: usize, seed: u64) -> ParamVector {
    let dims = Dims { vocab: vocab_size.max(1), d: d.max(1), d_out: d_out.max(1) };
    let mut p = ParamVector::zeros(dims);
    let mut r = rng(derive_seed(seed, "init"));
    for b in [Block::Embedding, Block::Decoder, Block::Output] {
        for x in p.block_mut(b) {
            *x = r.random_range(-INIT_SCALE..=INIT_SCALE);
        }
    }
    p
}

/// Arithmetic needed by the forward/backward pass.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + std::fmt::Debug
{
    fn from_f64(x: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn re(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number `re + du·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { re: self.re + o.re, du: self.du + o.du }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { re: self.re - o.re, du: self.du - o.du }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { re: self.re * o.re, du: self.du * o.re + self.re * o.du }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { re: self.re / o.re, du: (self.du * o.re - self.re * o.du) / (o.re * o.re) }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { re: -self.re, du: -self.du }
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl Scalar for Dual {
    fn from_f64(x: f64) -> Self {
        Dual { re: x, du: 0.0 }
    }
    fn re(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual { re: e, du: self.du * e }
    }
    fn ln(self) -> Self {
        Dual { re: self.re.ln(), du: self.du / self.re }
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual { re: t, du: self.du * (1.0 - t * t) }
    }
}

fn check_batch(dims: Dims, batch: &[Encoded]) -> Result<(), ModelError> {
    for (i, ex) in batch.iter().enumerate() {
        if ex.target.is_empty() {
            return Err(ModelError::EmptyTarget(i));
        }
        if let Some(&token) = ex.source.iter().chain(&ex.target).find(|&&t| t as usize >= dims.vocab) {
            return Err(ModelError::TokenOutOfRange { token, vocab: dims.vocab });
        }
    }
    Ok(())
}

struct Views {
    emb: usize,
    dec: usize,
    bias: usize,
    out: usize,
}

impl Views {
    fn new(dims: Dims) -> Self {
        Views {
            emb: dims.block_range(Block::Embedding).start,
            dec: dims.block_range(Block::Decoder).start,
            bias: dims.block_range(Block::Bias).start,
            out: dims.block_range(Block::Output).start,
        }
    }
}

/// Softmax with the max subtracted for stability; returns (probs, log-sum-exp).
fn softmax<S: Scalar>(logits: &[S]) -> (Vec<S>, S) {
    let m = logits.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let m = S::from_f64(m);
    let exps: Vec<S> = logits.iter().map(|&x| (x - m).exp()).collect();
    let mut sum = S::from_f64(0.0);
    for &e in &exps {
        sum += e;
    }
    let lse = m + sum.ln();
    (exps.into_iter().map(|e| e / sum).collect(), lse)
}

/// Loss and gradient over any scalar type. `grad` is accumulated into,
/// so callers pass a zeroed buffer.
fn loss_grad_generic<S: Scalar>(dims: Dims, theta: &[S], batch: &[Encoded], grad: &mut [S]) -> S {
    let Dims { vocab, d, d_out } = dims;
    let v = Views::new(dims);
    let zero = S::from_f64(0.0);
    let n = batch.len().max(1) as f64;
    let mut total = zero;
    let mut c = vec![zero; d];
    let mut dc = vec![zero; d];
    let mut z = vec![zero; 2 * d];
    let mut h = vec![zero; d_out];
    let mut logits = vec![zero; vocab];
    let mut dh = vec![zero; d_out];
    let mut da = vec![zero; d_out];
    for ex in batch {
        c.iter_mut().for_each(|x| *x = zero);
        dc.iter_mut().for_each(|x| *x = zero);
        if !ex.source.is_empty() {
            let inv = S::from_f64(1.0 / ex.source.len() as f64);
            for &tok in &ex.source {
                let row = v.emb + tok as usize * d;
                for k in 0..d {
                    c[k] += theta[row + k] * inv;
                }
            }
        }
        let weight = S::from_f64(1.0 / (n * ex.target.len() as f64));
        let mut ex_loss = zero;
        let mut prev = BOS;
        for &y in &ex.target {
            let prow = v.emb + prev as usize * d;
            z[..d].copy_from_slice(&c);
            z[d..].copy_from_slice(&theta[prow..prow + d]);
            for j in 0..d_out {
                let wrow = v.dec + j * 2 * d;
                let mut a = theta[v.bias + j];
                for k in 0..2 * d {
                    a += theta[wrow + k] * z[k];
                }
                h[j] = a.tanh();
            }
            for (i, l) in logits.iter_mut().enumerate() {
                let urow = v.out + i * d_out;
                let mut s = zero;
                for j in 0..d_out {
                    s += theta[urow + j] * h[j];
                }
                *l = s;
            }
            let (probs, lse) = softmax(&logits);
            ex_loss += lse - logits[y as usize];
            dh.iter_mut().for_each(|x| *x = zero);
            for (i, &p) in probs.iter().enumerate() {
                let g = if i == y as usize { p - S::from_f64(1.0) } else { p } * weight;
                let urow = v.out + i * d_out;
                for j in 0..d_out {
                    grad[urow + j] += g * h[j];
                    dh[j] += g * theta[urow + j];
                }
            }
            for j in 0..d_out {
                da[j] = dh[j] * (S::from_f64(1.0) - h[j] * h[j]);
                grad[v.bias + j] += da[j];
                let wrow = v.dec + j * 2 * d;
                for k in 0..2 * d {
                    grad[wrow + k] += da[j] * z[k];
                }
            }
            for k in 0..2 * d {
                let mut s = zero;
                for j in 0..d_out {
                    s += theta[v.dec + j * 2 * d + k] * da[j];
                }
                if k < d {
                    dc[k] += s;
                } else {
                    grad[prow + k - d] += s;
                }
            }
            prev = y;
        }
        total += ex_loss * S::from_f64(1.0 / ex.target.len() as f64);
        if !ex.source.is_empty() {
            let inv = S::from_f64(1.0 / ex.source.len() as f64);
            for &tok in &ex.source {
                let row = v.emb + tok as usize * d;
                for k in 0..d {
                    grad[row + k] += dc[k] * inv;
                }
            }
        }
    }
    total * S::from_f64(1.0 / n)
}

/// Batch loss: mean over examples of the per-token mean negative log
/// likelihood. An empty batch has loss 0.
pub fn loss(params: &ParamVector, batch: &[Encoded]) -> Result<f64, ModelError> {
    loss_and_grad(params, batch).map(|(l, _)| l)
}

pub fn grad(params: &ParamVector, batch: &[Encoded]) -> Result<ParamVector, ModelError> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(params: &ParamVector, batch: &[Encoded]) -> Result<(f64, ParamVector), ModelError> {
    check_batch(params.dims, batch)?;
    let mut g = ParamVector::zeros(params.dims);
    let l = loss_grad_generic(params.dims, &params.data, batch, &mut g.data);
    Ok((l, g))
}

/// Exact Hessian-vector product `∇²L(θ) v` by forward-mode
/// differentiation of the analytic gradient.
pub fn hvp(params: &ParamVector, batch: &[Encoded], v: &[f64]) -> Result<ParamVector, ModelError> {
    check_batch(params.dims, batch)?;
    if v.len() != params.len() {
        return Err(ModelError::BadLength { got: v.len(), expected: params.len() });
    }
    let theta: Vec<Dual> = params.data.iter().zip(v).map(|(&re, &du)| Dual { re, du }).collect();
    let mut g = vec![Dual::default(); params.len()];
    loss_grad_generic(params.dims, &theta, batch, &mut g);
    Ok(ParamVector { dims: params.dims, data: g.into_iter().map(|x| x.du).collect() })
}

/// Next-token distribution given the source and the previous token.
pub fn next_token_probs(params: &ParamVector, source: &[u32], prev: u32) -> Vec<f64> {
    let Dims { vocab, d, d_out } = params.dims;
    let v = Views::new(params.dims);
    let th = &params.data;
    let mut z = vec![0.0; 2 * d];
    if !source.is_empty() {
        for &tok in source {
            let row = v.emb + (tok as usize).min(vocab - 1) * d;
            for k in 0..d {
                z[k] += th[row + k] / source.len() as f64;
            }
        }
    }
    let prow = v.emb + (prev as usize).min(vocab - 1) * d;
    z[d..].copy_from_slice(&th[prow..prow + d]);
    let h: Vec<f64> = (0..d_out)
        .map(|j| {
            let wrow = v.dec + j * 2 * d;
            (th[v.bias + j] + (0..2 * d).map(|k| th[wrow + k] * z[k]).sum::<f64>()).tanh()
        })
        .collect();
    let logits: Vec<f64> =
        (0..vocab).map(|i| (0..d_out).map(|j| th[v.out + i * d_out + j] * h[j]).sum()).collect();
    softmax(&logits).0
}

/// Argmax decoding from BOS until EOS or `max_len` tokens; ties go to the
/// lowest index. EOS is not included in the output.
pub fn greedy_decode(params: &ParamVector, source: &[u32], max_len: usize) -> Vec<u32> {
    let source = &source[..source.len().min(MAX_SOURCE)];
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < max_len {
        let probs = next_token_probs(params, source, prev);
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        if best as u32 == EOS {
            break;
        }
        out.push(best as u32);
        prev = best as u32;
    }
    out
}

fn to_le_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

const MAGIC: &[u8; 8] = b"CCKPT\x00\x00\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: Dims,
    pub blocks: Vec<(Block, usize)>,
    pub vocab_hash: String,
    pub seed: u64,
}

/// Writes `MAGIC`, a u64 LE header length, the JSON header, then the
/// parameters as f64 LE.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamVector, vocab_hash: &str, seed: u64) -> Result<(), ModelError> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        dims: params.dims,
        blocks: Block::ALL.iter().map(|&b| (b, params.dims.block_len(b))).collect(),
        vocab_hash: vocab_hash.to_string(),
        seed,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + params.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&to_le_bytes(&params.data));
    let err = |e: std::io::Error| ModelError::Checkpoint { path: path.to_path_buf(), message: e.to_string() };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(err)?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamVector), ModelError> {
    let path = path.as_ref();
    let bad = |message: String| ModelError::Checkpoint { path: path.to_path_buf(), message };
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| bad(e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let rest = &bytes[16 + hlen..];
    if rest.len() != header.dims.total() * 8 {
        return Err(bad(format!("expected {} parameters, found {} bytes", header.dims.total(), rest.len())));
    }
    let data = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header.clone(), ParamVector { dims: header.dims, data }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Vec<Encoded> {
        vec![
            Encoded { source: vec![4, 5, 5], target: vec![6, 7, EOS] },
            Encoded { source: vec![], target: vec![EOS] },
            Encoded { source: vec![8], target: vec![4, 4, 9, EOS] },
        ]
    }

    #[test]
    fn init_contract() {
        let a = init_params(10, 4, 8, 1);
        assert_eq!(a, init_params(10, 4, 8, 1));
        assert_ne!(a, init_params(10, 4, 8, 2));
        assert!(a.block(Block::Bias).iter().all(|&x| x == 0.0));
        assert!(a.data.iter().all(|x| x.abs() <= INIT_SCALE));
        assert_eq!(a.len(), 10 * 4 + 8 * 8 + 8 + 10 * 8);
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let p = ParamVector::zeros(Dims { vocab: 10, d: 3, d_out: 5 });
        let l = loss(&p, &batch()).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_model_has_zero_loss_and_gradient() {
        let dims = Dims { vocab: 2, d: 1, d_out: 1 };
        let mut p = ParamVector::zeros(dims);
        p.block_mut(Block::Bias)[0] = 50.0;
        p.block_mut(Block::Output).copy_from_slice(&[-1000.0, 1000.0]);
        let b = vec![Encoded { source: vec![0, 1], target: vec![1, 1] }, Encoded { source: vec![], target: vec![1] }];
        let (l, g) = loss_and_grad(&p, &b).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0), "{:?}", g.data);
    }

    #[test]
    fn unused_rows_have_zero_gradient() {
        let p = init_params(12, 3, 4, 5);
        let g = grad(&p, &batch()).unwrap();
        for tok in [10usize, 11] {
            assert!(g.block(Block::Embedding)[tok * 3..tok * 3 + 3].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn errors() {
        let p = init_params(10, 2, 2, 0);
        assert!(matches!(loss(&p, &[Encoded { source: vec![1], target: vec![] }]), Err(ModelError::EmptyTarget(0))));
        assert!(matches!(loss(&p, &[Encoded { source: vec![10], target: vec![1] }]), Err(ModelError::TokenOutOfRange { .. })));
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let p = init_params(10, 3, 4, 9);
        let v: Vec<f64> = (0..p.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let hv = hvp(&p, &batch(), &v).unwrap();
        let eps = 1e-5;
        let shifted = |s: f64| {
            let q = ParamVector { dims: p.dims, data: p.data.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
            grad(&q, &batch()).unwrap()
        };
        let (gp, gm) = (shifted(eps), shifted(-eps));
        for i in 0..p.len() {
            let fd = (gp.data[i] - gm.data[i]) / (2.0 * eps);
            assert!((fd - hv.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", hv.data[i]);
        }
    }

    #[test]
    fn decode_ties_pick_lowest_index() {
        let p = ParamVector::zeros(Dims { vocab: 6, d: 2, d_out: 2 });
        assert_eq!(greedy_decode(&p, &[4, 5], 5), vec![0; 5]);
        assert!(next_token_probs(&p, &[], BOS).iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn vocab_basics() {
        let v = Vocab::build(["b a a", "c a b"], 1, None);
        assert_eq!(&v.tokens()[..4], &SPECIALS.map(String::from));
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[4, 5, EOS, 6]), "a b");
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        let e = Encoded::new(&v, "a b c", &"a ".repeat(300));
        assert_eq!(e.target.len(), MAX_TARGET);
        assert_eq!(*e.target.last().unwrap(), EOS);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("curricode-ckpt-{}", std::process::id()));
        let path = dir.join("ckpt_epoch1.bin");
        let p = init_params(7, 2, 3, 4);
        save_checkpoint(&path, &p, "abc", 4).unwrap();
        let (h, q) = load_checkpoint(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!((h.vocab_hash.as_str(), h.seed), ("abc", 4));
        let _ = fs::remove_dir_all(dir);
    }
}
