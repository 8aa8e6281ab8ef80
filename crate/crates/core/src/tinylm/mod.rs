//! A desk-scale autoregressive language model with hand-written gradients.
//!
//! One causal self-attention block (single head, width `d`) followed by a
//! two-layer GELU MLP of width `hidden`, both with residual connections.
//! Token embeddings are tied to the output projection, so adding a token
//! adds one embedding row and one output logit.

mod checkpoint;
mod decode;
mod grad;
mod train;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{CN_TOKEN, UN_TOKEN};
use crate::error::{Error, Result};
use crate::types::{tokenize, RngSeed};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use decode::{confidence_probs, predict_greedy, Decoded, StopReason};
pub use grad::{
    grad_check, loss_and_grad, masked_loss, sequence_loss, target_logit_sensitivity, TrainSequence,
};
pub use train::{train, train_sequences, EpochStats, Optimizer, TrainConfig};

/// End-of-answer marker; always id 0.
pub const EOS_TOKEN: &str = "<eos>";

/// Left-padding for prompts, used when present in the vocabulary.
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Base vocabulary: `<eos>` followed by the distinct tokens in sorted order.
    pub fn build<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| t != EOS_TOKEN)
            .collect();
        if list.iter().any(|t| t == UN_TOKEN || t == CN_TOKEN) {
            return Err(Error::TokensAlreadyPresent);
        }
        list.sort();
        list.dedup();
        list.insert(0, EOS_TOKEN.to_string());
        Ok(Self::from_list(list))
    }

    /// Vocabulary with exactly this token order.
    pub fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.id(EOS_TOKEN)
    }

    pub fn un_id(&self) -> Option<usize> {
        self.id(UN_TOKEN)
    }

    pub fn cn_id(&self) -> Option<usize> {
        self.id(CN_TOKEN)
    }

    pub fn has_confidence_tokens(&self) -> bool {
        self.un_id().is_some() && self.cn_id().is_some()
    }

    pub fn is_confidence_token(&self, id: usize) -> bool {
        Some(id) == self.un_id() || Some(id) == self.cn_id()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::OutOfVocab(t.as_ref().to_string()))
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        self.encode_tokens(&model_tokens(text))
    }
}

/// Whitespace tokens, except that a choice marker such as `B.` is merged
/// with the word after it (`B.17`). With one attention block the model
/// cannot bind a letter to its option by position alone once options are
/// removed or reordered; a merged token carries the binding in its content.
pub fn model_tokens(text: &str) -> Vec<String> {
    let words = tokenize(text);
    let mut out = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        if is_choice_marker(&words[i]) && i + 1 < words.len() {
            out.push(format!("{}{}", words[i], words[i + 1]));
            i += 2;
        } else {
            out.push(words[i].clone());
            i += 1;
        }
    }
    out
}

fn is_choice_marker(word: &str) -> bool {
    let b = word.as_bytes();
    b.len() == 2 && b[0].is_ascii_uppercase() && b[1] == b'.'
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl ModelDims {
    /// Reference width with the usual 4x MLP expansion.
    pub fn with_width(d: usize, max_len: usize) -> Self {
        ModelDims {
            d,
            hidden: 4 * d,
            max_len,
        }
    }
}

/// All trainable tensors, row-major. Matrices are `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `(V, d)` token embeddings, tied to the output projection.
    pub emb: Vec<f64>,
    /// `(max_len, d)` learned positions.
    pub pos: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    /// `(d, hidden)`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(hidden, d)`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Weights {
    pub fn zeros(vocab: usize, dims: ModelDims) -> Self {
        let ModelDims { d, hidden, max_len } = dims;
        Weights {
            emb: vec![0.0; vocab * d],
            pos: vec![0.0; max_len * d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            w1: vec![0.0; d * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * d],
            b2: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        out
    }

    pub fn tensors(&self) -> [&[f64]; 10] {
        [
            &self.emb, &self.pos, &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        [
            &mut self.emb,
            &mut self.pos,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flat parameter access in `tensors()` order.
    pub fn get(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub vocab: Vocab,
    pub dims: ModelDims,
    pub weights: Weights,
}

impl TinyModel {
    /// All-zero parameters: every position predicts the uniform distribution.
    pub fn zeros(vocab: Vocab, dims: ModelDims) -> Self {
        let weights = Weights::zeros(vocab.len(), dims);
        TinyModel {
            vocab,
            dims,
            weights,
        }
    }

    /// Random initialization, reproducible from `seed`.
    pub fn new(vocab: Vocab, dims: ModelDims, seed: RngSeed) -> Self {
        let mut model = Self::zeros(vocab, dims);
        let mut rng = seed.rng();
        let ModelDims { d, hidden, .. } = dims;
        let mut fill = |t: &mut [f64], std: f64| {
            // Uniform with the requested standard deviation.
            let a = std * 3f64.sqrt();
            t.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
        };
        let w = &mut model.weights;
        fill(&mut w.emb, 0.3);
        fill(&mut w.pos, 0.3);
        let attn = 1.0 / (d as f64).sqrt();
        fill(&mut w.wq, attn);
        fill(&mut w.wk, attn);
        fill(&mut w.wv, attn);
        fill(&mut w.wo, attn * 0.5);
        fill(&mut w.w1, 1.0 / (d as f64).sqrt());
        fill(&mut w.w2, 0.5 / (hidden as f64).sqrt());
        model
    }

    pub fn d(&self) -> usize {
        self.dims.d
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Prompt ids. With `<pad>` in the vocabulary, short prompts are left-padded so the last
    /// prompt token always sits at `max_len - 2`, leaving room for one
    /// answer token and a confidence token.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(text)?;
        let width = self.dims.max_len.saturating_sub(2);
        match self.vocab.id(PAD_TOKEN) {
            Some(pad) if ids.len() < width => {
                let mut out = vec![pad; width - ids.len()];
                out.extend(ids);
                Ok(out)
            }
            _ => Ok(ids),
        }
    }

    fn emb_row(&self, id: usize) -> &[f64] {
        let d = self.dims.d;
        &self.weights.emb[id * d..(id + 1) * d]
    }

    /// Run the block over `ids`, keeping every intermediate for backprop.
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn forward(&self, ids: &[usize]) -> Result<Trace> {
        let len = ids.len();
        if len > self.dims.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.dims.max_len,
            });
        }
        let v = self.vocab_size();
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::OutOfVocab(format!("token id {bad}")));
        }
        let ModelDims { d, hidden, .. } = self.dims;
        let w = &self.weights;
        let mut t = Trace::new(len, d, hidden);
        for (i, &id) in ids.iter().enumerate() {
            let x = &mut t.x[i * d..(i + 1) * d];
            for (j, xj) in x.iter_mut().enumerate() {
                *xj = w.emb[id * d + j] + w.pos[i * d + j];
            }
        }
        for i in 0..len {
            let x = &t.x[i * d..(i + 1) * d];
            vec_mat(x, &w.wq, d, &mut t.q[i * d..(i + 1) * d]);
            vec_mat(x, &w.wk, d, &mut t.k[i * d..(i + 1) * d]);
            vec_mat(x, &w.wv, d, &mut t.v[i * d..(i + 1) * d]);
        }
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..len {
            let qi = &t.q[i * d..(i + 1) * d];
            let row = &mut t.att[i * len..i * len + i + 1];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &t.k[j * d..(j + 1) * d]) * scale;
            }
            softmax_in_place(row);
            let ctx = &mut t.ctx[i * d..(i + 1) * d];
            for j in 0..=i {
                let a = t.att[i * len + j];
                for (c, vj) in ctx.iter_mut().zip(&t.v[j * d..(j + 1) * d]) {
                    *c += a * vj;
                }
            }
        }
        let mut o = vec![0.0; d];
        let mut m = vec![0.0; d];
        for i in 0..len {
            vec_mat(&t.ctx[i * d..(i + 1) * d], &w.wo, d, &mut o);
            for j in 0..d {
                t.h[i * d + j] = t.x[i * d + j] + o[j];
            }
            let u = &mut t.u[i * hidden..(i + 1) * hidden];
            vec_mat(&t.h[i * d..(i + 1) * d], &w.w1, hidden, u);
            for (uj, b) in u.iter_mut().zip(&w.b1) {
                *uj += b;
            }
            for j in 0..hidden {
                t.g[i * hidden + j] = gelu(t.u[i * hidden + j]);
            }
            vec_mat(&t.g[i * hidden..(i + 1) * hidden], &w.w2, d, &mut m);
            for j in 0..d {
                t.z[i * d + j] = t.h[i * d + j] + m[j] + w.b2[j];
            }
        }
        Ok(t)
    }

    /// Output logits at position `i` of a trace.
    pub(crate) fn logits_at(&self, t: &Trace, i: usize) -> Vec<f64> {
        let d = self.dims.d;
        let z = &t.z[i * d..(i + 1) * d];
        (0..self.vocab_size())
            .map(|v| dot(z, self.emb_row(v)))
            .collect()
    }

    /// Next-token distribution after `ids`.
    pub fn next_token_probs(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        let t = self.forward(ids)?;
        let mut p = self.logits_at(&t, ids.len() - 1);
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Distribution at every position of `ids`.
    pub fn position_probs(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        let t = self.forward(ids)?;
        Ok((0..ids.len())
            .map(|i| {
                let mut p = self.logits_at(&t, i);
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }
}

/// Append `<UN>` and `<CN>` as the last two tokens, each initialized to the
/// mean of the existing embedding rows. Everything else is left untouched.
pub fn add_confidence_tokens(model: &TinyModel) -> Result<TinyModel> {
    if model.vocab.un_id().is_some() || model.vocab.cn_id().is_some() {
        return Err(Error::TokensAlreadyPresent);
    }
    let d = model.dims.d;
    let v = model.vocab_size();
    let mut mean = vec![0.0; d];
    for row in model.weights.emb.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= v as f64);

    let mut tokens = model.vocab.tokens().to_vec();
    tokens.push(UN_TOKEN.to_string());
    tokens.push(CN_TOKEN.to_string());
    let mut weights = model.weights.clone();
    weights.emb.extend_from_slice(&mean);
    weights.emb.extend_from_slice(&mean);
    Ok(TinyModel {
        vocab: Vocab::from_list(tokens),
        dims: model.dims,
        weights,
    })
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub len: usize,
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `(len, len)`, lower triangle used.
    pub att: Vec<f64>,
    pub ctx: Vec<f64>,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
    pub z: Vec<f64>,
}

impl Trace {
    fn new(len: usize, d: usize, hidden: usize) -> Self {
        Trace {
            len,
            x: vec![0.0; len * d],
            q: vec![0.0; len * d],
            k: vec![0.0; len * d],
            v: vec![0.0; len * d],
            att: vec![0.0; len * len],
            ctx: vec![0.0; len * d],
            h: vec![0.0; len * d],
            u: vec![0.0; len * hidden],
            g: vec![0.0; len * hidden],
            z: vec![0.0; len * d],
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = x W` for `W` of shape `(x.len(), out)`.
pub(crate) fn vec_mat(x: &[f64], w: &[f64], out: usize, y: &mut [f64]) {
    y.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (yj, wij) in y.iter_mut().zip(&w[i * out..(i + 1) * out]) {
            *yj += xi * wij;
        }
    }
}

/// `dx += W dy` for `W` of shape `(dx.len(), dy.len())`.
pub(crate) fn mat_vec_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let out = dy.len();
    for (i, dxi) in dx.iter_mut().enumerate() {
        *dxi += dot(&w[i * out..(i + 1) * out], dy);
    }
}

/// `gw += x^T dy`.
pub(crate) fn outer_acc(x: &[f64], dy: &[f64], gw: &mut [f64]) {
    let out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (g, d) in gw[i * out..(i + 1) * out].iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let n = xs.len() as f64;
        xs.iter_mut().for_each(|x| *x = 1.0 / n);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}
