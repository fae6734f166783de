//! Autoregressive language-model backend.
//!
//! [`LmBackend`] is the read-only surface the pipeline stages talk to:
//! tokenization, log-probability scoring, next-token distributions, sampling,
//! and hidden states, all optionally under a low-rank adapter. The reference
//! implementation is [`TinyTransformer`], a from-scratch decoder-only
//! transformer in double precision, small enough for CPU gradient checks.
//! Training entry points (adapter gradients, pretraining) are inherent
//! methods on [`TinyTransformer`] rather than part of the trait; scoring-only
//! stand-ins used by tests live in [`dummy`].

pub mod adapter;
pub mod config;
pub mod dummy;
pub mod model;
pub mod pretrain;
pub mod tensor_file;
pub mod tokenizer;

mod backward;
#[cfg(test)]
mod tests;
mod forward;

pub use adapter::{AdapterConfig, AdapterGrads, AdapterState, TargetMatrix};
pub use config::TransformerConfig;
pub use model::{ModelGrads, TinyTransformer};
pub use tokenizer::{CharTokenizer, BOS, EOS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ordered vocabulary indices. Never contains the BOS/EOS specials when
/// produced by tokenization or sampling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn empty() -> Self {
        TokenSequence(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        TokenSequence(v)
    }

    pub fn slice(&self, start: usize, end: usize) -> TokenSequence {
        TokenSequence(self.0[start..end].to_vec())
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        TokenSequence(v)
    }
}

/// One probability vector over the vocabulary per scored position.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    pub rows: Vec<Vec<f64>>,
}

/// One hidden vector per scored position, taken at a designated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layer: usize,
    pub rows: Vec<Vec<f64>>,
}

/// Read-only language-model surface.
///
/// `prefix`/`target` scoring conventions: the model scores each `target`
/// token conditioned on everything before it, i.e. the returned vectors have
/// exactly `target.len()` entries and entry `t` corresponds to
/// `P(target[t] | prefix, target[..t])`. Backends that do not support
/// adapters ignore the `adapter` argument.
pub trait LmBackend {
    fn identifier(&self) -> &str;
    fn vocab_size(&self) -> usize;
    fn context_window(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn n_layers(&self) -> usize;

    fn tokenize(&self, text: &str) -> Result<TokenSequence>;
    fn detokenize(&self, tokens: &TokenSequence) -> String;

    fn score_logprobs(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<Vec<f64>>;

    fn next_token_distributions(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<NextTokenDistribution>;

    fn sample(
        &self,
        adapter: Option<&AdapterState>,
        prompt: &TokenSequence,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<TokenSequence>;

    fn hidden_at(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
        layer: usize,
    ) -> Result<HiddenStates>;
}

/// A backend with an adapter permanently applied, so adapter-carrying models
/// can flow through interfaces that take a bare [`LmBackend`]. Calls that
/// already pass an adapter override the attached one.
pub struct AdaptedLm<'a, M: LmBackend> {
    pub model: &'a M,
    pub adapter: &'a AdapterState,
}

impl<'a, M: LmBackend> AdaptedLm<'a, M> {
    pub fn new(model: &'a M, adapter: &'a AdapterState) -> Self {
        AdaptedLm { model, adapter }
    }

    fn pick<'b>(&'b self, explicit: Option<&'b AdapterState>) -> Option<&'b AdapterState> {
        explicit.or(Some(self.adapter))
    }
}

impl<'a, M: LmBackend> LmBackend for AdaptedLm<'a, M> {
    fn identifier(&self) -> &str {
        self.model.identifier()
    }
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }
    fn context_window(&self) -> usize {
        self.model.context_window()
    }
    fn hidden_dim(&self) -> usize {
        self.model.hidden_dim()
    }
    fn n_layers(&self) -> usize {
        self.model.n_layers()
    }
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.model.tokenize(text)
    }
    fn detokenize(&self, tokens: &TokenSequence) -> String {
        self.model.detokenize(tokens)
    }
    fn score_logprobs(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<Vec<f64>> {
        self.model.score_logprobs(self.pick(adapter), prefix, target)
    }
    fn next_token_distributions(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<NextTokenDistribution> {
        self.model
            .next_token_distributions(self.pick(adapter), prefix, target)
    }
    fn sample(
        &self,
        adapter: Option<&AdapterState>,
        prompt: &TokenSequence,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<TokenSequence> {
        self.model
            .sample(self.pick(adapter), prompt, temperature, max_tokens, seed)
    }
    fn hidden_at(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
        layer: usize,
    ) -> Result<HiddenStates> {
        self.model.hidden_at(self.pick(adapter), prefix, target, layer)
    }
}

/// Draw an index from a probability vector. Greedy at `temperature == 0`
/// (ties resolved to the lowest index); otherwise the vector is annealed by
/// `1/temperature` in log space and sampled by inverse CDF.
pub fn sample_from_probs(probs: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature == 0.0 {
        return argmax(probs);
    }
    let inv_t = 1.0 / temperature;
    let logits: Vec<f64> = probs.iter().map(|&p| p.max(1e-300).ln() * inv_t).collect();
    let annealed = softmax(&logits);
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in annealed.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    annealed.len() - 1
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if x > best_v {
            best_v = x;
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&z| z - lse).collect()
}

pub(crate) fn check_window(
    window: usize,
    prefix_len: usize,
    target_len: usize,
    what: &str,
) -> Result<()> {
    let got = prefix_len + target_len;
    if got > window {
        return Err(Error::WindowOverflow {
            got,
            window,
            detail: format!("{what}: prefix {prefix_len} + target {target_len}"),
        });
    }
    Ok(())
}
