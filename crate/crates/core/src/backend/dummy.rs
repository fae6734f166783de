//! Scoring-only stand-in backends for tests and oracles.
//!
//! These implement [`LmBackend`] with fully controlled output distributions
//! so pipeline stages can be checked against hand-computed values without a
//! trained model. They all ignore adapters and share the character tokenizer.

use crate::backend::adapter::AdapterState;
use crate::backend::tokenizer::{CharTokenizer, EOS};
use crate::backend::{
    check_window, sample_from_probs, HiddenStates, LmBackend, NextTokenDistribution, TokenSequence,
};
use crate::error::Result;
use crate::rng::Rng;

/// Uniform distribution over the vocabulary at every position.
#[derive(Debug, Clone)]
pub struct UniformLm {
    pub vocab_size: usize,
    pub context_window: usize,
    pub hidden_dim: usize,
    tokenizer: CharTokenizer,
}

impl UniformLm {
    pub fn new(vocab_size: usize, context_window: usize) -> Self {
        UniformLm {
            vocab_size,
            context_window,
            hidden_dim: 4,
            tokenizer: CharTokenizer,
        }
    }
}

impl LmBackend for UniformLm {
    fn identifier(&self) -> &str {
        "dummy-uniform"
    }
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    fn context_window(&self) -> usize {
        self.context_window
    }
    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }
    fn n_layers(&self) -> usize {
        1
    }
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.tokenize(text)
    }
    fn detokenize(&self, tokens: &TokenSequence) -> String {
        self.tokenizer.detokenize(tokens)
    }

    fn score_logprobs(
        &self,
        _adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<Vec<f64>> {
        check_window(self.context_window, prefix.len(), target.len(), "score")?;
        let lp = -(self.vocab_size as f64).ln();
        Ok(vec![lp; target.len()])
    }

    fn next_token_distributions(
        &self,
        _adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<NextTokenDistribution> {
        check_window(self.context_window, prefix.len(), target.len(), "score")?;
        let row = vec![1.0 / self.vocab_size as f64; self.vocab_size];
        Ok(NextTokenDistribution {
            rows: vec![row; target.len()],
        })
    }

    fn sample(
        &self,
        _adapter: Option<&AdapterState>,
        prompt: &TokenSequence,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<TokenSequence> {
        check_window(self.context_window, prompt.len(), 0, "sample")?;
        let row = vec![1.0 / self.vocab_size as f64; self.vocab_size];
        let mut rng = Rng::new(seed);
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let next = sample_from_probs(&row, temperature, &mut rng) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(TokenSequence(out))
    }

    fn hidden_at(
        &self,
        _adapter: Option<&AdapterState>,
        _prefix: &TokenSequence,
        target: &TokenSequence,
        layer: usize,
    ) -> Result<HiddenStates> {
        Ok(HiddenStates {
            layer,
            rows: vec![vec![0.0; self.hidden_dim]; target.len()],
        })
    }
}

/// Distribution at scored position `t` is `rows[min(t, len-1)]`, independent
/// of the prefix. Lets tests rig exact per-position probabilities.
#[derive(Debug, Clone)]
pub struct RiggedLm {
    pub rows: Vec<Vec<f64>>,
    pub context_window: usize,
    tokenizer: CharTokenizer,
}

impl RiggedLm {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        assert!(!rows.is_empty());
        let v = rows[0].len();
        for r in &rows {
            assert_eq!(r.len(), v);
            let s: f64 = r.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "rigged row must sum to 1, got {s}");
        }
        RiggedLm {
            rows,
            context_window: 4096,
            tokenizer: CharTokenizer,
        }
    }

    fn row(&self, t: usize) -> &Vec<f64> {
        &self.rows[t.min(self.rows.len() - 1)]
    }
}

impl LmBackend for RiggedLm {
    fn identifier(&self) -> &str {
        "dummy-rigged"
    }
    fn vocab_size(&self) -> usize {
        self.rows[0].len()
    }
    fn context_window(&self) -> usize {
        self.context_window
    }
    fn hidden_dim(&self) -> usize {
        4
    }
    fn n_layers(&self) -> usize {
        1
    }
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.tokenize(text)
    }
    fn detokenize(&self, tokens: &TokenSequence) -> String {
        self.tokenizer.detokenize(tokens)
    }

    fn score_logprobs(
        &self,
        _adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<Vec<f64>> {
        check_window(self.context_window, prefix.len(), target.len(), "score")?;
        Ok(target
            .0
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.row(t)[tok as usize].ln())
            .collect())
    }

    fn next_token_distributions(
        &self,
        _adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<NextTokenDistribution> {
        check_window(self.context_window, prefix.len(), target.len(), "score")?;
        Ok(NextTokenDistribution {
            rows: (0..target.len()).map(|t| self.row(t).clone()).collect(),
        })
    }

    fn sample(
        &self,
        _adapter: Option<&AdapterState>,
        prompt: &TokenSequence,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<TokenSequence> {
        check_window(self.context_window, prompt.len(), 0, "sample")?;
        let mut rng = Rng::new(seed);
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let next = sample_from_probs(self.row(out.len()), temperature, &mut rng) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(TokenSequence(out))
    }

    fn hidden_at(
        &self,
        _adapter: Option<&AdapterState>,
        _prefix: &TokenSequence,
        target: &TokenSequence,
        layer: usize,
    ) -> Result<HiddenStates> {
        Ok(HiddenStates {
            layer,
            rows: vec![vec![0.0; 4]; target.len()],
        })
    }
}

/// `sample` always emits a fixed text (truncated to `max_tokens`), no matter
/// the prompt. Scoring is uniform. Used to test prompt/parse plumbing.
#[derive(Debug, Clone)]
pub struct ScriptedLm {
    script: TokenSequence,
    inner: UniformLm,
}

impl ScriptedLm {
    pub fn new(script_text: &str, context_window: usize) -> Self {
        let tokenizer = CharTokenizer;
        ScriptedLm {
            script: tokenizer.tokenize(script_text).expect("script must be tokenizable"),
            inner: UniformLm::new(crate::backend::tokenizer::VOCAB_SIZE, context_window),
        }
    }
}

impl LmBackend for ScriptedLm {
    fn identifier(&self) -> &str {
        "dummy-scripted"
    }
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }
    fn context_window(&self) -> usize {
        self.inner.context_window
    }
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim
    }
    fn n_layers(&self) -> usize {
        1
    }
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.inner.tokenize(text)
    }
    fn detokenize(&self, tokens: &TokenSequence) -> String {
        self.inner.detokenize(tokens)
    }

    fn score_logprobs(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<Vec<f64>> {
        self.inner.score_logprobs(adapter, prefix, target)
    }

    fn next_token_distributions(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<NextTokenDistribution> {
        self.inner.next_token_distributions(adapter, prefix, target)
    }

    fn sample(
        &self,
        _adapter: Option<&AdapterState>,
        prompt: &TokenSequence,
        _temperature: f64,
        max_tokens: usize,
        _seed: u64,
    ) -> Result<TokenSequence> {
        check_window(self.context_window(), prompt.len(), 0, "sample")?;
        let n = self.script.len().min(max_tokens);
        Ok(self.script.slice(0, n))
    }

    fn hidden_at(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
        layer: usize,
    ) -> Result<HiddenStates> {
        self.inner.hidden_at(adapter, prefix, target, layer)
    }
}
