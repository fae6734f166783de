//! Reference decoder-only transformer in double precision.
//!
//! Pre-norm blocks: `x += attn(ln1(x))`, `x += mlp(ln2(x))`, with learned
//! absolute positions and an untied output head. A begin-of-sequence token is
//! prepended internally to every forward pass so sequences can be scored
//! against an empty prefix. All weights are flat row-major `Vec<f64>`; a
//! linear layer stores `W: [out, in]` and computes `y = W x`.

use std::path::Path;

use crate::backend::adapter::{AdapterConfig, AdapterState, TargetMatrix};
use crate::backend::config::TransformerConfig;
use crate::backend::tensor_file::TensorFile;
use crate::backend::tokenizer::CharTokenizer;
use crate::backend::{
    check_window, log_softmax, sample_from_probs, softmax, HiddenStates, LmBackend,
    NextTokenDistribution, TokenSequence, BOS, EOS,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
}

impl LayerWeights {
    fn zeros(cfg: &TransformerConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        LayerWeights {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            w_q: vec![0.0; d * d],
            w_k: vec![0.0; d * d],
            w_v: vec![0.0; d * d],
            w_o: vec![0.0; d * d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            w_up: vec![0.0; f * d],
            b_up: vec![0.0; f],
            w_down: vec![0.0; d * f],
            b_down: vec![0.0; d],
        }
    }

    fn matrix_mut(&mut self, target: TargetMatrix) -> &mut Vec<f64> {
        match target {
            TargetMatrix::AttnQ => &mut self.w_q,
            TargetMatrix::AttnK => &mut self.w_k,
            TargetMatrix::AttnV => &mut self.w_v,
            TargetMatrix::AttnO => &mut self.w_o,
            TargetMatrix::MlpUp => &mut self.w_up,
            TargetMatrix::MlpDown => &mut self.w_down,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    pub config: TransformerConfig,
    pub(crate) identifier: String,
    pub(crate) tok_embed: Vec<f64>,
    pub(crate) pos_embed: Vec<f64>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) lnf_gamma: Vec<f64>,
    pub(crate) lnf_beta: Vec<f64>,
    pub(crate) w_head: Vec<f64>,
    pub(crate) tokenizer: CharTokenizer,
    fingerprint: u64,
}

impl TinyTransformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let mut rng = Rng::new(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let fill = |buf: &mut [f64], s: f64, rng: &mut Rng| {
            for x in buf.iter_mut() {
                *x = rng.gaussian() * s;
            }
        };

        let mut tok_embed = vec![0.0; v * d];
        fill(&mut tok_embed, std, &mut rng);
        let mut pos_embed = vec![0.0; (config.context_window + 1) * d];
        fill(&mut pos_embed, std, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut lw = LayerWeights::zeros(&config);
            fill(&mut lw.w_q, std, &mut rng);
            fill(&mut lw.w_k, std, &mut rng);
            fill(&mut lw.w_v, std, &mut rng);
            fill(&mut lw.w_o, resid_std, &mut rng);
            fill(&mut lw.w_up, std, &mut rng);
            fill(&mut lw.w_down, resid_std, &mut rng);
            layers.push(lw);
        }
        let mut w_head = vec![0.0; v * d];
        fill(&mut w_head, std, &mut rng);

        let mut model = TinyTransformer {
            identifier: format!("tiny-l{}-d{}-s{}", config.n_layers, config.d_model, seed),
            lnf_gamma: vec![1.0; d],
            lnf_beta: vec![0.0; d],
            tok_embed,
            pos_embed,
            layers,
            w_head,
            tokenizer: CharTokenizer,
            config,
            fingerprint: 0,
        };
        model.refresh_fingerprint();
        Ok(model)
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// FNV-1a over the configuration and every weight bit pattern. Called by
    /// constructors and after any in-place weight mutation.
    pub(crate) fn refresh_fingerprint(&mut self) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let eat = |bytes: &[u8], h: &mut u64| {
            for &b in bytes {
                *h ^= b as u64;
                *h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let cfg = format!(
            "{}/{}/{}/{}/{}/{}",
            self.config.n_layers,
            self.config.n_heads,
            self.config.d_model,
            self.config.d_ff,
            self.config.vocab_size,
            self.config.context_window
        );
        eat(cfg.as_bytes(), &mut h);
        for (_, w) in self.named_weights() {
            for &x in w {
                eat(&x.to_le_bytes(), &mut h);
            }
        }
        self.fingerprint = h;
    }

    fn named_weights(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.ln1.gamma"), &lw.ln1_gamma));
            out.push((format!("layer.{i}.ln1.beta"), &lw.ln1_beta));
            out.push((format!("layer.{i}.attn_q.w"), &lw.w_q));
            out.push((format!("layer.{i}.attn_k.w"), &lw.w_k));
            out.push((format!("layer.{i}.attn_v.w"), &lw.w_v));
            out.push((format!("layer.{i}.attn_o.w"), &lw.w_o));
            out.push((format!("layer.{i}.ln2.gamma"), &lw.ln2_gamma));
            out.push((format!("layer.{i}.ln2.beta"), &lw.ln2_beta));
            out.push((format!("layer.{i}.mlp_up.w"), &lw.w_up));
            out.push((format!("layer.{i}.mlp_up.b"), &lw.b_up));
            out.push((format!("layer.{i}.mlp_down.w"), &lw.w_down));
            out.push((format!("layer.{i}.mlp_down.b"), &lw.b_down));
        }
        out.push(("lnf.gamma".into(), &self.lnf_gamma));
        out.push(("lnf.beta".into(), &self.lnf_beta));
        out.push(("head.w".into(), &self.w_head));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "tiny-transformer",
            "identifier": self.identifier,
            "config": self.config,
        });
        let mut tf = TensorFile::new(meta);
        for (name, w) in self.named_weights() {
            tf.insert(name, w.clone());
        }
        tf.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tf = TensorFile::read_from(path)?;
        let p = path.display().to_string();
        if tf.metadata.get("kind").and_then(|v| v.as_str()) != Some("tiny-transformer") {
            return Err(Error::FileFormat {
                path: p,
                detail: "not a tiny-transformer model file".into(),
            });
        }
        let config: TransformerConfig = serde_json::from_value(tf.metadata["config"].clone())?;
        config.validate()?;
        let identifier = tf.metadata["identifier"]
            .as_str()
            .unwrap_or("tiny-transformer")
            .to_string();
        let mut model = TinyTransformer {
            identifier,
            tok_embed: tf.get("tok_embed", &p)?.clone(),
            pos_embed: tf.get("pos_embed", &p)?.clone(),
            layers: Vec::new(),
            lnf_gamma: tf.get("lnf.gamma", &p)?.clone(),
            lnf_beta: tf.get("lnf.beta", &p)?.clone(),
            w_head: tf.get("head.w", &p)?.clone(),
            tokenizer: CharTokenizer,
            config: config.clone(),
            fingerprint: 0,
        };
        for i in 0..config.n_layers {
            let g = |name: &str| -> Result<Vec<f64>> {
                tf.get(&format!("layer.{i}.{name}"), &p).cloned()
            };
            model.layers.push(LayerWeights {
                ln1_gamma: g("ln1.gamma")?,
                ln1_beta: g("ln1.beta")?,
                w_q: g("attn_q.w")?,
                w_k: g("attn_k.w")?,
                w_v: g("attn_v.w")?,
                w_o: g("attn_o.w")?,
                ln2_gamma: g("ln2.gamma")?,
                ln2_beta: g("ln2.beta")?,
                w_up: g("mlp_up.w")?,
                b_up: g("mlp_up.b")?,
                w_down: g("mlp_down.w")?,
                b_down: g("mlp_down.b")?,
            });
        }
        model.refresh_fingerprint();
        Ok(model)
    }

    pub fn target_dims(&self, target: TargetMatrix) -> (usize, usize) {
        let d = self.config.d_model;
        let f = self.config.d_ff;
        match target {
            TargetMatrix::AttnQ | TargetMatrix::AttnK | TargetMatrix::AttnV | TargetMatrix::AttnO => {
                (d, d)
            }
            TargetMatrix::MlpUp => (f, d),
            TargetMatrix::MlpDown => (d, f),
        }
    }

    /// Fresh adapter bound to this model. `B` is zero-initialized, so the
    /// returned adapter leaves every output unchanged until trained.
    pub fn init_adapter(&self, config: AdapterConfig, seed: u64) -> Result<AdapterState> {
        AdapterState::init(
            config,
            self.config.n_layers,
            |t| self.target_dims(t),
            self.fingerprint,
            seed,
        )
    }

    pub(crate) fn check_adapter(&self, adapter: &AdapterState) -> Result<()> {
        if adapter.base_fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                adapter: adapter.base_fingerprint,
                model: self.fingerprint,
            });
        }
        Ok(())
    }

    /// Fold the adapter delta into the base weights, producing a standalone
    /// model that behaves like `(self, adapter)`.
    pub fn merge_adapter(&self, adapter: &AdapterState) -> Result<TinyTransformer> {
        self.check_adapter(adapter)?;
        let mut merged = self.clone();
        for pair in &adapter.pairs {
            let delta = adapter.dense_delta(pair);
            let w = merged.layers[pair.layer].matrix_mut(pair.target);
            for (wi, di) in w.iter_mut().zip(delta.iter()) {
                *wi += di;
            }
        }
        merged.identifier = format!("{}+merged", self.identifier);
        merged.refresh_fingerprint();
        Ok(merged)
    }

    /// Greedy/TemperatureSampling decode with a per-layer KV cache. Logits at
    /// each step are numerically identical to a full forward pass.
    fn decode(
        &self,
        adapter: Option<&AdapterState>,
        prompt: &TokenSequence,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<TokenSequence> {
        if let Some(ad) = adapter {
            self.check_adapter(ad)?;
        }
        if temperature < 0.0 {
            return Err(Error::Config(format!("temperature {temperature} < 0")));
        }
        if max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        check_window(self.config.context_window, prompt.len(), 0, "sample prompt")?;
        for &t in &prompt.0 {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }

        let mut rng = Rng::new(seed);
        let mut state = crate::backend::forward::DecodeState::new(self);
        let mut logits = vec![0.0; self.config.vocab_size];

        // BOS then the prompt; only the last position's logits matter.
        self.decode_step(adapter, &mut state, BOS, 0, &mut logits);
        for (i, &tok) in prompt.0.iter().enumerate() {
            self.decode_step(adapter, &mut state, tok, i + 1, &mut logits);
        }

        let mut out = Vec::new();
        let window = self.config.context_window;
        while out.len() < max_tokens && prompt.len() + out.len() < window {
            let probs = softmax(&logits);
            let next = sample_from_probs(&probs, temperature, &mut rng) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            if out.len() == max_tokens || prompt.len() + out.len() >= window {
                break;
            }
            let pos = prompt.len() + out.len(); // position of the new token
            self.decode_step(adapter, &mut state, next, pos, &mut logits);
        }
        Ok(TokenSequence(out))
    }
}

impl LmBackend for TinyTransformer {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_window(&self) -> usize {
        self.config.context_window
    }

    fn hidden_dim(&self) -> usize {
        self.config.d_model
    }

    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.tokenize(text)
    }

    fn detokenize(&self, tokens: &TokenSequence) -> String {
        self.tokenizer.detokenize(tokens)
    }

    fn score_logprobs(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<Vec<f64>> {
        check_window(self.config.context_window, prefix.len(), target.len(), "score")?;
        if target.is_empty() {
            return Ok(Vec::new());
        }
        let fwd = self.forward_scoring(adapter, prefix, target)?;
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(target.len());
        for (j, &tok) in target.0.iter().enumerate() {
            // Padded position of the predictor for target j: BOS shifts by 1.
            let pred = prefix.len() + j;
            let row = &fwd.logits[pred * v..(pred + 1) * v];
            out.push(log_softmax(row)[tok as usize]);
        }
        Ok(out)
    }

    fn next_token_distributions(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<NextTokenDistribution> {
        check_window(self.config.context_window, prefix.len(), target.len(), "score")?;
        if target.is_empty() {
            return Ok(NextTokenDistribution { rows: Vec::new() });
        }
        let fwd = self.forward_scoring(adapter, prefix, target)?;
        let v = self.config.vocab_size;
        let rows = (0..target.len())
            .map(|j| {
                let pred = prefix.len() + j;
                softmax(&fwd.logits[pred * v..(pred + 1) * v])
            })
            .collect();
        Ok(NextTokenDistribution { rows })
    }

    fn sample(
        &self,
        adapter: Option<&AdapterState>,
        prompt: &TokenSequence,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<TokenSequence> {
        self.decode(adapter, prompt, temperature, max_tokens, seed)
    }

    fn hidden_at(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
        layer: usize,
    ) -> Result<HiddenStates> {
        if layer > self.config.n_layers {
            return Err(Error::InvalidLayer {
                layer,
                max: self.config.n_layers,
            });
        }
        check_window(self.config.context_window, prefix.len(), target.len(), "hidden")?;
        if target.is_empty() {
            return Ok(HiddenStates {
                layer,
                rows: Vec::new(),
            });
        }
        let fwd = self.forward_tokens_cached(adapter, &prefix.concat(target))?;
        let d = self.config.d_model;
        let stream = fwd.hidden_stream(layer);
        let rows = (0..target.len())
            .map(|j| {
                let pred = prefix.len() + j;
                stream[pred * d..(pred + 1) * d].to_vec()
            })
            .collect();
        Ok(HiddenStates { layer, rows })
    }
}

/// Gradients for every base weight, mirroring [`TinyTransformer`] layout.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tok_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gamma: Vec<f64>,
    pub lnf_beta: Vec<f64>,
    pub w_head: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &TinyTransformer) -> Self {
        let cfg = &model.config;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut lw = LayerWeights::zeros(cfg);
            lw.ln1_gamma.fill(0.0);
            lw.ln2_gamma.fill(0.0);
            lw.ln2_beta.fill(0.0);
            lw.ln1_beta.fill(0.0);
            layers.push(lw);
        }
        ModelGrads {
            tok_embed: vec![0.0; model.tok_embed.len()],
            pos_embed: vec![0.0; model.pos_embed.len()],
            layers,
            lnf_gamma: vec![0.0; cfg.d_model],
            lnf_beta: vec![0.0; cfg.d_model],
            w_head: vec![0.0; model.w_head.len()],
        }
    }

    /// Walk `(param, grad)` pairs in a fixed order, passing a stable flat
    /// index so optimizers can keep per-parameter state. The caller must
    /// refresh the model fingerprint afterwards.
    pub fn visit_params(
        &self,
        model: &mut TinyTransformer,
        mut f: impl FnMut(usize, &mut f64, f64),
    ) {
        let mut idx = 0usize;
        let mut apply = |w: &mut [f64], gw: &[f64]| {
            for (wi, gi) in w.iter_mut().zip(gw.iter()) {
                f(idx, wi, *gi);
                idx += 1;
            }
        };
        apply(&mut model.tok_embed, &self.tok_embed);
        apply(&mut model.pos_embed, &self.pos_embed);
        for (lw, lg) in model.layers.iter_mut().zip(self.layers.iter()) {
            apply(&mut lw.ln1_gamma, &lg.ln1_gamma);
            apply(&mut lw.ln1_beta, &lg.ln1_beta);
            apply(&mut lw.w_q, &lg.w_q);
            apply(&mut lw.w_k, &lg.w_k);
            apply(&mut lw.w_v, &lg.w_v);
            apply(&mut lw.w_o, &lg.w_o);
            apply(&mut lw.ln2_gamma, &lg.ln2_gamma);
            apply(&mut lw.ln2_beta, &lg.ln2_beta);
            apply(&mut lw.w_up, &lg.w_up);
            apply(&mut lw.b_up, &lg.b_up);
            apply(&mut lw.w_down, &lg.w_down);
            apply(&mut lw.b_down, &lg.b_down);
        }
        apply(&mut model.lnf_gamma, &self.lnf_gamma);
        apply(&mut model.lnf_beta, &self.lnf_beta);
        apply(&mut model.w_head, &self.w_head);
    }

    pub fn accumulate(&mut self, other: &ModelGrads, weight: f64) {
        fn acc(dst: &mut [f64], src: &[f64], w: f64) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += w * s;
            }
        }
        acc(&mut self.tok_embed, &other.tok_embed, weight);
        acc(&mut self.pos_embed, &other.pos_embed, weight);
        for (dl, sl) in self.layers.iter_mut().zip(other.layers.iter()) {
            acc(&mut dl.ln1_gamma, &sl.ln1_gamma, weight);
            acc(&mut dl.ln1_beta, &sl.ln1_beta, weight);
            acc(&mut dl.w_q, &sl.w_q, weight);
            acc(&mut dl.w_k, &sl.w_k, weight);
            acc(&mut dl.w_v, &sl.w_v, weight);
            acc(&mut dl.w_o, &sl.w_o, weight);
            acc(&mut dl.ln2_gamma, &sl.ln2_gamma, weight);
            acc(&mut dl.ln2_beta, &sl.ln2_beta, weight);
            acc(&mut dl.w_up, &sl.w_up, weight);
            acc(&mut dl.b_up, &sl.b_up, weight);
            acc(&mut dl.w_down, &sl.w_down, weight);
            acc(&mut dl.b_down, &sl.b_down, weight);
        }
        acc(&mut self.lnf_gamma, &other.lnf_gamma, weight);
        acc(&mut self.lnf_beta, &other.lnf_beta, weight);
        acc(&mut self.w_head, &other.w_head, weight);
    }
}
