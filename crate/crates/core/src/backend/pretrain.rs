//! Next-token pretraining of the reference transformer on tokenized episodes.
//!
//! Each episode becomes one training sequence `[BOS, e_0..e_{n-1}]` with
//! targets `[e_0..e_{n-1}, EOS]`. Gradients are averaged over an episode
//! batch and applied with Adam (default) or plain SGD.

use crate::backend::model::{ModelGrads, TinyTransformer};
use crate::backend::tokenizer::EOS;
use crate::backend::{log_softmax, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_adam: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            use_adam: true,
            grad_clip: Some(1.0),
        }
    }
}

/// Mean cross-entropy of `targets[t]` under `logits` row `t`, plus the logit
/// gradient of that mean.
pub(crate) fn cross_entropy_dlogits(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
) -> (f64, Vec<f64>) {
    weighted_cross_entropy_dlogits(logits, vocab, targets, None)
}

/// Weighted variant: position `t` contributes with weight `weights[t]`
/// (default 1), normalized by the total weight.
pub(crate) fn weighted_cross_entropy_dlogits(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    weights: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let t_len = targets.len();
    debug_assert_eq!(logits.len(), t_len * vocab);
    if let Some(w) = weights {
        debug_assert_eq!(w.len(), t_len);
    }
    let total_w: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => t_len as f64,
    };
    let inv_n = 1.0 / total_w;
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (t, &tok) in targets.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[t]);
        if w == 0.0 {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let lp = log_softmax(row);
        loss -= w * lp[tok as usize];
        let drow = &mut dlogits[t * vocab..(t + 1) * vocab];
        for v in 0..vocab {
            drow[v] = w * (lp[v].exp() - if v == tok as usize { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (loss * inv_n, dlogits)
}

pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut TinyTransformer, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let b1: f64 = 0.9;
        let b2: f64 = 0.999;
        let eps = 1e-8;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        grads.visit_params(model, |i, w, g| {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= lr * mh / (vh.sqrt() + eps);
        });
    }
}

fn grad_norm(grads: &ModelGrads) -> f64 {
    let mut sq = 0.0;
    let mut add = |v: &Vec<f64>| {
        for &x in v {
            sq += x * x;
        }
    };
    add(&grads.tok_embed);
    add(&grads.pos_embed);
    for lg in &grads.layers {
        add(&lg.ln1_gamma);
        add(&lg.ln1_beta);
        add(&lg.w_q);
        add(&lg.w_k);
        add(&lg.w_v);
        add(&lg.w_o);
        add(&lg.ln2_gamma);
        add(&lg.ln2_beta);
        add(&lg.w_up);
        add(&lg.b_up);
        add(&lg.w_down);
        add(&lg.b_down);
    }
    add(&grads.lnf_gamma);
    add(&grads.lnf_beta);
    add(&grads.w_head);
    sq.sqrt()
}

fn scale_grads(grads: &mut ModelGrads, s: f64) {
    let mul = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x *= s;
        }
    };
    mul(&mut grads.tok_embed);
    mul(&mut grads.pos_embed);
    for lg in &mut grads.layers {
        mul(&mut lg.ln1_gamma);
        mul(&mut lg.ln1_beta);
        mul(&mut lg.w_q);
        mul(&mut lg.w_k);
        mul(&mut lg.w_v);
        mul(&mut lg.w_o);
        mul(&mut lg.ln2_gamma);
        mul(&mut lg.ln2_beta);
        mul(&mut lg.w_up);
        mul(&mut lg.b_up);
        mul(&mut lg.w_down);
        mul(&mut lg.b_down);
    }
    mul(&mut grads.lnf_gamma);
    mul(&mut grads.lnf_beta);
    mul(&mut grads.w_head);
}

/// Train in place; returns the mean training loss per epoch.
pub fn pretrain(
    model: &mut TinyTransformer,
    episodes: &[TokenSequence],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    pretrain_weighted(model, episodes, None, cfg)
}

/// Like [`pretrain`], with optional per-position loss weights per episode.
/// `weights[i]`, when present, must cover the episode's targets (its tokens
/// followed by the end marker, so `episodes[i].len() + 1` entries).
pub fn pretrain_weighted(
    model: &mut TinyTransformer,
    episodes: &[TokenSequence],
    weights: Option<&[Vec<f64>]>,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("pretraining episode list".into()));
    }
    for (i, ep) in episodes.iter().enumerate() {
        if ep.is_empty() {
            return Err(Error::EmptyInput(format!("pretraining episode {i}")));
        }
        if ep.len() > model.config.context_window {
            return Err(Error::WindowOverflow {
                got: ep.len(),
                window: model.config.context_window,
                detail: format!("pretraining episode {i}"),
            });
        }
        if let Some(ws) = weights {
            if ws[i].len() != ep.len() + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "episode {i}: {} weights for {} targets",
                    ws[i].len(),
                    ep.len() + 1
                )));
            }
        }
    }

    let n_params = model.config.param_count();
    let mut adam = cfg.use_adam.then(|| AdamState::new(n_params));
    let vocab = model.config.vocab_size;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::new(derive_seed(cfg.seed, "pretrain-epoch", epoch as u64));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut n_seqs = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_grads = ModelGrads::zeros_like(model);
            let inv_batch = 1.0 / chunk.len() as f64;
            for &ei in chunk {
                let ep = &episodes[ei];
                let fwd = model.forward_full(&ep.0, None, None)?;
                let mut targets = ep.0.clone();
                targets.push(EOS);
                let (loss, dlogits) = weighted_cross_entropy_dlogits(
                    &fwd.logits,
                    vocab,
                    &targets,
                    weights.map(|w| w[ei].as_slice()),
                );
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        value: loss,
                        epoch,
                        batch: ei,
                    });
                }
                epoch_loss += loss;
                n_seqs += 1;
                let g = model.backward_model(&fwd, &dlogits);
                batch_grads.accumulate(&g, inv_batch);
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grad_norm(&batch_grads);
                if norm > clip {
                    scale_grads(&mut batch_grads, clip / norm);
                }
            }
            match adam.as_mut() {
                Some(a) => a.step(model, &batch_grads, cfg.learning_rate),
                None => batch_grads.visit_params(model, |_, w, g| *w -= cfg.learning_rate * g),
            }
        }
        epoch_losses.push(epoch_loss / n_seqs as f64);
    }
    model.refresh_fingerprint();
    Ok(epoch_losses)
}
