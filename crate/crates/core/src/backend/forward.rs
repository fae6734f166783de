//! Forward pass (batch-of-one sequence) and incremental decode.
//!
//! The cached forward keeps every intermediate needed by the hand-written
//! backward pass except attention probabilities, which are cheap to
//! recompute row by row. The incremental decode path performs the same
//! floating-point operations in the same order, so full and step-wise
//! evaluation agree bitwise.

use crate::backend::adapter::AdapterState;
use crate::backend::model::TinyTransformer;
use crate::backend::{TokenSequence, BOS};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// `y[t, o] = sum_i x[t, i] * w[o, i]` (+ optional bias).
pub(crate) fn linear(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    t_len: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; t_len * d_out];
    for t in 0..t_len {
        let xr = &x[t * d_in..(t + 1) * d_in];
        let yr = &mut y[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            yr[o] = dot(&w[o * d_in..(o + 1) * d_in], xr);
        }
        if let Some(b) = bias {
            for o in 0..d_out {
                yr[o] += b[o];
            }
        }
    }
    y
}

pub(crate) fn softmax_inplace(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Per-position layer norm. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    t_len: usize,
    d: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; t_len * d];
    let mut xhat = vec![0.0; t_len * d];
    let mut rstd = vec![0.0; t_len];
    for t in 0..t_len {
        let xr = &x[t * d..(t + 1) * d];
        let mut mean = 0.0;
        for &v in xr {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let h = (xr[i] - mean) * r;
            xhat[t * d + i] = h;
            y[t * d + i] = gamma[i] * h + beta[i];
        }
    }
    (y, xhat, rstd)
}

/// Cached adapter intermediates for one adapted site.
#[derive(Debug, Clone)]
pub(crate) struct LoraSite {
    pub pair_index: usize,
    /// `[T, rank]` down-projected activations.
    pub z: Vec<f64>,
    /// Inverted-dropout multiplier per input element (`0` or `1/keep`);
    /// `None` when dropout was inactive for this forward.
    pub drop_factor: Option<Vec<f64>>,
}

impl LoraSite {
    /// Site input as seen by the adapter (dropout applied).
    pub(crate) fn effective_input<'a>(&self, x: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
        match &self.drop_factor {
            None => std::borrow::Cow::Borrowed(x),
            Some(f) => {
                std::borrow::Cow::Owned(x.iter().zip(f.iter()).map(|(a, b)| a * b).collect())
            }
        }
    }
}

/// Apply one adapter pair on top of a base linear output.
/// Mutates `y += (alpha/rank) * (drop(x) A^T) B^T` and returns the cache.
fn lora_apply(
    adapter: &AdapterState,
    pair_index: usize,
    x: &[f64],
    y: &mut [f64],
    t_len: usize,
    dropout_rng: &mut Option<&mut Rng>,
) -> LoraSite {
    let pair = &adapter.pairs[pair_index];
    let r = adapter.config.rank;
    let scale = adapter.scale();
    let (d_in, d_out) = (pair.in_dim, pair.out_dim);
    let p = adapter.config.dropout;

    let drop_factor: Option<Vec<f64>> = match dropout_rng {
        Some(rng) if p > 0.0 => {
            let inv_keep = 1.0 / (1.0 - p);
            Some(
                (0..t_len * d_in)
                    .map(|_| if rng.next_f64() >= p { inv_keep } else { 0.0 })
                    .collect(),
            )
        }
        _ => None,
    };
    let x_eff: std::borrow::Cow<'_, [f64]> = match &drop_factor {
        None => std::borrow::Cow::Borrowed(x),
        Some(f) => std::borrow::Cow::Owned(x.iter().zip(f.iter()).map(|(a, b)| a * b).collect()),
    };

    let mut z = vec![0.0; t_len * r];
    for t in 0..t_len {
        let xr = &x_eff[t * d_in..(t + 1) * d_in];
        for rho in 0..r {
            z[t * r + rho] = dot(&pair.a[rho * d_in..(rho + 1) * d_in], xr);
        }
    }
    for t in 0..t_len {
        let zr = &z[t * r..(t + 1) * r];
        let yr = &mut y[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            let acc = dot(&pair.b[o * r..(o + 1) * r], zr);
            yr[o] += scale * acc;
        }
    }
    LoraSite {
        pair_index,
        z,
        drop_factor,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub xhat1: Vec<f64>,
    pub rstd1: Vec<f64>,
    pub u1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub attn_c: Vec<f64>,
    pub xhat2: Vec<f64>,
    pub rstd2: Vec<f64>,
    pub u2: Vec<f64>,
    pub a_pre: Vec<f64>,
    pub lora: Vec<LoraSite>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    pub layers: Vec<LayerCache>,
    pub x_final: Vec<f64>,
    pub xhat_f: Vec<f64>,
    pub rstd_f: Vec<f64>,
    pub hf: Vec<f64>,
}

/// Result of a full forward pass over `[BOS, tokens...]`.
#[derive(Debug, Clone)]
pub struct Forward {
    /// BOS followed by the input tokens.
    pub padded: Vec<u32>,
    /// `[padded.len(), vocab]` row-major logits.
    pub logits: Vec<f64>,
    pub(crate) cache: Cache,
}

impl Forward {
    pub fn seq_len(&self) -> usize {
        self.padded.len()
    }

    /// Residual stream after block `layer`; `layer == n_layers` is the
    /// post-final-norm stream feeding the head.
    pub(crate) fn hidden_stream(&self, layer: usize) -> &[f64] {
        let n = self.cache.layers.len();
        if layer == n {
            &self.cache.hf
        } else if layer + 1 == n {
            &self.cache.x_final
        } else {
            &self.cache.layers[layer + 1].x_in
        }
    }
}

impl TinyTransformer {
    /// Forward over `[BOS ∥ tokens]` with the full backward cache.
    /// `dropout_rng` activates adapter dropout (training forwards only).
    pub(crate) fn forward_full(
        &self,
        tokens: &[u32],
        adapter: Option<&AdapterState>,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Forward> {
        if let Some(ad) = adapter {
            self.check_adapter(ad)?;
        }
        if tokens.len() > self.config.context_window {
            return Err(Error::WindowOverflow {
                got: tokens.len(),
                window: self.config.context_window,
                detail: "forward".into(),
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }

        let cfg = &self.config;
        let d = cfg.d_model;
        let mut padded = Vec::with_capacity(tokens.len() + 1);
        padded.push(BOS);
        padded.extend_from_slice(tokens);
        let t_len = padded.len();

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in padded.iter().enumerate() {
            let e = &self.tok_embed[tok as usize * d..(tok as usize + 1) * d];
            let p = &self.pos_embed[t * d..(t + 1) * d];
            let xr = &mut x[t * d..(t + 1) * d];
            for i in 0..d {
                xr[i] = e[i] + p[i];
            }
        }

        let mut layer_caches = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in self.layers.iter().enumerate() {
            let x_in = x.clone();
            let (u1, xhat1, rstd1) =
                layer_norm(&x_in, &lw.ln1_gamma, &lw.ln1_beta, t_len, d, cfg.ln_eps);

            let mut lora = Vec::new();
            let mut q = linear(&u1, &lw.w_q, None, t_len, d, d);
            let mut k = linear(&u1, &lw.w_k, None, t_len, d, d);
            let mut v = linear(&u1, &lw.w_v, None, t_len, d, d);
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer != l {
                        continue;
                    }
                    use crate::backend::adapter::TargetMatrix::*;
                    let site = match pair.target {
                        AttnQ => lora_apply(ad, pi, &u1, &mut q, t_len, &mut dropout_rng),
                        AttnK => lora_apply(ad, pi, &u1, &mut k, t_len, &mut dropout_rng),
                        AttnV => lora_apply(ad, pi, &u1, &mut v, t_len, &mut dropout_rng),
                        _ => continue,
                    };
                    lora.push(site);
                }
            }

            let attn_c = causal_attention(&q, &k, &v, t_len, d, cfg.n_heads);

            let mut attn_out = linear(&attn_c, &lw.w_o, None, t_len, d, d);
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer == l && pair.target == crate::backend::adapter::TargetMatrix::AttnO
                    {
                        lora.push(lora_apply(ad, pi, &attn_c, &mut attn_out, t_len, &mut dropout_rng));
                    }
                }
            }
            for i in 0..t_len * d {
                x[i] += attn_out[i];
            }

            let (u2, xhat2, rstd2) =
                layer_norm(&x, &lw.ln2_gamma, &lw.ln2_beta, t_len, d, cfg.ln_eps);
            let mut a_pre = linear(&u2, &lw.w_up, Some(&lw.b_up), t_len, d, cfg.d_ff);
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer == l && pair.target == crate::backend::adapter::TargetMatrix::MlpUp
                    {
                        lora.push(lora_apply(ad, pi, &u2, &mut a_pre, t_len, &mut dropout_rng));
                    }
                }
            }
            let g: Vec<f64> = a_pre.iter().map(|&a| silu(a)).collect();
            let mut m_out = linear(&g, &lw.w_down, Some(&lw.b_down), t_len, cfg.d_ff, d);
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer == l
                        && pair.target == crate::backend::adapter::TargetMatrix::MlpDown
                    {
                        lora.push(lora_apply(ad, pi, &g, &mut m_out, t_len, &mut dropout_rng));
                    }
                }
            }
            for i in 0..t_len * d {
                x[i] += m_out[i];
            }

            layer_caches.push(LayerCache {
                x_in,
                xhat1,
                rstd1,
                u1,
                q,
                k,
                v,
                attn_c,
                xhat2,
                rstd2,
                u2,
                a_pre,
                lora,
            });
        }

        let x_final = x;
        let (hf, xhat_f, rstd_f) =
            layer_norm(&x_final, &self.lnf_gamma, &self.lnf_beta, t_len, d, cfg.ln_eps);
        let logits = linear(&hf, &self.w_head, None, t_len, d, cfg.vocab_size);

        Ok(Forward {
            padded,
            logits,
            cache: Cache {
                layers: layer_caches,
                x_final,
                xhat_f,
                rstd_f,
                hf,
            },
        })
    }

    pub(crate) fn forward_scoring(
        &self,
        adapter: Option<&AdapterState>,
        prefix: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<Forward> {
        let all = prefix.concat(target);
        self.forward_full(&all.0, adapter, None)
    }

    pub(crate) fn forward_tokens_cached(
        &self,
        adapter: Option<&AdapterState>,
        tokens: &TokenSequence,
    ) -> Result<Forward> {
        self.forward_full(&tokens.0, adapter, None)
    }
}

/// Multi-head causal self-attention; returns the concatenated per-head
/// context vectors (pre output-projection).
pub(crate) fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t_len: usize,
    d: usize,
    n_heads: usize,
) -> Vec<f64> {
    let hd = d / n_heads;
    let inv = 1.0 / (hd as f64).sqrt();
    let mut c = vec![0.0; t_len * d];
    let mut scores = vec![0.0; t_len];
    for h in 0..n_heads {
        let off = h * hd;
        for t in 0..t_len {
            let qr = &q[t * d + off..t * d + off + hd];
            for s in 0..=t {
                scores[s] = dot(qr, &k[s * d + off..s * d + off + hd]) * inv;
            }
            softmax_inplace(&mut scores[..=t]);
            let cr = &mut c[t * d + off..t * d + off + hd];
            for s in 0..=t {
                axpy(scores[s], &v[s * d + off..s * d + off + hd], cr);
            }
        }
    }
    c
}

/// Per-layer key/value rows accumulated during incremental decoding.
pub(crate) struct DecodeState {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl DecodeState {
    pub(crate) fn new(model: &TinyTransformer) -> Self {
        DecodeState {
            k: vec![Vec::new(); model.config.n_layers],
            v: vec![Vec::new(); model.config.n_layers],
        }
    }
}

fn matvec(w: &[f64], x: &[f64], d_in: usize, d_out: usize, y: &mut [f64]) {
    for o in 0..d_out {
        y[o] = dot(&w[o * d_in..(o + 1) * d_in], x);
    }
}

fn lora_matvec(adapter: &AdapterState, pair_index: usize, x: &[f64], y: &mut [f64]) {
    let pair = &adapter.pairs[pair_index];
    let r = adapter.config.rank;
    let scale = adapter.scale();
    let mut z = vec![0.0; r];
    for rho in 0..r {
        z[rho] = dot(&pair.a[rho * pair.in_dim..(rho + 1) * pair.in_dim], x);
    }
    for o in 0..pair.out_dim {
        let acc = dot(&pair.b[o * r..(o + 1) * r], &z);
        y[o] += scale * acc;
    }
}

impl TinyTransformer {
    /// One incremental step: consume `token` at absolute position `pos`,
    /// extend the KV cache, and write next-token logits.
    pub(crate) fn decode_step(
        &self,
        adapter: Option<&AdapterState>,
        state: &mut DecodeState,
        token: u32,
        pos: usize,
        logits_out: &mut [f64],
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let inv = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; d];
        {
            let e = &self.tok_embed[token as usize * d..(token as usize + 1) * d];
            let p = &self.pos_embed[pos * d..(pos + 1) * d];
            for i in 0..d {
                x[i] = e[i] + p[i];
            }
        }

        let mut u = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut buf_d = vec![0.0; d];
        let mut a_pre = vec![0.0; cfg.d_ff];
        let mut g = vec![0.0; cfg.d_ff];

        for (l, lw) in self.layers.iter().enumerate() {
            ln_row(&x, &lw.ln1_gamma, &lw.ln1_beta, cfg.ln_eps, &mut u);
            matvec(&lw.w_q, &u, d, d, &mut q);
            let mut k_new = vec![0.0; d];
            let mut v_new = vec![0.0; d];
            matvec(&lw.w_k, &u, d, d, &mut k_new);
            matvec(&lw.w_v, &u, d, d, &mut v_new);
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer != l {
                        continue;
                    }
                    use crate::backend::adapter::TargetMatrix::*;
                    match pair.target {
                        AttnQ => lora_matvec(ad, pi, &u, &mut q),
                        AttnK => lora_matvec(ad, pi, &u, &mut k_new),
                        AttnV => lora_matvec(ad, pi, &u, &mut v_new),
                        _ => {}
                    }
                }
            }
            state.k[l].extend_from_slice(&k_new);
            state.v[l].extend_from_slice(&v_new);
            let t = state.k[l].len() / d - 1;
            debug_assert_eq!(t, pos);

            let mut c = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for h in 0..cfg.n_heads {
                let off = h * hd;
                let qr = &q[off..off + hd];
                for s in 0..=t {
                    scores[s] = dot(qr, &state.k[l][s * d + off..s * d + off + hd]) * inv;
                }
                softmax_inplace(&mut scores[..=t]);
                let cr = &mut c[off..off + hd];
                for s in 0..=t {
                    axpy(scores[s], &state.v[l][s * d + off..s * d + off + hd], cr);
                }
            }

            matvec(&lw.w_o, &c, d, d, &mut buf_d);
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer == l && pair.target == crate::backend::adapter::TargetMatrix::AttnO
                    {
                        lora_matvec(ad, pi, &c, &mut buf_d);
                    }
                }
            }
            for i in 0..d {
                x[i] += buf_d[i];
            }

            ln_row(&x, &lw.ln2_gamma, &lw.ln2_beta, cfg.ln_eps, &mut u);
            matvec(&lw.w_up, &u, d, cfg.d_ff, &mut a_pre);
            for (ai, bi) in a_pre.iter_mut().zip(lw.b_up.iter()) {
                *ai += bi;
            }
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer == l && pair.target == crate::backend::adapter::TargetMatrix::MlpUp
                    {
                        lora_matvec(ad, pi, &u, &mut a_pre);
                    }
                }
            }
            for i in 0..cfg.d_ff {
                g[i] = silu(a_pre[i]);
            }
            matvec(&lw.w_down, &g, cfg.d_ff, d, &mut buf_d);
            for (mi, bi) in buf_d.iter_mut().zip(lw.b_down.iter()) {
                *mi += bi;
            }
            if let Some(ad) = adapter {
                for (pi, pair) in ad.pairs.iter().enumerate() {
                    if pair.layer == l
                        && pair.target == crate::backend::adapter::TargetMatrix::MlpDown
                    {
                        lora_matvec(ad, pi, &g, &mut buf_d);
                    }
                }
            }
            for i in 0..d {
                x[i] += buf_d[i];
            }
        }

        ln_row(&x, &self.lnf_gamma, &self.lnf_beta, cfg.ln_eps, &mut u);
        matvec(&self.w_head, &u, d, cfg.vocab_size, logits_out);
    }
}

fn ln_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) {
    let d = x.len();
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= d as f64;
    let mut var = 0.0;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= d as f64;
    let r = 1.0 / (var + eps).sqrt();
    for i in 0..d {
        out[i] = gamma[i] * ((x[i] - mean) * r) + beta[i];
    }
}
