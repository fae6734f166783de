//! Hand-written backward pass.
//!
//! Two entry points share one implementation: [`TinyTransformer::backward_adapter`]
//! accumulates gradients only into low-rank factor pairs (base weights frozen),
//! [`TinyTransformer::backward_model`] accumulates into every base weight
//! (pretraining, no adapter). Attention probabilities are recomputed row by
//! row instead of being cached.
//!
//! Gradient can enter from the logits, from the hidden stream at a chosen
//! layer (for hidden-state losses), or both.

use crate::backend::adapter::{AdapterGrads, AdapterState, TargetMatrix};
use crate::backend::forward::{dot, silu, silu_deriv, softmax_inplace, Forward, LoraSite};
use crate::backend::model::{ModelGrads, TinyTransformer};

/// `dx[t, i] += sum_o dy[t, o] * w[o, i]`
fn accum_dx(dy: &[f64], w: &[f64], t_len: usize, d_in: usize, d_out: usize, dx: &mut [f64]) {
    for t in 0..t_len {
        let dyr = &dy[t * d_out..(t + 1) * d_out];
        let dxr = &mut dx[t * d_in..(t + 1) * d_in];
        for o in 0..d_out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                dxr[i] += g * wr[i];
            }
        }
    }
}

/// `dw[o, i] += sum_t dy[t, o] * x[t, i]`
fn accum_dw(dy: &[f64], x: &[f64], t_len: usize, d_in: usize, d_out: usize, dw: &mut [f64]) {
    for t in 0..t_len {
        let dyr = &dy[t * d_out..(t + 1) * d_out];
        let xr = &x[t * d_in..(t + 1) * d_in];
        for o in 0..d_out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let dwr = &mut dw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                dwr[i] += g * xr[i];
            }
        }
    }
}

fn accum_db(dy: &[f64], t_len: usize, d_out: usize, db: &mut [f64]) {
    for t in 0..t_len {
        for o in 0..d_out {
            db[o] += dy[t * d_out + o];
        }
    }
}

/// Layer-norm backward. Returns `dx`; accumulates `dgamma`/`dbeta` when given.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    t_len: usize,
    d: usize,
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; t_len * d];
    for t in 0..t_len {
        let dyr = &dy[t * d..(t + 1) * d];
        let xhr = &xhat[t * d..(t + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dxh = dyr[i] * gamma[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhr[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = rstd[t];
        let dxr = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            let dxh = dyr[i] * gamma[i];
            dxr[i] = r * (dxh - mean_dxhat - xhr[i] * mean_dxhat_xhat);
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * xhr[i];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for i in 0..d {
                db[i] += dyr[i];
            }
        }
    }
    dx
}

/// Backward through one adapter site: accumulates factor gradients and the
/// gradient w.r.t. the site input (respecting the stored dropout mask).
fn lora_backward(
    adapter: &AdapterState,
    site: &LoraSite,
    x: &[f64],
    dy: &[f64],
    t_len: usize,
    grads: Option<&mut AdapterGrads>,
    dx: &mut [f64],
) {
    let pair = &adapter.pairs[site.pair_index];
    let r = adapter.config.rank;
    let scale = adapter.scale();
    let (d_in, d_out) = (pair.in_dim, pair.out_dim);

    // dz[t, rho] = scale * sum_o dy[t, o] * B[o, rho]
    let mut dz = vec![0.0; t_len * r];
    for t in 0..t_len {
        let dyr = &dy[t * d_out..(t + 1) * d_out];
        let dzr = &mut dz[t * r..(t + 1) * r];
        for o in 0..d_out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let br = &pair.b[o * r..(o + 1) * r];
            for rho in 0..r {
                dzr[rho] += scale * g * br[rho];
            }
        }
    }

    if let Some(gr) = grads {
        let fg = &mut gr.pairs[site.pair_index];
        // dB[o, rho] += scale * sum_t dy[t, o] * z[t, rho]
        for t in 0..t_len {
            let dyr = &dy[t * d_out..(t + 1) * d_out];
            let zr = &site.z[t * r..(t + 1) * r];
            for o in 0..d_out {
                let g = dyr[o];
                if g == 0.0 {
                    continue;
                }
                let bgr = &mut fg.b[o * r..(o + 1) * r];
                for rho in 0..r {
                    bgr[rho] += scale * g * zr[rho];
                }
            }
        }
        // dA[rho, i] += sum_t dz[t, rho] * x_eff[t, i]
        let x_eff = site.effective_input(x);
        for t in 0..t_len {
            let dzr = &dz[t * r..(t + 1) * r];
            let xr = &x_eff[t * d_in..(t + 1) * d_in];
            for rho in 0..r {
                let g = dzr[rho];
                if g == 0.0 {
                    continue;
                }
                let agr = &mut fg.a[rho * d_in..(rho + 1) * d_in];
                for i in 0..d_in {
                    agr[i] += g * xr[i];
                }
            }
        }
    }

    // dx_eff[t, i] = sum_rho dz[t, rho] * A[rho, i], then undo dropout scaling.
    match &site.drop_factor {
        None => {
            for t in 0..t_len {
                let dzr = &dz[t * r..(t + 1) * r];
                let dxr = &mut dx[t * d_in..(t + 1) * d_in];
                for rho in 0..r {
                    let g = dzr[rho];
                    if g == 0.0 {
                        continue;
                    }
                    let ar = &pair.a[rho * d_in..(rho + 1) * d_in];
                    for i in 0..d_in {
                        dxr[i] += g * ar[i];
                    }
                }
            }
        }
        Some(factor) => {
            for t in 0..t_len {
                let dzr = &dz[t * r..(t + 1) * r];
                let dxr = &mut dx[t * d_in..(t + 1) * d_in];
                let fr = &factor[t * d_in..(t + 1) * d_in];
                for rho in 0..r {
                    let g = dzr[rho];
                    if g == 0.0 {
                        continue;
                    }
                    let ar = &pair.a[rho * d_in..(rho + 1) * d_in];
                    for i in 0..d_in {
                        dxr[i] += g * ar[i] * fr[i];
                    }
                }
            }
        }
    }
}

/// Attention-core backward; recomputes softmax rows from cached `q`/`k`.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dc: &[f64],
    t_len: usize,
    d: usize,
    n_heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let hd = d / n_heads;
    let inv = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; t_len];
    let mut dp = vec![0.0; t_len];
    for h in 0..n_heads {
        let off = h * hd;
        for t in 0..t_len {
            let qr = &q[t * d + off..t * d + off + hd];
            for s in 0..=t {
                probs[s] = dot(qr, &k[s * d + off..s * d + off + hd]) * inv;
            }
            softmax_inplace(&mut probs[..=t]);

            let dcr = &dc[t * d + off..t * d + off + hd];
            let mut dot_pp = 0.0;
            for s in 0..=t {
                dp[s] = dot(dcr, &v[s * d + off..s * d + off + hd]);
                dot_pp += probs[s] * dp[s];
            }
            for s in 0..=t {
                let ds = probs[s] * (dp[s] - dot_pp) * inv;
                let kr = &k[s * d + off..s * d + off + hd];
                let dqr = &mut dq[t * d + off..t * d + off + hd];
                for i in 0..hd {
                    dqr[i] += ds * kr[i];
                }
                let qr = &q[t * d + off..t * d + off + hd];
                let dkr = &mut dk[s * d + off..s * d + off + hd];
                for i in 0..hd {
                    dkr[i] += ds * qr[i];
                }
                let dvr = &mut dv[s * d + off..s * d + off + hd];
                for i in 0..hd {
                    dvr[i] += probs[s] * dcr[i];
                }
            }
        }
    }
}

impl TinyTransformer {
    /// Adapter-factor gradients for one cached forward. `d_logits` is
    /// `[T, vocab]` (zeros where the loss does not touch a position) and
    /// `d_hidden` optionally injects gradient into the hidden stream at a
    /// layer, matching `hidden_at` indexing.
    pub fn backward_adapter(
        &self,
        fwd: &Forward,
        adapter: &AdapterState,
        d_logits: &[f64],
        d_hidden: Option<(usize, &[f64])>,
    ) -> AdapterGrads {
        let mut grads = AdapterGrads::zeros_like(adapter);
        self.backward_impl(fwd, Some(adapter), d_logits, d_hidden, None, Some(&mut grads));
        grads
    }

    /// Full-model gradients (no adapter), used by pretraining.
    pub fn backward_model(&self, fwd: &Forward, d_logits: &[f64]) -> ModelGrads {
        let mut grads = ModelGrads::zeros_like(self);
        self.backward_impl(fwd, None, d_logits, None, Some(&mut grads), None);
        grads
    }

    fn backward_impl(
        &self,
        fwd: &Forward,
        adapter: Option<&AdapterState>,
        d_logits: &[f64],
        d_hidden: Option<(usize, &[f64])>,
        mut model_grads: Option<&mut ModelGrads>,
        mut adapter_grads: Option<&mut AdapterGrads>,
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let t_len = fwd.seq_len();
        let n_layers = cfg.n_layers;
        debug_assert_eq!(d_logits.len(), t_len * cfg.vocab_size);

        // Head.
        let mut dhf = vec![0.0; t_len * d];
        accum_dx(d_logits, &self.w_head, t_len, d, cfg.vocab_size, &mut dhf);
        if let Some(mg) = model_grads.as_deref_mut() {
            accum_dw(d_logits, &fwd.cache.hf, t_len, d, cfg.vocab_size, &mut mg.w_head);
        }
        if let Some((layer, dh)) = d_hidden {
            if layer == n_layers {
                debug_assert_eq!(dh.len(), t_len * d);
                for i in 0..t_len * d {
                    dhf[i] += dh[i];
                }
            }
        }

        // Final norm.
        let mut dx = match model_grads.as_deref_mut() {
            Some(mg) => layer_norm_backward(
                &dhf,
                &fwd.cache.xhat_f,
                &fwd.cache.rstd_f,
                &self.lnf_gamma,
                t_len,
                d,
                Some(&mut mg.lnf_gamma),
                Some(&mut mg.lnf_beta),
            ),
            None => layer_norm_backward(
                &dhf,
                &fwd.cache.xhat_f,
                &fwd.cache.rstd_f,
                &self.lnf_gamma,
                t_len,
                d,
                None,
                None,
            ),
        };
        if let Some((layer, dh)) = d_hidden {
            if layer == n_layers - 1 {
                for i in 0..t_len * d {
                    dx[i] += dh[i];
                }
            }
        }

        for l in (0..n_layers).rev() {
            let lw = &self.layers[l];
            let lc = &fwd.cache.layers[l];

            // ---- MLP block ----
            let dm = &dx; // residual: x_out = x_mid + m
            let g: Vec<f64> = lc.a_pre.iter().map(|&a| silu(a)).collect();

            let mut dg = vec![0.0; t_len * cfg.d_ff];
            accum_dx(dm, &lw.w_down, t_len, cfg.d_ff, d, &mut dg);
            if let Some(mg) = model_grads.as_deref_mut() {
                let lgrad = &mut mg.layers[l];
                accum_dw(dm, &g, t_len, cfg.d_ff, d, &mut lgrad.w_down);
                accum_db(dm, t_len, d, &mut lgrad.b_down);
            }
            if let Some(ad) = adapter {
                for site in &lc.lora {
                    if ad.pairs[site.pair_index].target == TargetMatrix::MlpDown {
                        lora_backward(ad, site, &g, dm, t_len, adapter_grads.as_deref_mut(), &mut dg);
                    }
                }
            }

            let mut da = vec![0.0; t_len * cfg.d_ff];
            for i in 0..t_len * cfg.d_ff {
                da[i] = dg[i] * silu_deriv(lc.a_pre[i]);
            }

            let mut du2 = vec![0.0; t_len * d];
            accum_dx(&da, &lw.w_up, t_len, d, cfg.d_ff, &mut du2);
            if let Some(mg) = model_grads.as_deref_mut() {
                let lgrad = &mut mg.layers[l];
                accum_dw(&da, &lc.u2, t_len, d, cfg.d_ff, &mut lgrad.w_up);
                accum_db(&da, t_len, cfg.d_ff, &mut lgrad.b_up);
            }
            if let Some(ad) = adapter {
                for site in &lc.lora {
                    if ad.pairs[site.pair_index].target == TargetMatrix::MlpUp {
                        lora_backward(ad, site, &lc.u2, &da, t_len, adapter_grads.as_deref_mut(), &mut du2);
                    }
                }
            }

            let dx_mid_from_ln2 = match model_grads.as_deref_mut() {
                Some(mg) => {
                    let lgrad = &mut mg.layers[l];
                    layer_norm_backward(
                        &du2,
                        &lc.xhat2,
                        &lc.rstd2,
                        &lw.ln2_gamma,
                        t_len,
                        d,
                        Some(&mut lgrad.ln2_gamma),
                        Some(&mut lgrad.ln2_beta),
                    )
                }
                None => layer_norm_backward(
                    &du2, &lc.xhat2, &lc.rstd2, &lw.ln2_gamma, t_len, d, None, None,
                ),
            };
            // dx currently holds d(x_out); x_mid gets residual plus the norm path.
            let mut dx_mid = dx;
            for i in 0..t_len * d {
                dx_mid[i] += dx_mid_from_ln2[i];
            }

            // ---- Attention block ----
            let d_attn_out = &dx_mid;
            let mut dc = vec![0.0; t_len * d];
            accum_dx(d_attn_out, &lw.w_o, t_len, d, d, &mut dc);
            if let Some(mg) = model_grads.as_deref_mut() {
                accum_dw(d_attn_out, &lc.attn_c, t_len, d, d, &mut mg.layers[l].w_o);
            }
            if let Some(ad) = adapter {
                for site in &lc.lora {
                    if ad.pairs[site.pair_index].target == TargetMatrix::AttnO {
                        lora_backward(
                            ad, site, &lc.attn_c, d_attn_out, t_len,
                            adapter_grads.as_deref_mut(), &mut dc,
                        );
                    }
                }
            }

            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            attention_backward(
                &lc.q, &lc.k, &lc.v, &dc, t_len, d, cfg.n_heads, &mut dq, &mut dk, &mut dv,
            );

            let mut du1 = vec![0.0; t_len * d];
            accum_dx(&dq, &lw.w_q, t_len, d, d, &mut du1);
            accum_dx(&dk, &lw.w_k, t_len, d, d, &mut du1);
            accum_dx(&dv, &lw.w_v, t_len, d, d, &mut du1);
            if let Some(mg) = model_grads.as_deref_mut() {
                let lgrad = &mut mg.layers[l];
                accum_dw(&dq, &lc.u1, t_len, d, d, &mut lgrad.w_q);
                accum_dw(&dk, &lc.u1, t_len, d, d, &mut lgrad.w_k);
                accum_dw(&dv, &lc.u1, t_len, d, d, &mut lgrad.w_v);
            }
            if let Some(ad) = adapter {
                for site in &lc.lora {
                    let dy = match ad.pairs[site.pair_index].target {
                        TargetMatrix::AttnQ => &dq,
                        TargetMatrix::AttnK => &dk,
                        TargetMatrix::AttnV => &dv,
                        _ => continue,
                    };
                    lora_backward(ad, site, &lc.u1, dy, t_len, adapter_grads.as_deref_mut(), &mut du1);
                }
            }

            let dx_in_from_ln1 = match model_grads.as_deref_mut() {
                Some(mg) => {
                    let lgrad = &mut mg.layers[l];
                    layer_norm_backward(
                        &du1,
                        &lc.xhat1,
                        &lc.rstd1,
                        &lw.ln1_gamma,
                        t_len,
                        d,
                        Some(&mut lgrad.ln1_gamma),
                        Some(&mut lgrad.ln1_beta),
                    )
                }
                None => layer_norm_backward(
                    &du1, &lc.xhat1, &lc.rstd1, &lw.ln1_gamma, t_len, d, None, None,
                ),
            };
            let mut dx_in = dx_mid;
            for i in 0..t_len * d {
                dx_in[i] += dx_in_from_ln1[i];
            }

            if let Some((layer, dh)) = d_hidden {
                if l >= 1 && layer == l - 1 {
                    for i in 0..t_len * d {
                        dx_in[i] += dh[i];
                    }
                }
            }
            dx = dx_in;
        }

        // Embeddings.
        if let Some(mg) = model_grads.as_deref_mut() {
            for (t, &tok) in fwd.padded.iter().enumerate() {
                let src = &dx[t * d..(t + 1) * d];
                let te = &mut mg.tok_embed[tok as usize * d..(tok as usize + 1) * d];
                for i in 0..d {
                    te[i] += src[i];
                }
                let pe = &mut mg.pos_embed[t * d..(t + 1) * d];
                for i in 0..d {
                    pe[i] += src[i];
                }
            }
        }
    }
}
