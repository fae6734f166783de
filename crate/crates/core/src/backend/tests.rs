//! Backend correctness tests: scoring semantics, adapter no-op/merge
//! contracts, sampling determinism, and finite-difference gradient checks
//! for both the adapter path and the full-model path.

use super::adapter::{AdapterConfig, TargetMatrix};
use super::config::TransformerConfig;
use super::model::TinyTransformer;
use super::pretrain::cross_entropy_dlogits;
use super::*;
use crate::rng::Rng;

fn tiny_model(seed: u64) -> TinyTransformer {
    TinyTransformer::new(TransformerConfig::test_tiny(), seed).unwrap()
}

fn toks(model: &TinyTransformer, text: &str) -> TokenSequence {
    model.tokenize(text).unwrap()
}

#[test]
fn score_logprobs_shapes_and_empty_target() {
    let m = tiny_model(1);
    let prefix = toks(&m, "hello ");
    let target = toks(&m, "world");
    let lp = m.score_logprobs(None, &prefix, &target).unwrap();
    assert_eq!(lp.len(), target.len());
    assert!(lp.iter().all(|&x| x < 0.0));

    let empty = m
        .score_logprobs(None, &prefix, &TokenSequence::empty())
        .unwrap();
    assert!(empty.is_empty());
}

#[test]
fn distributions_normalize_and_agree_with_logprobs() {
    let m = tiny_model(2);
    let prefix = toks(&m, "abc");
    let target = toks(&m, "defg");
    let dists = m.next_token_distributions(None, &prefix, &target).unwrap();
    let lps = m.score_logprobs(None, &prefix, &target).unwrap();
    assert_eq!(dists.rows.len(), target.len());
    for (t, row) in dists.rows.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {t} sums to {sum}");
        assert!(row.iter().all(|&p| p >= 0.0));
        let tok = target.0[t] as usize;
        assert!((row[tok].ln() - lps[t]).abs() < 1e-6);
    }
}

#[test]
fn scoring_is_pure() {
    let m = tiny_model(3);
    let prefix = toks(&m, "same input");
    let target = toks(&m, "twice");
    let a = m.score_logprobs(None, &prefix, &target).unwrap();
    let b = m.score_logprobs(None, &prefix, &target).unwrap();
    assert_eq!(a, b);
    let ha = m.hidden_at(None, &prefix, &target, 1).unwrap();
    let hb = m.hidden_at(None, &prefix, &target, 1).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn sequence_logprob_factorizes() {
    let m = tiny_model(4);
    let prefix = toks(&m, "pre");
    let t1 = toks(&m, "fir");
    let t2 = toks(&m, "st");
    let joint: f64 = m
        .score_logprobs(None, &prefix, &t1.concat(&t2))
        .unwrap()
        .iter()
        .sum();
    let part1: f64 = m.score_logprobs(None, &prefix, &t1).unwrap().iter().sum();
    let part2: f64 = m
        .score_logprobs(None, &prefix.concat(&t1), &t2)
        .unwrap()
        .iter()
        .sum();
    assert!((joint - (part1 + part2)).abs() < 1e-9);
}

#[test]
fn window_overflow_is_explicit() {
    let m = tiny_model(5);
    let long = TokenSequence(vec![10; m.context_window() + 1]);
    match m.score_logprobs(None, &long, &TokenSequence(vec![10])) {
        Err(crate::error::Error::WindowOverflow { got, window, .. }) => {
            assert_eq!(window, m.context_window());
            assert_eq!(got, m.context_window() + 2);
        }
        other => panic!("expected overflow, got {other:?}"),
    }
}

#[test]
fn fresh_adapter_is_exact_noop() {
    let m = tiny_model(6);
    let adapter = m
        .init_adapter(
            AdapterConfig {
                targets: vec![
                    TargetMatrix::AttnQ,
                    TargetMatrix::AttnV,
                    TargetMatrix::MlpUp,
                    TargetMatrix::MlpDown,
                    TargetMatrix::AttnK,
                    TargetMatrix::AttnO,
                ],
                ..AdapterConfig::default()
            },
            9,
        )
        .unwrap();
    let prefix = toks(&m, "zero delta ");
    let target = toks(&m, "check");
    let without = m.score_logprobs(None, &prefix, &target).unwrap();
    let with = m.score_logprobs(Some(&adapter), &prefix, &target).unwrap();
    for (a, b) in without.iter().zip(with.iter()) {
        assert!((a - b).abs() <= 1e-9);
    }
}

fn randomize_adapter(adapter: &mut super::AdapterState, seed: u64, scale: f64) {
    let mut rng = Rng::new(seed);
    for pair in &mut adapter.pairs {
        for v in pair.a.iter_mut() {
            *v = rng.gaussian() * scale;
        }
        for v in pair.b.iter_mut() {
            *v = rng.gaussian() * scale;
        }
    }
}

#[test]
fn merge_matches_applied_adapter_on_probes() {
    let m = tiny_model(7);
    let mut adapter = m
        .init_adapter(
            AdapterConfig {
                targets: vec![TargetMatrix::AttnQ, TargetMatrix::AttnV, TargetMatrix::MlpDown],
                ..AdapterConfig::default()
            },
            11,
        )
        .unwrap();
    randomize_adapter(&mut adapter, 12, 0.05);

    let merged = m.merge_adapter(&adapter).unwrap();
    for probe in ["probe one", "x", "another longer probe text."] {
        let prefix = toks(&m, probe);
        let target = toks(&m, " tail");
        let applied = m.score_logprobs(Some(&adapter), &prefix, &target).unwrap();
        let folded = merged.score_logprobs(None, &prefix, &target).unwrap();
        for (a, b) in applied.iter().zip(folded.iter()) {
            assert!((a - b).abs() <= 1e-5, "merge deviated: {a} vs {b}");
        }
    }

    // Zero-delta merge leaves outputs identical.
    let zero = m.init_adapter(AdapterConfig::default(), 3).unwrap();
    let same = m.merge_adapter(&zero).unwrap();
    let prefix = toks(&m, "zz");
    let target = toks(&m, "yy");
    assert_eq!(
        m.score_logprobs(None, &prefix, &target).unwrap(),
        same.score_logprobs(None, &prefix, &target).unwrap()
    );
}

#[test]
fn merge_rejects_foreign_adapter() {
    let a = tiny_model(8);
    let b = tiny_model(9);
    let adapter = a.init_adapter(AdapterConfig::default(), 1).unwrap();
    assert!(matches!(
        b.merge_adapter(&adapter),
        Err(crate::error::Error::FingerprintMismatch { .. })
    ));
    assert!(b
        .score_logprobs(Some(&adapter), &toks(&b, "a"), &toks(&b, "b"))
        .is_err());
}

#[test]
fn greedy_sampling_equals_argmax_chain() {
    let m = tiny_model(10);
    let prompt = toks(&m, "seed text");
    let sampled = m.sample(None, &prompt, 0.0, 12, 777).unwrap();
    let also = m.sample(None, &prompt, 0.0, 12, 12345).unwrap();
    assert_eq!(sampled, also, "greedy must ignore the seed");

    let mut cur = prompt.clone();
    let probe = TokenSequence(vec![0]);
    let mut chain = Vec::new();
    for _ in 0..12 {
        let dist = m.next_token_distributions(None, &cur, &probe).unwrap();
        let next = argmax(&dist.rows[0]) as u32;
        if next == EOS {
            break;
        }
        chain.push(next);
        cur = cur.concat(&TokenSequence(vec![next]));
    }
    assert_eq!(sampled.0, chain);
}

#[test]
fn temperature_sampling_is_seed_deterministic() {
    let m = tiny_model(11);
    let prompt = toks(&m, "q");
    let a = m.sample(None, &prompt, 1.0, 16, 42).unwrap();
    let b = m.sample(None, &prompt, 1.0, 16, 42).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 16);
    for &t in &a.0 {
        assert!((t as usize) < m.vocab_size());
        assert_ne!(t, EOS);
        assert_ne!(t, BOS);
    }
}

#[test]
fn hidden_states_project_to_distributions() {
    let m = tiny_model(12);
    let prefix = toks(&m, "hid ");
    let target = toks(&m, "den");
    let hs = m
        .hidden_at(None, &prefix, &target, m.n_layers())
        .unwrap();
    assert_eq!(hs.rows.len(), target.len());
    let dists = m.next_token_distributions(None, &prefix, &target).unwrap();
    let d = m.hidden_dim();
    let v = m.vocab_size();
    for (row, dist) in hs.rows.iter().zip(dists.rows.iter()) {
        let mut logits = vec![0.0; v];
        for o in 0..v {
            let mut acc = 0.0;
            for i in 0..d {
                acc += m.w_head[o * d + i] * row[i];
            }
            logits[o] = acc;
        }
        let p = softmax(&logits);
        for (a, b) in p.iter().zip(dist.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn hidden_rejects_invalid_layer() {
    let m = tiny_model(13);
    assert!(matches!(
        m.hidden_at(None, &toks(&m, "a"), &toks(&m, "b"), m.n_layers() + 1),
        Err(crate::error::Error::InvalidLayer { .. })
    ));
}

#[test]
fn model_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(14);
    let p1 = dir.path().join("m1.lmt");
    let p2 = dir.path().join("m2.lmt");
    m.save(&p1).unwrap();
    m.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let back = TinyTransformer::load(&p1).unwrap();
    assert_eq!(back.fingerprint(), m.fingerprint());
    assert_eq!(back.identifier(), m.identifier());
    let prefix = toks(&m, "persist");
    let target = toks(&m, "ence");
    assert_eq!(
        m.score_logprobs(None, &prefix, &target).unwrap(),
        back.score_logprobs(None, &prefix, &target).unwrap()
    );
}

#[test]
fn adapter_checkpoint_survives_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(15);
    let mut adapter = m.init_adapter(AdapterConfig::default(), 21).unwrap();
    randomize_adapter(&mut adapter, 22, 0.02);
    let path = dir.path().join("ad.lac");
    adapter.write_checkpoint(&path).unwrap();
    let back = super::AdapterState::read_checkpoint(&path).unwrap();
    assert_eq!(back, adapter);
    // Reloaded adapter still scores identically.
    let prefix = toks(&m, "ckpt");
    let target = toks(&m, "load");
    assert_eq!(
        m.score_logprobs(Some(&adapter), &prefix, &target).unwrap(),
        m.score_logprobs(Some(&back), &prefix, &target).unwrap()
    );
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks
// ---------------------------------------------------------------------------

fn ce_loss(m: &TinyTransformer, adapter: Option<&super::AdapterState>, tokens: &[u32]) -> f64 {
    let fwd = m.forward_full(tokens, adapter, None).unwrap();
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    cross_entropy_dlogits(&fwd.logits, m.config.vocab_size, &targets).0
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn factor_slot(
    ad: &mut super::AdapterState,
    pi: usize,
    which_b: bool,
    idx: usize,
) -> &mut f64 {
    if which_b {
        &mut ad.pairs[pi].b[idx]
    } else {
        &mut ad.pairs[pi].a[idx]
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let m = tiny_model(16);
    let cfg = AdapterConfig {
        targets: vec![
            TargetMatrix::AttnQ,
            TargetMatrix::AttnK,
            TargetMatrix::AttnV,
            TargetMatrix::AttnO,
            TargetMatrix::MlpUp,
            TargetMatrix::MlpDown,
        ],
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
    };
    let mut adapter = m.init_adapter(cfg, 31).unwrap();
    randomize_adapter(&mut adapter, 32, 0.05);

    let tokens = m.tokenize("grad check seq").unwrap().0;
    let fwd = m.forward_full(&tokens, Some(&adapter), None).unwrap();
    let mut targets = tokens.clone();
    targets.push(EOS);
    let (_, dlogits) = cross_entropy_dlogits(&fwd.logits, m.config.vocab_size, &targets);
    let analytic = m.backward_adapter(&fwd, &adapter, &dlogits, None);

    let eps = 1e-4;
    let mut rng = Rng::new(33);
    let mut checked = 0;
    for pi in 0..adapter.pairs.len() {
        for _ in 0..3 {
            // One coordinate of A and one of B per draw.
            for which_b in [false, true] {
                let len = if which_b {
                    adapter.pairs[pi].b.len()
                } else {
                    adapter.pairs[pi].a.len()
                };
                let idx = rng.below(len);
                let orig = *factor_slot(&mut adapter, pi, which_b, idx);
                *factor_slot(&mut adapter, pi, which_b, idx) = orig + eps;
                let lp = ce_loss(&m, Some(&adapter), &tokens);
                *factor_slot(&mut adapter, pi, which_b, idx) = orig - eps;
                let lm = ce_loss(&m, Some(&adapter), &tokens);
                *factor_slot(&mut adapter, pi, which_b, idx) = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = if which_b {
                    analytic.pairs[pi].b[idx]
                } else {
                    analytic.pairs[pi].a[idx]
                };
                assert!(
                    rel_err(fd, an) < 1e-3 || (fd.abs() < 1e-10 && an.abs() < 1e-10),
                    "pair {pi} b={which_b} idx {idx}: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked >= 20);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let m0 = tiny_model(17);
    let tokens = m0.tokenize("model grads").unwrap().0;

    let fwd = m0.forward_full(&tokens, None, None).unwrap();
    let mut targets = tokens.clone();
    targets.push(EOS);
    let (_, dlogits) = cross_entropy_dlogits(&fwd.logits, m0.config.vocab_size, &targets);
    let analytic = m0.backward_model(&fwd, &dlogits);

    // Spot-check one coordinate per weight tensor against central differences.
    let eps = 1e-4;
    let mut rng = Rng::new(40);
    let check = |an: f64, set: &mut dyn FnMut(&mut TinyTransformer, f64), what: &str| {
        let mut loss_at = |delta: f64| -> f64 {
            let mut mm = m0.clone();
            set(&mut mm, delta);
            ce_loss(&mm, None, &tokens)
        };
        let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        assert!(
            rel_err(fd, an) < 1e-3 || (fd.abs() < 1e-10 && an.abs() < 1e-10),
            "{what}: fd {fd} vs analytic {an}"
        );
    };

    let d = m0.config.d_model;
    // token embedding of a token that occurs in the input
    let tok = tokens[1] as usize;
    let i = rng.below(d);
    check(
        analytic.tok_embed[tok * d + i],
        &mut |mm, delta| mm.tok_embed[tok * d + i] += delta,
        "tok_embed",
    );
    let pos = 1 + rng.below(tokens.len());
    let i2 = rng.below(d);
    check(
        analytic.pos_embed[pos * d + i2],
        &mut |mm, delta| mm.pos_embed[pos * d + i2] += delta,
        "pos_embed",
    );
    for l in 0..m0.config.n_layers {
        let iq = rng.below(d * d);
        check(
            analytic.layers[l].w_q[iq],
            &mut |mm, delta| mm.layers[l].w_q[iq] += delta,
            "w_q",
        );
        let ik = rng.below(d * d);
        check(
            analytic.layers[l].w_k[ik],
            &mut |mm, delta| mm.layers[l].w_k[ik] += delta,
            "w_k",
        );
        let iv = rng.below(d * d);
        check(
            analytic.layers[l].w_v[iv],
            &mut |mm, delta| mm.layers[l].w_v[iv] += delta,
            "w_v",
        );
        let io = rng.below(d * d);
        check(
            analytic.layers[l].w_o[io],
            &mut |mm, delta| mm.layers[l].w_o[io] += delta,
            "w_o",
        );
        let iu = rng.below(d * m0.config.d_ff);
        check(
            analytic.layers[l].w_up[iu],
            &mut |mm, delta| mm.layers[l].w_up[iu] += delta,
            "w_up",
        );
        let idn = rng.below(d * m0.config.d_ff);
        check(
            analytic.layers[l].w_down[idn],
            &mut |mm, delta| mm.layers[l].w_down[idn] += delta,
            "w_down",
        );
        let ig = rng.below(d);
        check(
            analytic.layers[l].ln1_gamma[ig],
            &mut |mm, delta| mm.layers[l].ln1_gamma[ig] += delta,
            "ln1_gamma",
        );
        let ib = rng.below(d);
        check(
            analytic.layers[l].ln2_beta[ib],
            &mut |mm, delta| mm.layers[l].ln2_beta[ib] += delta,
            "ln2_beta",
        );
        let ibu = rng.below(m0.config.d_ff);
        check(
            analytic.layers[l].b_up[ibu],
            &mut |mm, delta| mm.layers[l].b_up[ibu] += delta,
            "b_up",
        );
    }
    let ih = rng.below(m0.config.vocab_size * d);
    check(
        analytic.w_head[ih],
        &mut |mm, delta| mm.w_head[ih] += delta,
        "w_head",
    );
    let ifg = rng.below(d);
    check(
        analytic.lnf_gamma[ifg],
        &mut |mm, delta| mm.lnf_gamma[ifg] += delta,
        "lnf_gamma",
    );
}

#[test]
fn zero_length_sample_arguments_rejected() {
    let m = tiny_model(20);
    assert!(m.sample(None, &toks(&m, "x"), 0.0, 0, 1).is_err());
    assert!(m.sample(None, &toks(&m, "x"), -0.5, 4, 1).is_err());
}

#[test]
fn softmax_helpers_are_consistent() {
    let p = softmax(&[0.3, -2.0, 5.0, 0.0]);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.iter().all(|&x| x > 0.0));
    let z = [1.0, -0.5, 2.5];
    for (a, b) in softmax(&z).iter().zip(log_softmax(&z).iter()) {
        assert!((a.ln() - b).abs() < 1e-12);
    }
    let mut rng = Rng::new(1);
    assert_eq!(sample_from_probs(&[0.1, 0.6, 0.3], 0.0, &mut rng), 1);
}

#[test]
fn multinomial_frequencies_match_distribution() {
    // 3-sigma bound on each empirical frequency at n = 10_000.
    let probs = [0.5, 0.2, 0.25, 0.05];
    let n = 10_000;
    let mut counts = [0usize; 4];
    let mut rng = Rng::new(12345);
    for _ in 0..n {
        counts[sample_from_probs(&probs, 1.0, &mut rng)] += 1;
    }
    for (i, &p) in probs.iter().enumerate() {
        let freq = counts[i] as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * sigma,
            "index {i}: freq {freq} vs p {p}"
        );
    }
}

#[test]
fn hidden_gradient_injection_matches_finite_differences() {
    // Loss = 0.5 * sum(h^2) at a middle layer, gradient injected as d_hidden.
    let m = tiny_model(18);
    let cfg = AdapterConfig {
        targets: vec![TargetMatrix::AttnQ, TargetMatrix::AttnV],
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
    };
    let mut adapter = m.init_adapter(cfg, 51).unwrap();
    randomize_adapter(&mut adapter, 52, 0.05);
    let tokens = m.tokenize("hidden inject").unwrap().0;

    for layer in [0usize, m.config.n_layers] {
        let loss_of = |ad: &super::AdapterState| -> f64 {
            let fwd = m.forward_full(&tokens, Some(ad), None).unwrap();
            let h = fwd.hidden_stream(layer);
            0.5 * h.iter().map(|&x| x * x).sum::<f64>()
        };
        let fwd = m.forward_full(&tokens, Some(&adapter), None).unwrap();
        let h = fwd.hidden_stream(layer).to_vec();
        let dlogits = vec![0.0; fwd.logits.len()];
        let analytic = m.backward_adapter(&fwd, &adapter, &dlogits, Some((layer, &h)));

        let mut rng = Rng::new(60 + layer as u64);
        let eps = 1e-4;
        for _ in 0..6 {
            let pi = rng.below(adapter.pairs.len());
            let idx = rng.below(adapter.pairs[pi].b.len());
            let orig = adapter.pairs[pi].b[idx];
            adapter.pairs[pi].b[idx] = orig + eps;
            let lp = loss_of(&adapter);
            adapter.pairs[pi].b[idx] = orig - eps;
            let lm = loss_of(&adapter);
            adapter.pairs[pi].b[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic.pairs[pi].b[idx];
            assert!(
                rel_err(fd, an) < 1e-3 || (fd.abs() < 1e-10 && an.abs() < 1e-10),
                "layer {layer} pair {pi} idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }
}

#[test]
fn dropout_gradients_respect_the_mask() {
    // With a fixed dropout draw, analytic adapter gradients must still match
    // finite differences computed under the same mask. Reconstruct the mask
    // by re-running the forward with an identically seeded rng.
    let m = tiny_model(23);
    let cfg = AdapterConfig {
        targets: vec![TargetMatrix::AttnQ, TargetMatrix::AttnV],
        rank: 2,
        alpha: 4.0,
        dropout: 0.3,
    };
    let mut adapter = m.init_adapter(cfg, 81).unwrap();
    randomize_adapter(&mut adapter, 82, 0.05);
    let tokens = m.tokenize("mask").unwrap().0;

    let loss_of = |ad: &super::AdapterState| -> f64 {
        let fwd = m
            .forward_full(&tokens, Some(ad), Some(&mut Rng::new(99)))
            .unwrap();
        let mut targets = tokens.clone();
        targets.push(EOS);
        cross_entropy_dlogits(&fwd.logits, m.config.vocab_size, &targets).0
    };

    let fwd = m
        .forward_full(&tokens, Some(&adapter), Some(&mut Rng::new(99)))
        .unwrap();
    let mut targets = tokens.clone();
    targets.push(EOS);
    let (_, dlogits) = cross_entropy_dlogits(&fwd.logits, m.config.vocab_size, &targets);
    let analytic = m.backward_adapter(&fwd, &adapter, &dlogits, None);

    let mut rng = Rng::new(90);
    let eps = 1e-4;
    for _ in 0..8 {
        let pi = rng.below(adapter.pairs.len());
        let which_b = rng.below(2) == 1;
        let len = if which_b {
            adapter.pairs[pi].b.len()
        } else {
            adapter.pairs[pi].a.len()
        };
        let idx = rng.below(len);
        let orig = *factor_slot(&mut adapter, pi, which_b, idx);
        *factor_slot(&mut adapter, pi, which_b, idx) = orig + eps;
        let lp = loss_of(&adapter);
        *factor_slot(&mut adapter, pi, which_b, idx) = orig - eps;
        let lm = loss_of(&adapter);
        *factor_slot(&mut adapter, pi, which_b, idx) = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let an = if which_b {
            analytic.pairs[pi].b[idx]
        } else {
            analytic.pairs[pi].a[idx]
        };
        assert!(
            rel_err(fd, an) < 1e-3 || (fd.abs() < 1e-10 && an.abs() < 1e-10),
            "pair {pi} b={which_b} idx {idx}: fd {fd} vs analytic {an}"
        );
    }
}

#[test]
fn dropout_is_training_only_and_seeded() {
    let m = tiny_model(19);
    let cfg = AdapterConfig {
        dropout: 0.5,
        ..AdapterConfig::default()
    };
    let mut adapter = m.init_adapter(cfg, 71).unwrap();
    randomize_adapter(&mut adapter, 72, 0.1);
    let tokens = m.tokenize("drop").unwrap().0;

    // Scoring path never applies dropout.
    let s1 = m
        .score_logprobs(Some(&adapter), &TokenSequence::empty(), &TokenSequence(tokens.clone()))
        .unwrap();
    let s2 = m
        .score_logprobs(Some(&adapter), &TokenSequence::empty(), &TokenSequence(tokens.clone()))
        .unwrap();
    assert_eq!(s1, s2);

    // Training forwards with the same rng seed agree; different seeds differ.
    let f1 = m
        .forward_full(&tokens, Some(&adapter), Some(&mut Rng::new(5)))
        .unwrap();
    let f2 = m
        .forward_full(&tokens, Some(&adapter), Some(&mut Rng::new(5)))
        .unwrap();
    let f3 = m
        .forward_full(&tokens, Some(&adapter), Some(&mut Rng::new(6)))
        .unwrap();
    assert_eq!(f1.logits, f2.logits);
    assert_ne!(f1.logits, f3.logits);
}

impl NextTokenDistribution {
    fn iter_rows(&self) -> impl Iterator<Item = &f64> {
        self.rows[0].iter()
    }
}
