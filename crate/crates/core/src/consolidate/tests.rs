use super::*;
use crate::backend::adapter::TargetMatrix;
use crate::backend::TransformerConfig;
use crate::elicit::{ElicitationConfig, QueryMode};

fn tiny_model(seed: u64) -> TinyTransformer {
    TinyTransformer::new(TransformerConfig::test_tiny(), seed).unwrap()
}

fn qa_entry(model: &TinyTransformer, ctx_id: &str, q: &str, r: &str) -> TransferEntry {
    TransferEntry {
        context_id: ctx_id.into(),
        kind: EntryKind::Qa,
        query_text: q.into(),
        response_text: r.into(),
        query_tokens: model.tokenize(q).unwrap(),
        response_tokens: model.tokenize(r).unwrap(),
        seed: 0,
        prompt_hash: String::new(),
    }
}

fn synthetic_subset(model: &TinyTransformer, n: usize) -> (Context, TransferSet) {
    let text = "zuvo is kelar.\nmira is tolan.\nbado is rupee.\n";
    let context = Context::new(model, "ctx", text).unwrap();
    let words = ["kelar.", "tolan.", "rupee.", "savo.", "limun."];
    let entries: Vec<TransferEntry> = (0..n)
        .map(|i| {
            qa_entry(
                model,
                "ctx",
                &format!("item {i}"),
                words[i % words.len()],
            )
        })
        .collect();
    let ts = TransferSet {
        context_id: "ctx".into(),
        context_text: text.into(),
        config: ElicitationConfig {
            n_qa: n,
            n_open: 0,
            entry_length: 16,
            query_mode: QueryMode::Synthesized,
            ..ElicitationConfig::default()
        },
        entries,
    };
    (context, ts)
}

fn fast_cfg(loss: LossKind, seed: u64) -> ConsolidationConfig {
    ConsolidationConfig {
        loss,
        learning_rate: 5e-3,
        adapter: AdapterConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
            targets: vec![TargetMatrix::AttnQ, TargetMatrix::AttnV, TargetMatrix::MlpDown],
        },
        max_epochs: 10,
        batch_size: 4,
        seed,
        optimizer: OptimizerKind::Adam,
        cache_teacher: true,
        ..ConsolidationConfig::default()
    }
}

#[test]
fn split_sizes_follow_the_ratio() {
    let model = tiny_model(1);
    let (_, ts) = synthetic_subset(&model, 200);
    let (train, dev) = split_train_dev(&ts, (4, 1), 9).unwrap();
    assert_eq!(train.entries.len(), 160);
    assert_eq!(dev.entries.len(), 40);

    let (_, ts5) = synthetic_subset(&model, 5);
    let (t5, d5) = split_train_dev(&ts5, (4, 1), 9).unwrap();
    assert_eq!((t5.entries.len(), d5.entries.len()), (4, 1));

    let (_, ts4) = synthetic_subset(&model, 4);
    assert!(split_train_dev(&ts4, (4, 1), 9).is_err());
}

#[test]
fn split_is_deterministic_and_partitions() {
    let model = tiny_model(2);
    let (_, ts) = synthetic_subset(&model, 23);
    let (t1, d1) = split_train_dev(&ts, (4, 1), 77).unwrap();
    let (t2, d2) = split_train_dev(&ts, (4, 1), 77).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(d1, d2);

    let mut all: Vec<String> = t1
        .entries
        .iter()
        .chain(d1.entries.iter())
        .map(|e| e.query_text.clone())
        .collect();
    all.sort();
    let mut want: Vec<String> = ts.entries.iter().map(|e| e.query_text.clone()).collect();
    want.sort();
    assert_eq!(all, want);
}

#[test]
fn training_reduces_dev_loss_below_initial() {
    let model = tiny_model(3);
    let (context, ts) = synthetic_subset(&model, 20);
    let cfg = fast_cfg(LossKind::Fkl, 11);
    let (_, record) = consolidate(&model, None, &context, &ts, &cfg).unwrap();
    assert!(record.epochs_run >= 1);
    let best = record
        .dev_losses
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert!(
        best < record.initial_dev_loss,
        "dev never improved: initial {} best {best}",
        record.initial_dev_loss
    );
    assert_eq!(record.dev_losses.len(), record.epochs_run);
}

#[test]
fn every_loss_kind_trains_and_is_finite() {
    let model = tiny_model(4);
    let (context, ts) = synthetic_subset(&model, 8);
    for loss in [
        LossKind::Fkl,
        LossKind::Rkl,
        LossKind::Akl,
        LossKind::Dpkd,
        LossKind::Mse,
        LossKind::Seqkd,
    ] {
        let cfg = ConsolidationConfig {
            max_epochs: 2,
            ..fast_cfg(loss, 13)
        };
        let (adapter, record) = consolidate(&model, None, &context, &ts, &cfg).unwrap();
        assert!(record.initial_dev_loss.is_finite(), "{loss:?}");
        assert!(record.dev_losses.iter().all(|d| d.is_finite()), "{loss:?}");
        assert!(adapter.pairs.iter().all(|p| p.b.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn returned_adapter_is_the_best_dev_state() {
    let model = tiny_model(5);
    let (context, ts) = synthetic_subset(&model, 15);
    let cfg = fast_cfg(LossKind::Fkl, 17);
    let (best_adapter, record) = consolidate(&model, None, &context, &ts, &cfg).unwrap();

    // Recompute the dev loss of the returned adapter via the public pieces.
    let (_, dev) = split_train_dev(&ts, cfg.train_ratio, derive_seed(cfg.seed, "split", 0)).unwrap();
    let teacher = TeacherView {
        model: &model,
        adapter: None,
    };
    let mse_layer = model.config.n_layers;
    let mut acc = 0.0;
    for e in &dev.entries {
        let item = TrainItem::from_entry(&model, &context, e).unwrap();
        let t_out = teacher_output(&teacher, &item, &cfg, mse_layer).unwrap();
        let (loss, _) = entry_loss_and_grads(&model, &best_adapter, &item, &t_out, &cfg, None).unwrap();
        acc += loss;
    }
    let recomputed = acc / dev.entries.len() as f64;
    let expected = record
        .dev_losses
        .iter()
        .cloned()
        .fold(record.initial_dev_loss, f64::min);
    assert!(
        (recomputed - expected).abs() < 1e-12,
        "returned adapter dev {recomputed} vs expected best {expected}"
    );
}

#[test]
fn zero_epochs_returns_input_state() {
    let model = tiny_model(6);
    let (context, ts) = synthetic_subset(&model, 8);
    let cfg = ConsolidationConfig {
        max_epochs: 0,
        ..fast_cfg(LossKind::Fkl, 19)
    };
    let (adapter, record) = consolidate(&model, None, &context, &ts, &cfg).unwrap();
    assert_eq!(record.epochs_run, 0);
    let fresh = model
        .init_adapter(cfg.adapter.clone(), derive_seed(cfg.seed, "adapter-init", 0))
        .unwrap();
    assert_eq!(adapter, fresh);

    // With a prior adapter the prior comes back untouched.
    let mut prior = fresh.clone();
    prior.pairs[0].b[0] = 0.25;
    let (out, _) = consolidate(&model, Some(&prior), &context, &ts, &cfg).unwrap();
    assert_eq!(out, prior);
}

#[test]
fn consolidation_is_deterministic() {
    let model = tiny_model(7);
    let (context, ts) = synthetic_subset(&model, 12);
    let cfg = ConsolidationConfig {
        max_epochs: 3,
        adapter: AdapterConfig {
            dropout: 0.1,
            ..fast_cfg(LossKind::Fkl, 23).adapter
        },
        ..fast_cfg(LossKind::Fkl, 23)
    };
    let (a1, mut r1) = consolidate(&model, None, &context, &ts, &cfg).unwrap();
    let (a2, mut r2) = consolidate(&model, None, &context, &ts, &cfg).unwrap();
    assert_eq!(a1, a2);
    r1.wall_time_s = 0.0;
    r2.wall_time_s = 0.0;
    assert_eq!(r1, r2);
    assert_eq!(
        a1.checkpoint_bytes().unwrap(),
        a2.checkpoint_bytes().unwrap()
    );
}

#[test]
fn base_weights_are_untouched_by_training() {
    let model = tiny_model(8);
    let before = model.fingerprint();
    let (context, ts) = synthetic_subset(&model, 8);
    let cfg = ConsolidationConfig {
        max_epochs: 2,
        ..fast_cfg(LossKind::Fkl, 29)
    };
    let _ = consolidate(&model, None, &context, &ts, &cfg).unwrap();
    assert_eq!(model.fingerprint(), before);
}

#[test]
fn zero_gradient_plateau_stops_after_patience() {
    // Teacher and student see identical (empty) conditioning, so the FKL is
    // exactly zero and never improves: one improving first epoch against
    // +inf, then `patience` flat epochs.
    let model = tiny_model(9);
    let context = Context::new(&model, "empty", "").unwrap();
    let entries: Vec<TransferEntry> = (0..6)
        .map(|i| TransferEntry {
            context_id: "empty".into(),
            kind: EntryKind::Open,
            query_text: String::new(),
            response_text: format!("resp {i}"),
            query_tokens: TokenSequence::empty(),
            response_tokens: model.tokenize(&format!("resp {i}")).unwrap(),
            seed: 0,
            prompt_hash: String::new(),
        })
        .collect();
    let ts = TransferSet {
        context_id: "empty".into(),
        context_text: String::new(),
        config: ElicitationConfig::default(),
        entries,
    };
    let cfg = ConsolidationConfig {
        max_epochs: 50,
        patience: 2,
        ..fast_cfg(LossKind::Fkl, 31)
    };
    let (adapter, record) = consolidate(&model, None, &context, &ts, &cfg).unwrap();
    assert!(record.stopped_early);
    assert_eq!(record.epochs_run, 3); // improve, flat, flat-stop
    assert_eq!(record.best_epoch, 0);
    assert!(record.dev_losses.iter().all(|&d| d == 0.0));
    let fresh = model
        .init_adapter(cfg.adapter.clone(), derive_seed(cfg.seed, "adapter-init", 0))
        .unwrap();
    assert_eq!(adapter, fresh);
}

#[test]
fn seqkd_loss_equals_negative_mean_scored_logprob() {
    let model = tiny_model(10);
    let (context, ts) = synthetic_subset(&model, 5);
    let cfg = ConsolidationConfig {
        loss: LossKind::Seqkd,
        ..fast_cfg(LossKind::Seqkd, 37)
    };
    let adapter = model.init_adapter(cfg.adapter.clone(), 1).unwrap();
    for e in &ts.entries {
        let item = TrainItem::from_entry(&model, &context, e).unwrap();
        let (loss, _) =
            entry_loss_and_grads(&model, &adapter, &item, &TeacherOutput::NotNeeded, &cfg, None)
                .unwrap();
        let lps = model
            .score_logprobs(Some(&adapter), &item.student_prefix, &item.response)
            .unwrap();
        let want = -lps.iter().sum::<f64>() / lps.len() as f64;
        assert!((loss - want).abs() < 1e-9, "loss {loss} vs scored {want}");
    }
}

#[test]
fn oversized_teacher_prompt_is_rejected_with_chunking_hint() {
    let model = tiny_model(11);
    let long_text: String = "x".repeat(model.config.context_window + 10);
    let context = Context {
        id: "long".into(),
        tokens: model.tokenize(&long_text).unwrap(),
        text: long_text,
    };
    let (_, ts) = synthetic_subset(&model, 8);
    let cfg = fast_cfg(LossKind::Fkl, 41);
    match consolidate(&model, None, &context, &ts, &cfg) {
        Err(Error::WindowOverflow { detail, .. }) => {
            assert!(detail.contains("streaming"), "detail: {detail}")
        }
        other => panic!("expected overflow, got {other:?}"),
    }
}

#[test]
fn context_lm_baseline_reduces_context_perplexity() {
    let model = tiny_model(12);
    let text = "the rain falls on the plain. the rain falls on the plain. \
the rain falls on the plain.\n";
    let context = Context::new(&model, "lm", text).unwrap();
    let cfg = ConsolidationConfig {
        learning_rate: 1e-2,
        max_epochs: 30,
        patience: 5,
        ..fast_cfg(LossKind::Fkl, 43)
    };
    let (adapter, record) = consolidate_baseline_and_check(&model, &context, &cfg);
    assert!(record.epochs_run >= 1);

    let base_ppl = perplexity_of(&model, None, &context.tokens);
    let tuned_ppl = perplexity_of(&model, Some(&adapter), &context.tokens);
    assert!(
        tuned_ppl < base_ppl,
        "context ppl did not drop: base {base_ppl}, tuned {tuned_ppl}"
    );
}

fn consolidate_baseline_and_check(
    model: &TinyTransformer,
    context: &Context,
    cfg: &ConsolidationConfig,
) -> (AdapterState, TrainRecord) {
    let (a1, r1) = context_lm_baseline(model, context, cfg).unwrap();
    let (a2, mut r2) = context_lm_baseline(model, context, cfg).unwrap();
    assert_eq!(a1, a2, "baseline must be seed-deterministic");
    r2.wall_time_s = r1.wall_time_s;
    assert_eq!(r1, r2);
    (a1, r1)
}

fn perplexity_of(
    model: &TinyTransformer,
    adapter: Option<&AdapterState>,
    tokens: &TokenSequence,
) -> f64 {
    let lps = model
        .score_logprobs(adapter, &TokenSequence::empty(), tokens)
        .unwrap();
    (-lps.iter().sum::<f64>() / lps.len() as f64).exp()
}

#[test]
fn context_lm_baseline_zero_epochs_is_noop() {
    let model = tiny_model(13);
    let context = Context::new(&model, "lm", "abcdefgh").unwrap();
    let cfg = ConsolidationConfig {
        max_epochs: 0,
        ..fast_cfg(LossKind::Fkl, 47)
    };
    let (adapter, record) = context_lm_baseline(&model, &context, &cfg).unwrap();
    assert_eq!(record.epochs_run, 0);
    let fresh = model
        .init_adapter(cfg.adapter.clone(), derive_seed(cfg.seed, "adapter-init", 0))
        .unwrap();
    assert_eq!(adapter, fresh);
}
