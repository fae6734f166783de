//! End-to-end checks of the command-line surface: exit codes, byte-stable
//! outputs, and parity with the library on the same inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxdistill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ctxdistill")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap_or(-1)
}

/// Convenience for argument lists assembled from owned strings.
fn okv(args: &[String]) -> Output {
    let v: Vec<&str> = args.iter().map(|a| a.as_str()).collect();
    ok(&v)
}

fn argv(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|p| p.to_string()).collect()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Shared tiny model + context for the whole test file.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
    context: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let model = root.join("model.lmt");
    ok(&[
        "model", "init", "--layers", "2", "--heads", "2", "--dim", "16", "--ff", "32",
        "--window", "128", "--seed", "5", "--out", &s(&model),
    ]);
    let context = root.join("ctx.txt");
    std::fs::write(
        &context,
        "zuvo is kelar.\nmira is tolan.\nbado is rupee.\nfena is golar.\n",
    )
    .unwrap();
    Fixture {
        _dir: dir,
        root,
        model,
        context,
    }
}

const ELICIT_FAST: &[&str] = &[
    "--n-qa", "4", "--n-open", "4", "--entry-length", "8",
    "--query-mode", "synthesized", "--seed", "7",
];

#[test]
fn elicit_is_byte_identical_across_reruns() {
    let f = fixture();
    let out1 = f.root.join("t1.jsonl");
    let out2 = f.root.join("t2.jsonl");
    let base = argv(&["elicit", "--model", &s(&f.model), "--context-file", &s(&f.context)]);
    let mut args1 = base.clone();
    args1.extend(argv(ELICIT_FAST));
    args1.extend(argv(&["--out", &s(&out1)]));
    okv(&args1);

    let mut args2 = base.clone();
    args2.extend(argv(ELICIT_FAST));
    args2.extend(argv(&["--out", &s(&out2)]));
    okv(&args2);

    let b1 = std::fs::read(&out1).unwrap();
    let b2 = std::fs::read(&out2).unwrap();
    assert_eq!(b1, b2);
    assert!(!b1.is_empty());
}

#[test]
fn elicit_with_no_entries_is_a_usage_error() {
    let f = fixture();
    let out = f.root.join("t.jsonl");
    let c = code(&[
        "elicit", "--model", &s(&f.model), "--context-file", &s(&f.context),
        "--n-qa", "0", "--n-open", "0", "--out", &s(&out),
    ]);
    assert_eq!(c, 2);
}

#[test]
fn unknown_flags_and_commands_exit_2() {
    assert_eq!(code(&["no-such-command"]), 2);
    let f = fixture();
    let out = f.root.join("x");
    assert_eq!(
        code(&[
            "select", "--model", &s(&f.model), "--transfer-set", "missing.jsonl",
            "--strategy", "bogus", "--out", &s(&out),
        ]),
        2
    );
}

#[test]
fn select_matches_library_on_the_same_inputs() {
    let f = fixture();
    let tset = f.root.join("tset.jsonl");
    let ts_s = s(&tset);
    let mut args = argv(&["elicit", "--model", &s(&f.model), "--context-file", &s(&f.context)]);
    args.extend(argv(ELICIT_FAST));
    args.extend(argv(&["--out", &ts_s]));
    okv(&args);

    let sel = f.root.join("sel.jsonl");
    ok(&[
        "select", "--model", &s(&f.model), "--transfer-set", &ts_s,
        "--strategy", "ppl", "--k", "3", "--seed", "9", "--out", &s(&sel),
    ]);

    // Library route on the same inputs.
    let model = ctxdistill::TinyTransformer::load(&f.model).unwrap();
    let ts = ctxdistill::elicit::TransferSet::read(&tset).unwrap();
    let context = ctxdistill::elicit::Context::new(
        &model,
        ts.context_id.clone(),
        ts.context_text.clone(),
    )
    .unwrap();
    let cfg = ctxdistill::select::SelectionConfig {
        k: 3,
        seed: 9,
        ..Default::default()
    };
    let view = ctxdistill::select::ModelView {
        model: &model,
        adapter: None,
    };
    let scored = ctxdistill::select::score_all(&view, &view, &context, &ts, &cfg).unwrap();
    let picked = ctxdistill::select::select_top_k(&scored, &cfg).unwrap();

    let file = ctxdistill::select::ScoredSetFile::read(&sel).unwrap();
    assert_eq!(file.selected_indices, picked.indices);
    assert_eq!(file.scored.len(), scored.len());
    // The binary and the test harness are compiled at different opt levels,
    // where transcendental loops may lower to differently rounded SIMD
    // implementations; allow one-ULP-scale slack.
    for (a, b) in file.scored.iter().zip(scored.iter()) {
        assert!((a.delta_ppl - b.delta_ppl).abs() < 1e-9);
    }
}

#[test]
fn consolidate_rejects_unknown_loss_and_matches_library_epochs() {
    let f = fixture();
    let tset = f.root.join("tset.jsonl");
    let ts_s = s(&tset);
    let mut args = argv(&["elicit", "--model", &s(&f.model), "--context-file", &s(&f.context)]);
    args.extend(argv(ELICIT_FAST));
    args.extend(argv(&["--out", &ts_s]));
    okv(&args);
    let sel = f.root.join("sel.jsonl");
    ok(&[
        "select", "--model", &s(&f.model), "--transfer-set", &ts_s,
        "--k", "6", "--seed", "9", "--out", &s(&sel),
    ]);

    let ckpt = f.root.join("adapter.lac");
    assert_eq!(
        code(&[
            "consolidate", "--model", &s(&f.model), "--selected", &s(&sel),
            "--loss", "nope", "--out", &s(&ckpt),
        ]),
        2
    );

    ok(&[
        "consolidate", "--model", &s(&f.model), "--selected", &s(&sel),
        "--loss", "fkl", "--lr", "0.005", "--rank", "2", "--alpha", "4",
        "--dropout", "0", "--max-epochs", "2", "--batch-size", "4",
        "--optimizer", "adam", "--cache-teacher", "--seed", "11", "--out", &s(&ckpt),
    ]);

    // Library run with the same effective config.
    let model = ctxdistill::TinyTransformer::load(&f.model).unwrap();
    let file = ctxdistill::select::ScoredSetFile::read(&sel).unwrap();
    let subset = file.selected_transfer_set();
    let context = ctxdistill::elicit::Context::new(
        &model,
        file.context_id.clone(),
        file.context_text.clone(),
    )
    .unwrap();
    let cfg = ctxdistill::consolidate::ConsolidationConfig {
        loss: ctxdistill::consolidate::LossKind::Fkl,
        learning_rate: 0.005,
        adapter: ctxdistill::backend::AdapterConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.0,
            ..Default::default()
        },
        max_epochs: 2,
        batch_size: 4,
        optimizer: ctxdistill::consolidate::OptimizerKind::Adam,
        cache_teacher: true,
        seed: 11,
        ..Default::default()
    };
    let (adapter, record) =
        ctxdistill::consolidate::consolidate(&model, None, &context, &subset, &cfg).unwrap();
    let cli_adapter = ctxdistill::AdapterState::read_checkpoint(&ckpt).unwrap();
    assert_eq!(cli_adapter.config, adapter.config);
    for (cp, lp) in cli_adapter.pairs.iter().zip(adapter.pairs.iter()) {
        for (a, b) in cp.a.iter().zip(lp.a.iter()).chain(cp.b.iter().zip(lp.b.iter())) {
            assert!((a - b).abs() < 1e-9, "cross-profile drift: {a} vs {b}");
        }
    }
    assert_eq!(record.epochs_run, 2);
}

#[test]
fn stream_writes_turn_artifacts_and_final_checkpoint() {
    let f = fixture();
    let out_dir = f.root.join("stream");
    ok(&[
        "stream", "--model", &s(&f.model), "--context-file", &s(&f.context),
        "--chunk-length", "30", "--retention-ratio", "0.1", "--seed", "3",
        "--config", &s(&write_stream_config(&f.root)),
        "--out-dir", &s(&out_dir),
    ]);
    let manifest: Vec<serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("stream.json")).unwrap(),
    )
    .unwrap();
    // 60 context tokens, chunk 30 -> 2 turns.
    assert_eq!(manifest.len(), 2);
    assert!(out_dir.join("final.adapter.lac").exists());
    assert!(out_dir.join("turn000.transfer.jsonl").exists());
    assert!(out_dir.join("turn001.scored.jsonl").exists());
    assert!(out_dir.join("manifest.jsonl").exists());
}

fn write_stream_config(root: &Path) -> PathBuf {
    // Small per-turn pipeline so streaming runs fast under test.
    let cfg = serde_json::json!({
        "chunk_length": 30,
        "retention_ratio": 0.1,
        "elicitation": {
            "n_qa": 4, "n_open": 4, "entry_length": 8, "queries_per_prompt": 20,
            "temperature": 1.0, "seed": 0, "query_mode": "synthesized",
            "max_parse_retries": 5
        },
        "selection": { "k": 6, "strategy": "ppl", "seed": 0, "length_normalized": false },
        "consolidation": {
            "loss": "fkl", "learning_rate": 0.005,
            "adapter": { "rank": 2, "alpha": 4.0, "dropout": 0.0,
                          "targets": ["attn_q", "attn_v"] },
            "train_ratio": [4, 1], "patience": 2, "max_epochs": 2, "batch_size": 4,
            "seed": 0, "akl_head_mass": 0.5, "mse_layer": null,
            "optimizer": "adam", "cache_teacher": true
        },
        "continuity": "continue_in_place",
        "seed": 0
    });
    let path = root.join("stream-config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn eval_exit_codes_and_report_idempotence() {
    let f = fixture();
    let task = f.root.join("task.json");
    ok(&[
        "task", "fact-recall", "--model", &s(&f.model), "--n-facts", "4",
        "--n-probes", "4", "--seed", "13", "--out", &s(&task),
    ]);

    // consolidated without --checkpoint is a usage error.
    let res = f.root.join("res.jsonl");
    assert_eq!(
        code(&[
            "eval", "--model", &s(&f.model), "--task-spec", &s(&task),
            "--condition", "consolidated", "--rho", "0.1", "--out", &s(&res),
        ]),
        2
    );

    // none requires no checkpoint and no rho.
    ok(&[
        "eval", "--model", &s(&f.model), "--task-spec", &s(&task),
        "--condition", "none", "--out", &s(&res),
    ]);
    let records = ctxdistill::eval::report::read_results(&res).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].condition, "no_context");
    assert!(records[0].m.is_some());

    // Report renders, and re-rendering the same records is identical.
    let rep1 = f.root.join("report.txt");
    ok(&[
        "report", "--results", &s(&res), "--format", "table", "--out", &s(&rep1),
    ]);
    let rep2 = f.root.join("report2.txt");
    ok(&[
        "report", "--results", &s(&res), "--format", "table", "--out", &s(&rep2),
    ]);
    assert_eq!(
        std::fs::read(&rep1).unwrap(),
        std::fs::read(&rep2).unwrap()
    );

    // Machine format parses back.
    let mach = f.root.join("report.json");
    ok(&[
        "report", "--results", &s(&res), "--format", "machine", "--out", &s(&mach),
    ]);
    let text = std::fs::read_to_string(&mach).unwrap();
    let table = ctxdistill::eval::report::parse_machine(&text).unwrap();
    assert_eq!(table.tasks.len(), 1);
}

#[test]
fn manifest_records_every_output() {
    let f = fixture();
    let tset = f.root.join("m-tset.jsonl");
    let ts_s = s(&tset);
    let mut args = argv(&["elicit", "--model", &s(&f.model), "--context-file", &s(&f.context)]);
    args.extend(argv(ELICIT_FAST));
    args.extend(argv(&["--out", &ts_s]));
    okv(&args);

    let manifest = ctxdistill::manifest::read_manifest(&f.root.join("manifest.jsonl")).unwrap();
    let elicit_entries: Vec<_> = manifest.iter().filter(|e| e.command == "elicit").collect();
    assert_eq!(elicit_entries.len(), 1);
    assert!(elicit_entries[0].outputs.contains(&ts_s));
}
