//! Subcommand implementations and the config/error plumbing around them.

use std::path::{Path, PathBuf};

use ctxdistill::backend::adapter::TargetMatrix;
use ctxdistill::backend::pretrain::{pretrain, PretrainConfig};
use ctxdistill::backend::{AdapterState, LmBackend, TinyTransformer, TransformerConfig};
use ctxdistill::consolidate::{ConsolidationConfig, LossKind, OptimizerKind};
use ctxdistill::corpus::{synthetic_mixed_corpus, CorpusConfig};
use ctxdistill::elicit::{build_transfer_set, Context, ElicitationConfig, QueryMode, TransferSet};
use ctxdistill::error::Error as CoreError;
use ctxdistill::eval::report::{
    read_results, render_machine, render_table, write_results, ReportTable, ResultRecord,
};
use ctxdistill::eval::{
    run_condition, Condition, ConditionOutcome, ConditionSpec, ConsolidatedSource, TaskInstance,
};
use ctxdistill::manifest::{append_manifest, ManifestEntry};
use ctxdistill::select::{
    score_all, select_top_k, ModelView, ScoredSetFile, SelectionConfig, SelectionStrategy,
};
use ctxdistill::stream::{sequential_transform, StreamConfig, StreamManifestEntry};

/// CLI-level error with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Config(_)
            | CoreError::UnknownTarget(_)
            | CoreError::InvalidLayer { .. }
            | CoreError::EmptyInput(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

fn config_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

fn load_model(path: &Path) -> Result<TinyTransformer, CliError> {
    TinyTransformer::load(path).map_err(|e| runtime(format!("loading model {path:?}: {e}")))
}

fn load_adapter(path: &Path) -> Result<AdapterState, CliError> {
    AdapterState::read_checkpoint(path)
        .map_err(|e| runtime(format!("loading adapter {path:?}: {e}")))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| runtime(format!("reading {path:?}: {e}")))
}

/// Load a JSON config file (if given) into `T`, then let the caller override
/// fields from flags. Flag > file > default.
fn load_config_file<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str(&text)
                .map_err(|e| config_err(format!("parsing config {p:?}: {e}")))
        }
    }
}

fn experiment_id(out: &Path) -> String {
    out.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into())
}

fn manifest_dir(out: &Path) -> PathBuf {
    out.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn record_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
    results: Option<serde_json::Value>,
) -> CliResult {
    let mut entry = ManifestEntry::new(experiment_id(out), command, config, seed)
        .with_inputs(inputs)
        .with_outputs(outputs);
    if let Some(r) = results {
        entry = entry.with_results(r);
    }
    append_manifest(&manifest_dir(out), &entry).map_err(CliError::from)?;
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn model_init(a: crate::ModelInitArgs) -> CliResult {
    let cfg = TransformerConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.dim,
        d_ff: a.ff.unwrap_or(a.dim * 4),
        vocab_size: ctxdistill::backend::tokenizer::VOCAB_SIZE,
        context_window: a.window,
        ln_eps: 1e-5,
    };
    let model = TinyTransformer::new(cfg.clone(), a.seed)?;
    model.save(&a.out)?;
    eprintln!(
        "[ctxdistill] initialized {} ({} parameters) -> {}",
        model.identifier(),
        cfg.param_count(),
        a.out.display()
    );
    record_manifest(
        &a.out,
        "model-init",
        serde_json::to_value(&cfg).map_err(|e| runtime(e))?,
        a.seed,
        &[],
        &[&a.out],
        None,
    )
}

pub fn model_pretrain(a: crate::ModelPretrainArgs) -> CliResult {
    let mut model = load_model(&a.model)?;
    let episodes = match &a.corpus {
        Some(path) => {
            let text = read_text(path)?;
            // Blank-line separated episodes; a single block trains as one.
            let mut eps = Vec::new();
            for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
                eps.push(model.tokenize(block).map_err(CliError::from)?);
            }
            eps
        }
        None => {
            let cfg = CorpusConfig {
                n_fact_episodes: a.fact_episodes,
                n_icl_episodes: a.icl_episodes,
                n_open_episodes: a.open_episodes,
                seed: ctxdistill::rng::derive_seed(a.seed, "corpus", 0),
                ..CorpusConfig::default()
            };
            synthetic_mixed_corpus(&model, &cfg).map_err(CliError::from)?
        }
    };
    let cfg = PretrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let losses = pretrain(&mut model, &episodes, &cfg).map_err(CliError::from)?;
    model.save(&a.out)?;
    eprintln!(
        "[ctxdistill] pretrained on {} episodes; per-epoch loss {:?} -> {}",
        episodes.len(),
        losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        a.out.display()
    );
    record_manifest(
        &a.out,
        "model-pretrain",
        serde_json::json!({
            "epochs": a.epochs, "lr": a.lr, "batch_size": a.batch_size,
            "episodes": episodes.len(),
        }),
        a.seed,
        &[&a.model],
        &[&a.out],
        Some(serde_json::json!({ "epoch_losses": losses })),
    )
}

fn elicitation_config(a: &crate::ElicitArgs) -> Result<ElicitationConfig, CliError> {
    let mut cfg: ElicitationConfig = load_config_file(&a.config)?;
    if let Some(v) = a.n_qa {
        cfg.n_qa = v;
    }
    if let Some(v) = a.n_open {
        cfg.n_open = v;
    }
    if let Some(v) = a.entry_length {
        cfg.entry_length = v;
    }
    if let Some(v) = a.queries_per_prompt {
        cfg.queries_per_prompt = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(mode) = &a.query_mode {
        cfg.query_mode = match mode.as_str() {
            "prompted" => QueryMode::Prompted,
            "synthesized" => QueryMode::Synthesized,
            other => return Err(config_err(format!("unknown query mode {other:?}"))),
        };
    }
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

pub fn elicit(a: crate::ElicitArgs) -> CliResult {
    let cfg = elicitation_config(&a)?;
    let model = load_model(&a.model)?;
    let adapter = a.adapter.as_deref().map(load_adapter).transpose()?;
    let text = read_text(&a.context_file)?;
    let context_id = a
        .context_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "context".into());
    let context = Context::new(&model, context_id, text).map_err(CliError::from)?;

    let ts = match &adapter {
        Some(ad) => {
            let view = ctxdistill::backend::AdaptedLm::new(&model, ad);
            build_transfer_set(&view, &context, &cfg)
        }
        None => build_transfer_set(&model, &context, &cfg),
    }
    .map_err(CliError::from)?;

    ts.write(&a.out).map_err(CliError::from)?;
    eprintln!(
        "[ctxdistill] elicited {} qa + {} open entries -> {}",
        ts.qa_count(),
        ts.open_count(),
        a.out.display()
    );
    record_manifest(
        &a.out,
        "elicit",
        serde_json::to_value(&cfg).map_err(|e| runtime(e))?,
        cfg.seed,
        &[&a.model, &a.context_file],
        &[&a.out],
        Some(serde_json::json!({ "qa": ts.qa_count(), "open": ts.open_count() })),
    )
}

fn selection_config(a: &crate::SelectArgs) -> Result<SelectionConfig, CliError> {
    let mut cfg: SelectionConfig = load_config_file(&a.config)?;
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.length_normalized {
        cfg.length_normalized = true;
    }
    if let Some(s) = &a.strategy {
        cfg.strategy = SelectionStrategy::parse(s).map_err(CliError::from)?;
    }
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

pub fn select(a: crate::SelectArgs) -> CliResult {
    let cfg = selection_config(&a)?;
    let model = load_model(&a.model)?;
    let adapter = a.adapter.as_deref().map(load_adapter).transpose()?;
    let ts = TransferSet::read(&a.transfer_set).map_err(CliError::from)?;
    let context =
        Context::new(&model, ts.context_id.clone(), ts.context_text.clone())
            .map_err(CliError::from)?;

    let view = ModelView {
        model: &model,
        adapter: adapter.as_ref(),
    };
    let scored = score_all(&view, &view, &context, &ts, &cfg).map_err(CliError::from)?;
    if cfg.k > scored.len() {
        eprintln!(
            "[ctxdistill] warning: k={} exceeds the {} scored entries; passing all through",
            cfg.k,
            scored.len()
        );
    }
    let picked = select_top_k(&scored, &cfg).map_err(CliError::from)?;
    ctxdistill::select::write_scored_set(&a.out, &ts, &scored, &picked, &cfg, &ts.config)
        .map_err(CliError::from)?;
    eprintln!(
        "[ctxdistill] scored {} entries, selected {} -> {}",
        scored.len(),
        picked.indices.len(),
        a.out.display()
    );
    record_manifest(
        &a.out,
        "select",
        serde_json::to_value(&cfg).map_err(|e| runtime(e))?,
        cfg.seed,
        &[&a.model, &a.transfer_set],
        &[&a.out],
        Some(serde_json::json!({ "scored": scored.len(), "selected": picked.indices.len() })),
    )
}

fn consolidation_config(a: &crate::ConsolidateArgs) -> Result<ConsolidationConfig, CliError> {
    let mut cfg: ConsolidationConfig = load_config_file(&a.config)?;
    if let Some(s) = &a.loss {
        cfg.loss = LossKind::parse(s).map_err(CliError::from)?;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.rank {
        cfg.adapter.rank = v;
    }
    if let Some(v) = a.alpha {
        cfg.adapter.alpha = v;
    }
    if let Some(v) = a.dropout {
        cfg.adapter.dropout = v;
    }
    if let Some(t) = &a.targets {
        cfg.adapter.targets = t
            .split(',')
            .map(|s| TargetMatrix::parse(s.trim()))
            .collect::<Result<_, _>>()
            .map_err(CliError::from)?;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(s) = &a.optimizer {
        cfg.optimizer = match s.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => return Err(config_err(format!("unknown optimizer {other:?}"))),
        };
    }
    if a.cache_teacher {
        cfg.cache_teacher = true;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

pub fn consolidate(a: crate::ConsolidateArgs) -> CliResult {
    let cfg = consolidation_config(&a)?;
    let model = load_model(&a.model)?;
    cfg.validate(model.config.n_layers).map_err(CliError::from)?;
    let prior = a.prior_adapter.as_deref().map(load_adapter).transpose()?;
    let scored = ScoredSetFile::read(&a.selected).map_err(CliError::from)?;
    let subset = scored.selected_transfer_set();
    let context = Context::new(&model, scored.context_id.clone(), scored.context_text.clone())
        .map_err(CliError::from)?;

    let (adapter, record) =
        ctxdistill::consolidate::consolidate(&model, prior.as_ref(), &context, &subset, &cfg)
            .map_err(CliError::from)?;
    adapter.write_checkpoint(&a.out).map_err(CliError::from)?;
    eprintln!(
        "[ctxdistill] trained {} epochs (best {}), dev {:.5} -> {:.5}; wrote {}",
        record.epochs_run,
        record.best_epoch,
        record.initial_dev_loss,
        record
            .dev_losses
            .iter()
            .cloned()
            .fold(record.initial_dev_loss, f64::min),
        a.out.display()
    );
    record_manifest(
        &a.out,
        "consolidate",
        serde_json::to_value(&cfg).map_err(|e| runtime(e))?,
        cfg.seed,
        &[&a.model, &a.selected],
        &[&a.out],
        Some(serde_json::to_value(&record).map_err(|e| runtime(e))?),
    )
}


pub fn stream(a: crate::StreamArgs) -> CliResult {
    let mut cfg: StreamConfig = load_config_file(&a.config)?;
    if let Some(v) = a.chunk_length {
        cfg.chunk_length = Some(v);
    }
    if let Some(v) = a.retention_ratio {
        cfg.retention_ratio = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }

    let model = load_model(&a.model)?;
    let text = read_text(&a.context_file)?;
    let context_id = a
        .context_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "context".into());
    let context = Context::new(&model, context_id, text).map_err(CliError::from)?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| runtime(e))?;
    let state = sequential_transform(&model, &context, &cfg)
        .map_err(|abort| runtime(format!("{abort}")))?;

    // Persist per-turn artifacts plus the final checkpoint.
    let mut manifest_entries = Vec::new();
    for turn in &state.turns {
        let ts_path = a.out_dir.join(format!("turn{:03}.transfer.jsonl", turn.turn));
        turn.transfer_set.write(&ts_path).map_err(CliError::from)?;
        let scored_path = a.out_dir.join(format!("turn{:03}.scored.jsonl", turn.turn));
        let picked = ctxdistill::select::TransferSetSubset {
            indices: turn.selected_indices.clone(),
            entries: turn
                .selected_indices
                .iter()
                .map(|&i| turn.scored[i].clone())
                .collect(),
        };
        let (_, s_cfg, _) = ctxdistill::stream::turn_configs(&cfg, turn.turn);
        ctxdistill::select::write_scored_set(
            &scored_path,
            &turn.transfer_set,
            &turn.scored,
            &picked,
            &s_cfg,
            &turn.transfer_set.config,
        )
        .map_err(CliError::from)?;
        manifest_entries.push(StreamManifestEntry {
            turn: turn.turn,
            chunk_start: turn.chunk_range.0,
            chunk_end: turn.chunk_range.1,
            transfer_set_file: ts_path.display().to_string(),
            scored_set_file: scored_path.display().to_string(),
            checkpoint_file: String::new(),
            record: turn.record.clone(),
        });
    }
    let ckpt_path = match (&state.adapter, &state.merged) {
        (Some(ad), _) => {
            let p = a.out_dir.join("final.adapter.lac");
            ad.write_checkpoint(&p).map_err(CliError::from)?;
            p
        }
        (None, Some(m)) => {
            let p = a.out_dir.join("final.model.lmt");
            m.save(&p).map_err(CliError::from)?;
            p
        }
        (None, None) => return Err(runtime("stream produced no turns (empty context)")),
    };
    for e in &mut manifest_entries {
        e.checkpoint_file = ckpt_path.display().to_string();
    }
    let stream_manifest = a.out_dir.join("stream.json");
    std::fs::write(
        &stream_manifest,
        serde_json::to_string_pretty(&manifest_entries).map_err(|e| runtime(e))?,
    )
    .map_err(|e| runtime(e))?;

    eprintln!(
        "[ctxdistill] {} turns over {} tokens; residual {} tokens; wrote {}",
        state.turn_index,
        context.tokens.len(),
        state.residual.tokens.len(),
        a.out_dir.display()
    );
    record_manifest(
        &stream_manifest,
        "stream",
        serde_json::to_value(&cfg).map_err(|e| runtime(e))?,
        cfg.seed,
        &[&a.model, &a.context_file],
        &[&stream_manifest, &ckpt_path],
        Some(serde_json::json!({ "turns": state.turn_index })),
    )
}

pub fn task(cmd: crate::TaskCmd) -> CliResult {
    use ctxdistill::eval::tasks;
    let (model_path, out, built): (PathBuf, PathBuf, TaskInstance) = match cmd {
        crate::TaskCmd::FactRecall(a) => {
            let model = load_model(&a.model)?;
            let t = tasks::gen_fact_recall(&model, a.seed, a.n_facts, a.n_probes)
                .map_err(CliError::from)?;
            (a.model, a.out, t)
        }
        crate::TaskCmd::ManyshotIcl(a) => {
            let model = load_model(&a.model)?;
            let t = tasks::gen_manyshot_icl(&model, a.seed, a.n_classes, a.n_shots, a.n_probes)
                .map_err(CliError::from)?;
            (a.model, a.out, t)
        }
        crate::TaskCmd::KnowledgeUpdate(a) => {
            let model = load_model(&a.model)?;
            let t = tasks::gen_knowledge_update(&model, a.seed, a.n_edits, a.hops)
                .map_err(CliError::from)?;
            (a.model, a.out, t)
        }
        crate::TaskCmd::TextGeneration(a) => {
            let model = load_model(&a.model)?;
            let corpus = read_text(&a.corpus)?;
            let t = tasks::gen_text_generation(&model, &corpus, a.seed).map_err(CliError::from)?;
            (a.model, a.out, t)
        }
    };
    built.write(&out).map_err(CliError::from)?;
    eprintln!(
        "[ctxdistill] task {} ({} probes, {} context tokens) -> {}",
        built.id,
        built.probes.len(),
        built.context.tokens.len(),
        out.display()
    );
    record_manifest(
        &out,
        "task-gen",
        serde_json::json!({ "id": built.id, "kind": built.kind }),
        0,
        &[&model_path],
        &[&out],
        None,
    )
}

pub fn eval(a: crate::EvalArgs) -> CliResult {
    let condition = Condition::parse(&a.condition).map_err(CliError::from)?;
    if condition == Condition::Consolidated && a.checkpoint.is_none() {
        return Err(config_err(
            "the consolidated condition requires --checkpoint",
        ));
    }
    let spec = ConditionSpec {
        condition,
        rho: a.rho,
    };
    spec.validate().map_err(CliError::from)?;

    let model = load_model(&a.model)?;
    let task = TaskInstance::read(&a.task_spec).map_err(CliError::from)?;
    let adapter = a.checkpoint.as_deref().map(load_adapter).transpose()?;

    let start = std::time::Instant::now();
    let source = adapter.as_ref().map(ConsolidatedSource::Adapter);
    let outcome = run_condition(&model, &task, &spec, source.as_ref()).map_err(CliError::from)?;

    // Bounds for the recovery rate alongside the requested condition.
    let bound = |c: Condition| -> Result<ConditionOutcome, CliError> {
        run_condition(
            &model,
            &task,
            &ConditionSpec {
                condition: c,
                rho: None,
            },
            None,
        )
        .map_err(CliError::from)
    };
    let upper = bound(Condition::FullContext)?;
    let lower = bound(Condition::NoContext)?;

    let mut record = ResultRecord {
        task: task.id.clone(),
        condition: condition.name().to_string(),
        rho: a.rho,
        metric: outcome.metric,
        m: outcome.score,
        u: upper.score,
        l: lower.score,
        r: None,
        seeds: vec![a.seed],
        runtime_s: start.elapsed().as_secs_f64(),
    };
    record.compute_recovery();
    write_results(&a.out, &[record.clone()]).map_err(CliError::from)?;
    eprintln!(
        "[ctxdistill] {} under {}: M={:?} U={:?} L={:?} R={:?} -> {}",
        task.id,
        condition.name(),
        record.m,
        record.u,
        record.l,
        record.r,
        a.out.display()
    );
    record_manifest(
        &a.out,
        "eval",
        serde_json::to_value(&spec).map_err(|e| runtime(e))?,
        a.seed,
        &[&a.model, &a.task_spec],
        &[&a.out],
        Some(serde_json::to_value(&record).map_err(|e| runtime(e))?),
    )
}

pub fn report(a: crate::ReportArgs) -> CliResult {
    let mut records: Vec<ResultRecord> = Vec::new();
    for path in &a.results {
        records.extend(read_results(path).map_err(CliError::from)?);
    }
    if records.is_empty() {
        return Err(config_err("no result records in the given files"));
    }

    // Columns: tasks in first-seen order. Bounds come from each task's own
    // U/L fields; rows are the non-bound conditions.
    let mut tasks: Vec<String> = Vec::new();
    for r in &records {
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
    }
    let find = |task: &str| -> Option<&ResultRecord> { records.iter().find(|r| r.task == task) };
    let upper: Vec<f64> = tasks
        .iter()
        .map(|t| find(t).and_then(|r| r.u).unwrap_or(f64::NAN))
        .collect();
    let lower: Vec<f64> = tasks
        .iter()
        .map(|t| find(t).and_then(|r| r.l).unwrap_or(f64::NAN))
        .collect();

    let mut row_labels: Vec<String> = Vec::new();
    for r in &records {
        if !row_labels.contains(&r.condition) {
            row_labels.push(r.condition.clone());
        }
    }
    let rows: Vec<(String, Vec<f64>)> = row_labels
        .into_iter()
        .map(|label| {
            let cells = tasks
                .iter()
                .map(|t| {
                    records
                        .iter()
                        .find(|r| r.task == *t && r.condition == label)
                        .and_then(|r| r.m)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            (label, cells)
        })
        .collect();

    let table = ReportTable {
        tasks,
        upper_label: "full_context".into(),
        upper,
        lower_label: "no_context".into(),
        lower,
        rows,
    };
    let rendered = match a.format.as_str() {
        "table" => render_table(&table).map_err(CliError::from)?,
        "machine" => render_machine(&table).map_err(CliError::from)?,
        other => return Err(config_err(format!("unknown report format {other:?}"))),
    };
    match &a.out {
        Some(path) => std::fs::write(path, rendered).map_err(|e| runtime(e))?,
        None => print!("{rendered}"),
    }
    Ok(())
}
