//! Sequential multi-turn transformation for contexts longer than the window:
//! each chunk is elicited, selected, and consolidated in order, and the
//! context window is cleared between turns.

use serde::{Deserialize, Serialize};

use crate::backend::{AdaptedLm, AdapterState, LmBackend, TinyTransformer, TokenSequence};
use crate::consolidate::{consolidate, ConsolidationConfig, TrainRecord};
use crate::elicit::{build_transfer_set, query_template, Context, ElicitationConfig, TransferSet};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::select::{score_all, select_top_k, ModelView, ScoredEntry, SelectionConfig};

/// How the adapter evolves across turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterContinuity {
    /// One live adapter, trained further on every turn (default).
    ContinueInPlace,
    /// Fold the turn's adapter into the base weights and start the next turn
    /// with a fresh zero adapter.
    MergeEachTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Tokens per turn; `None` scales the reference 5/8 of the window.
    pub chunk_length: Option<usize>,
    /// Fraction of the original context kept as literal prompt text after
    /// the transformation.
    pub retention_ratio: f64,
    pub elicitation: ElicitationConfig,
    pub selection: SelectionConfig,
    pub consolidation: ConsolidationConfig,
    pub continuity: AdapterContinuity,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            chunk_length: None,
            retention_ratio: 0.1,
            elicitation: ElicitationConfig::default(),
            selection: SelectionConfig::default(),
            consolidation: ConsolidationConfig::default(),
            continuity: AdapterContinuity::ContinueInPlace,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn effective_chunk_length(&self, window: usize) -> usize {
        self.chunk_length.unwrap_or_else(|| (window * 5 / 8).max(1))
    }

    pub fn validate(&self, backend: &dyn LmBackend) -> Result<()> {
        if !(0.0..=1.0).contains(&self.retention_ratio) {
            return Err(Error::Config(format!(
                "retention ratio {} not in [0, 1]",
                self.retention_ratio
            )));
        }
        let window = backend.context_window();
        let chunk = self.effective_chunk_length(window);
        if chunk == 0 {
            return Err(Error::Config("chunk_length must be >= 1".into()));
        }
        // The chunk must leave room for the elicitation prompts: the query
        // prompt wrapper in prompted mode, the query template plus one entry
        // in either mode.
        let mut overhead = backend
            .tokenize(&query_template(""))?
            .len()
            + self.elicitation.entry_length;
        if self.elicitation.query_mode == crate::elicit::QueryMode::Prompted {
            let wrapper = crate::elicit::build_query_prompt("", self.elicitation.queries_per_prompt);
            overhead = overhead.max(backend.tokenize(&wrapper)?.len() + 1);
        }
        if chunk + overhead > window {
            return Err(Error::Config(format!(
                "chunk_length {chunk} plus prompt overhead {overhead} exceeds the \
context window {window}"
            )));
        }
        Ok(())
    }
}

/// Per-turn seed derivation, shared by the streaming loop and by callers that
/// want to reproduce a single turn as a standalone pipeline run.
pub fn turn_configs(
    cfg: &StreamConfig,
    turn: usize,
) -> (ElicitationConfig, SelectionConfig, ConsolidationConfig) {
    let mut e = cfg.elicitation.clone();
    e.seed = derive_seed(cfg.seed, "turn-elicit", turn as u64);
    let mut s = cfg.selection.clone();
    s.seed = derive_seed(cfg.seed, "turn-select", turn as u64);
    let mut c = cfg.consolidation.clone();
    c.seed = derive_seed(cfg.seed, "turn-consolidate", turn as u64);
    (e, s, c)
}

/// Contiguous, non-overlapping, order-preserving chunks; all but the last
/// have exactly `chunk_length` tokens. Empty context gives no chunks.
pub fn chunk_context(
    backend: &dyn LmBackend,
    context: &Context,
    chunk_length: usize,
) -> Result<Vec<Context>> {
    if chunk_length == 0 {
        return Err(Error::Config("chunk_length must be >= 1".into()));
    }
    let n = context.tokens.len();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while start < n {
        let end = (start + chunk_length).min(n);
        let tokens = context.tokens.slice(start, end);
        out.push(Context::from_tokens(
            backend,
            format!("{}#chunk{}", context.id, i),
            tokens,
        ));
        start = end;
        i += 1;
    }
    Ok(out)
}

/// The last `round(rho * |c|)` tokens of the context (round half up).
pub fn retained_suffix(backend: &dyn LmBackend, context: &Context, rho: f64) -> Result<Context> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("retention ratio {rho} not in [0, 1]")));
    }
    let n = context.tokens.len();
    let keep = ((rho * n as f64).round() as usize).min(n);
    Ok(Context::from_tokens(
        backend,
        format!("{}#suffix", context.id),
        context.tokens.slice(n - keep, n),
    ))
}

/// Everything produced by one transformation turn.
#[derive(Debug, Clone)]
pub struct TurnArtifacts {
    pub turn: usize,
    /// Token offsets of the chunk within the full context.
    pub chunk_range: (usize, usize),
    pub transfer_set: TransferSet,
    pub scored: Vec<ScoredEntry>,
    pub selected_indices: Vec<usize>,
    pub record: TrainRecord,
}

/// State after (part of) a sequential transformation.
#[derive(Debug, Clone)]
pub struct StreamState {
    /// Number of consolidations performed.
    pub turn_index: usize,
    pub chunks_consumed: usize,
    /// Residual context kept for inference-time prompting.
    pub residual: Context,
    /// Live adapter under `ContinueInPlace`.
    pub adapter: Option<AdapterState>,
    /// Accumulated base model under `MergeEachTurn`.
    pub merged: Option<TinyTransformer>,
    pub turns: Vec<TurnArtifacts>,
}

impl StreamState {
    /// The model that answers queries after the transformation.
    pub fn final_view<'a>(
        &'a self,
        base: &'a TinyTransformer,
    ) -> (&'a TinyTransformer, Option<&'a AdapterState>) {
        match &self.merged {
            Some(m) => (m, None),
            None => (base, self.adapter.as_ref()),
        }
    }
}

/// A turn failed; the state up to the previous turn is preserved.
#[derive(Debug)]
pub struct StreamAbort {
    pub turn: usize,
    pub error: Error,
    pub last_good: Box<StreamState>,
}

impl std::fmt::Display for StreamAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "turn {} failed after {} completed turns: {}",
            self.turn, self.last_good.turn_index, self.error
        )
    }
}

impl std::error::Error for StreamAbort {}

/// Run the full sequential transformation: chunk the context, then for each
/// chunk elicit a transfer set with the current model, select the top-k, and
/// consolidate into the adapter. The residual suffix of the *full* context is
/// retained for inference.
pub fn sequential_transform(
    model: &TinyTransformer,
    long_context: &Context,
    cfg: &StreamConfig,
) -> std::result::Result<StreamState, StreamAbort> {
    let abort = |turn: usize, error: Error, state: &StreamState| StreamAbort {
        turn,
        error,
        last_good: Box::new(state.clone()),
    };

    let mut state = StreamState {
        turn_index: 0,
        chunks_consumed: 0,
        residual: Context {
            id: format!("{}#suffix", long_context.id),
            text: String::new(),
            tokens: TokenSequence::empty(),
        },
        adapter: None,
        merged: None,
        turns: Vec::new(),
    };

    if let Err(e) = cfg.validate(model) {
        return Err(abort(0, e, &state));
    }
    let chunk_length = cfg.effective_chunk_length(model.config.context_window);
    let chunks = match chunk_context(model, long_context, chunk_length) {
        Ok(c) => c,
        Err(e) => return Err(abort(0, e, &state)),
    };
    match retained_suffix(model, long_context, cfg.retention_ratio) {
        Ok(r) => state.residual = r,
        Err(e) => return Err(abort(0, e, &state)),
    }

    let mut offset = 0usize;
    for (turn, chunk) in chunks.iter().enumerate() {
        let result = run_turn(model, &mut state, chunk, cfg, turn, offset);
        if let Err(e) = result {
            return Err(abort(turn, e, &state));
        }
        offset += chunk.tokens.len();
    }
    Ok(state)
}

fn run_turn(
    model: &TinyTransformer,
    state: &mut StreamState,
    chunk: &Context,
    cfg: &StreamConfig,
    turn: usize,
    offset: usize,
) -> Result<()> {
    let (e_cfg, s_cfg, c_cfg) = turn_configs(cfg, turn);

    // θ_{i-1}: the base model plus whatever the previous turns produced.
    let merged_base = state.merged.as_ref();
    let base: &TinyTransformer = merged_base.unwrap_or(model);
    let prior = state.adapter.clone();

    let (transfer_set, scored, selected);
    {
        let adapted_view;
        let current: &dyn LmBackend = match prior.as_ref() {
            Some(ad) => {
                adapted_view = AdaptedLm::new(base, ad);
                &adapted_view
            }
            None => base,
        };
        transfer_set = build_transfer_set(current, chunk, &e_cfg)?;
        let view = ModelView {
            model: current,
            adapter: None,
        };
        scored = score_all(&view, &view, chunk, &transfer_set, &s_cfg)?;
        selected = select_top_k(&scored, &s_cfg)?;
    }
    let subset = selected.to_transfer_set(&transfer_set);

    let (new_adapter, record) = consolidate(base, prior.as_ref(), chunk, &subset, &c_cfg)?;

    match cfg.continuity {
        AdapterContinuity::ContinueInPlace => {
            state.adapter = Some(new_adapter);
        }
        AdapterContinuity::MergeEachTurn => {
            let merged = base.merge_adapter(&new_adapter)?;
            state.merged = Some(merged);
            state.adapter = None;
        }
    }
    state.turn_index += 1;
    state.chunks_consumed += 1;
    state.turns.push(TurnArtifacts {
        turn,
        chunk_range: (offset, offset + chunk.tokens.len()),
        transfer_set,
        scored,
        selected_indices: selected.indices,
        record,
    });
    Ok(())
}

/// Greedy decoding from `[c' ∥ query_template(question)]` under the final
/// transformed model.
pub fn infer_with_memory(
    model: &TinyTransformer,
    state: &StreamState,
    question: &TokenSequence,
    max_tokens: usize,
) -> Result<TokenSequence> {
    let (final_model, adapter) = state.final_view(model);
    let question_text = final_model.detokenize(question);
    let template = final_model.tokenize(&query_template(&question_text))?;
    let prompt = state.residual.tokens.concat(&template);
    final_model.sample(adapter, &prompt, 0.0, max_tokens, 0)
}

/// One entry of the stream manifest written by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamManifestEntry {
    pub turn: usize,
    pub chunk_start: usize,
    pub chunk_end: usize,
    pub transfer_set_file: String,
    pub scored_set_file: String,
    pub checkpoint_file: String,
    pub record: TrainRecord,
}
