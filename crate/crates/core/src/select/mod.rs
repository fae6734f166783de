//! Path selection: refine a transfer set to the entries whose responses the
//! context-conditioned teacher finds most more-probable than the
//! context-free student.

use serde::{Deserialize, Serialize};

use crate::backend::{AdapterState, LmBackend, TokenSequence};
use crate::elicit::{query_template, Context, ElicitationConfig, EntryKind, TransferEntry, TransferSet};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ranking strategies. `Ppl` is the main method; `Kl` and `Random` are the
/// ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Ppl,
    Kl,
    Random,
}

impl SelectionStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ppl" => Ok(SelectionStrategy::Ppl),
            "kl" => Ok(SelectionStrategy::Kl),
            "random" => Ok(SelectionStrategy::Random),
            other => Err(Error::Config(format!("unknown selection strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    /// Divide the log-probability gap by the response length. Off by
    /// default: the ranking quantity is a sum of per-token log-probability
    /// differences.
    pub length_normalized: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: 200,
            strategy: SelectionStrategy::Ppl,
            seed: 0,
            length_normalized: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("selection k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Teacher and student views used for scoring. The student is the current
/// pre-consolidation model: the base model on the first turn, the prior
/// turn's merged/adapted model on later turns.
pub struct ModelView<'a> {
    pub model: &'a dyn LmBackend,
    pub adapter: Option<&'a AdapterState>,
}

impl<'a> ModelView<'a> {
    pub fn bare(model: &'a dyn LmBackend) -> Self {
        ModelView {
            model,
            adapter: None,
        }
    }
}

/// A transfer entry with its scores. `delta_ppl` is always the difference of
/// summed log-probabilities; `kl` is filled only under the KL strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entry: TransferEntry,
    pub delta_ppl: f64,
    pub teacher_logprob_sum: f64,
    pub student_logprob_sum: f64,
    pub kl: Option<f64>,
    /// Scoring prompt overflowed the window; ranked below all scored entries
    /// instead of failing the batch.
    pub excluded: bool,
}

/// Prompts for scoring one entry: the teacher conditions on the context, the
/// student sees only the query template (or nothing, for open entries).
fn scoring_prefixes(
    backend: &dyn LmBackend,
    context: &Context,
    entry: &TransferEntry,
) -> Result<(TokenSequence, TokenSequence)> {
    match entry.kind {
        EntryKind::Qa => {
            let template = backend.tokenize(&query_template(&entry.query_text))?;
            Ok((context.tokens.concat(&template), template))
        }
        EntryKind::Open => Ok((context.tokens.clone(), TokenSequence::empty())),
    }
}

/// Gap between teacher-conditional and student-unconditional sequence
/// log-probability of the response:
/// `sum_t log P_teacher(r_t | c, q, r_<t) - sum_t log P_student(r_t | q, r_<t)`.
pub fn ppl_discrepancy(
    teacher: &ModelView,
    student: &ModelView,
    context: &Context,
    entry: &TransferEntry,
    length_normalized: bool,
) -> Result<f64> {
    let (teacher_prefix, student_prefix) = scoring_prefixes(teacher.model, context, entry)?;
    let t_sum: f64 = teacher
        .model
        .score_logprobs(teacher.adapter, &teacher_prefix, &entry.response_tokens)?
        .iter()
        .sum();
    let s_sum: f64 = student
        .model
        .score_logprobs(student.adapter, &student_prefix, &entry.response_tokens)?
        .iter()
        .sum();
    let mut delta = t_sum - s_sum;
    if length_normalized && !entry.response_tokens.is_empty() {
        delta /= entry.response_tokens.len() as f64;
    }
    Ok(delta)
}

/// Mean forward KL between the teacher's and student's next-token
/// distributions over the response positions. Zero for empty responses.
pub fn kl_score(
    teacher: &ModelView,
    student: &ModelView,
    context: &Context,
    entry: &TransferEntry,
) -> Result<f64> {
    if entry.response_tokens.is_empty() {
        return Ok(0.0);
    }
    let (teacher_prefix, student_prefix) = scoring_prefixes(teacher.model, context, entry)?;
    let t_rows = teacher
        .model
        .next_token_distributions(teacher.adapter, &teacher_prefix, &entry.response_tokens)?
        .rows;
    let s_rows = student
        .model
        .next_token_distributions(student.adapter, &student_prefix, &entry.response_tokens)?
        .rows;
    let mask = vec![true; t_rows.len()];
    crate::consolidate::losses::loss_fkl(&t_rows, &s_rows, &mask)
}

/// Score every entry, preserving order. Window overflow marks the entry
/// excluded instead of failing the batch.
pub fn score_all(
    teacher: &ModelView,
    student: &ModelView,
    context: &Context,
    transfer_set: &TransferSet,
    config: &SelectionConfig,
) -> Result<Vec<ScoredEntry>> {
    let mut out = Vec::with_capacity(transfer_set.entries.len());
    for entry in &transfer_set.entries {
        let scores = (|| -> Result<(f64, f64, Option<f64>)> {
            let (teacher_prefix, student_prefix) =
                scoring_prefixes(teacher.model, context, entry)?;
            let t_sum: f64 = teacher
                .model
                .score_logprobs(teacher.adapter, &teacher_prefix, &entry.response_tokens)?
                .iter()
                .sum();
            let s_sum: f64 = student
                .model
                .score_logprobs(student.adapter, &student_prefix, &entry.response_tokens)?
                .iter()
                .sum();
            let kl = match config.strategy {
                SelectionStrategy::Kl => Some(kl_score(teacher, student, context, entry)?),
                _ => None,
            };
            Ok((t_sum, s_sum, kl))
        })();
        match scores {
            Ok((t_sum, s_sum, kl)) => {
                let mut delta = t_sum - s_sum;
                if config.length_normalized && !entry.response_tokens.is_empty() {
                    delta /= entry.response_tokens.len() as f64;
                }
                out.push(ScoredEntry {
                    entry: entry.clone(),
                    delta_ppl: delta,
                    teacher_logprob_sum: t_sum,
                    student_logprob_sum: s_sum,
                    kl,
                    excluded: false,
                });
            }
            Err(Error::WindowOverflow { .. }) => out.push(ScoredEntry {
                entry: entry.clone(),
                delta_ppl: f64::NEG_INFINITY,
                teacher_logprob_sum: f64::NEG_INFINITY,
                student_logprob_sum: f64::NEG_INFINITY,
                kl: None,
                excluded: true,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Keep the top-k entries per the configured strategy. Ties break toward the
/// smaller original index; excluded entries rank below everything. If
/// `k >= |scored|` all entries pass through in original order (with a
/// warning at the call site).
pub fn select_top_k(scored: &[ScoredEntry], config: &SelectionConfig) -> Result<TransferSetSubset> {
    config.validate()?;
    if scored.is_empty() {
        return Err(Error::EmptyInput("scored entry list".into()));
    }
    let n = scored.len();
    let chosen: Vec<usize> = if config.k >= n {
        (0..n).collect()
    } else {
        match config.strategy {
            SelectionStrategy::Ppl | SelectionStrategy::Kl => {
                let key = |i: usize| -> f64 {
                    let s = &scored[i];
                    if s.excluded {
                        return f64::NEG_INFINITY;
                    }
                    match config.strategy {
                        SelectionStrategy::Ppl => s.delta_ppl,
                        SelectionStrategy::Kl => s.kl.unwrap_or(s.delta_ppl),
                        SelectionStrategy::Random => unreachable!(),
                    }
                };
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    key(b)
                        .partial_cmp(&key(a))
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                let mut keep = order[..config.k].to_vec();
                keep.sort_unstable();
                keep
            }
            SelectionStrategy::Random => {
                let mut rng = Rng::new(config.seed);
                let mut order: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut order);
                let mut keep = order[..config.k].to_vec();
                keep.sort_unstable();
                keep
            }
        }
    };
    Ok(TransferSetSubset {
        indices: chosen.clone(),
        entries: chosen.iter().map(|&i| scored[i].clone()).collect(),
    })
}

/// The refined subset, in original transfer-set order, with provenance
/// indices into the scored list.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSetSubset {
    pub indices: Vec<usize>,
    pub entries: Vec<ScoredEntry>,
}

impl TransferSetSubset {
    /// Rebuild a plain transfer set (for consolidation input).
    pub fn to_transfer_set(&self, parent: &TransferSet) -> TransferSet {
        TransferSet {
            context_id: parent.context_id.clone(),
            context_text: parent.context_text.clone(),
            config: parent.config.clone(),
            entries: self.entries.iter().map(|s| s.entry.clone()).collect(),
        }
    }
}

/// Scored-set file: the transfer-set format with score fields per record.
pub fn write_scored_set(
    path: &std::path::Path,
    parent: &TransferSet,
    scored: &[ScoredEntry],
    selected: &TransferSetSubset,
    config: &SelectionConfig,
    elicitation: &ElicitationConfig,
) -> Result<()> {
    let header = serde_json::json!({
        "format": "scored-set",
        "version": 1,
        "context_id": parent.context_id,
        "context_text": parent.context_text,
        "elicitation_config": elicitation,
        "selection_config": config,
        "selected_indices": selected.indices,
    });
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for s in scored {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub struct ScoredSetFile {
    pub context_id: String,
    pub context_text: String,
    pub elicitation_config: ElicitationConfig,
    pub selection_config: SelectionConfig,
    pub selected_indices: Vec<usize>,
    pub scored: Vec<ScoredEntry>,
}

impl ScoredSetFile {
    pub fn read(path: &std::path::Path) -> Result<ScoredSetFile> {
        let text = std::fs::read_to_string(path)?;
        let p = path.display().to_string();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = match lines.next() {
            Some(l) => serde_json::from_str(l)?,
            None => {
                return Err(Error::FileFormat {
                    path: p,
                    detail: "empty scored-set file".into(),
                })
            }
        };
        if header.get("format").and_then(|v| v.as_str()) != Some("scored-set") {
            return Err(Error::FileFormat {
                path: p,
                detail: "missing scored-set header".into(),
            });
        }
        let mut scored = Vec::new();
        for l in lines {
            scored.push(serde_json::from_str(l)?);
        }
        Ok(ScoredSetFile {
            context_id: header["context_id"].as_str().unwrap_or_default().to_string(),
            context_text: header["context_text"].as_str().unwrap_or_default().to_string(),
            elicitation_config: serde_json::from_value(header["elicitation_config"].clone())?,
            selection_config: serde_json::from_value(header["selection_config"].clone())?,
            selected_indices: serde_json::from_value(header["selected_indices"].clone())?,
            scored,
        })
    }

    /// The selected subset as a transfer set for consolidation.
    pub fn selected_transfer_set(&self) -> TransferSet {
        TransferSet {
            context_id: self.context_id.clone(),
            context_text: self.context_text.clone(),
            config: self.elicitation_config.clone(),
            entries: self
                .selected_indices
                .iter()
                .map(|&i| self.scored[i].entry.clone())
                .collect(),
        }
    }
}
