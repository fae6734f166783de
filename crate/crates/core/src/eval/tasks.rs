//! Synthetic task generators. Entities and values are pseudo-words drawn
//! from invented syllable inventories, so a desk-scale model cannot answer
//! from pretraining: the no-context bound genuinely reflects zero context.

use serde::{Deserialize, Serialize};

use crate::backend::LmBackend;
use crate::elicit::Context;
use crate::error::{Error, Result};
use crate::eval::report::MetricKind;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FactRecall,
    ManyshotIcl,
    KnowledgeUpdate,
    TextGeneration,
    MultipleChoice,
}

impl TaskKind {
    pub fn metric(&self) -> MetricKind {
        match self {
            TaskKind::TextGeneration => MetricKind::Perplexity,
            TaskKind::MultipleChoice => MetricKind::Accuracy,
            _ => MetricKind::ExactMatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Probe {
    Qa {
        question: String,
        gold: String,
    },
    Continuation {
        prefix: String,
        gold: String,
    },
    Choice {
        question: String,
        options: Vec<String>,
        gold: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub kind: TaskKind,
    pub context: Context,
    pub probes: Vec<Probe>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        if self.probes.is_empty() {
            return Err(Error::EmptyInput(format!("probes of task {}", self.id)));
        }
        for (i, p) in self.probes.iter().enumerate() {
            match p {
                Probe::Qa { gold, .. } | Probe::Continuation { gold, .. } => {
                    if gold.is_empty() {
                        return Err(Error::EmptyInput(format!("gold of probe {i}")));
                    }
                }
                Probe::Choice { options, gold, .. } => {
                    if *gold >= options.len() {
                        return Err(Error::Config(format!(
                            "probe {i}: gold index {gold} out of {} options",
                            options.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<TaskInstance> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// CV-syllable pseudo-word, optionally forced to start with `first`.
fn pseudo_word(rng: &mut Rng, syllables: usize, first: Option<u8>) -> String {
    let mut w = String::new();
    for s in 0..syllables {
        let c = if s == 0 {
            first.unwrap_or_else(|| CONSONANTS[rng.below(CONSONANTS.len())])
        } else {
            CONSONANTS[rng.below(CONSONANTS.len())]
        };
        let v = VOWELS[rng.below(VOWELS.len())];
        w.push(c as char);
        w.push(v as char);
    }
    w
}

fn distinct_words(rng: &mut Rng, n: usize, syllables: usize) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syllables, None);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Document of invented entity-attribute sentences; probes are cloze
/// questions whose gold answers appear verbatim in the context.
pub fn gen_fact_recall(
    backend: &dyn LmBackend,
    seed: u64,
    n_facts: usize,
    n_probes: usize,
) -> Result<TaskInstance> {
    if n_facts == 0 || n_probes == 0 {
        return Err(Error::Config("n_facts and n_probes must be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let entities = distinct_words(&mut rng, n_facts, 2);
    let values = distinct_words(&mut rng, n_facts, 2);
    let mut text = String::new();
    for (e, v) in entities.iter().zip(values.iter()) {
        text.push_str(&format!("{e} is {v}.\n"));
    }
    let mut probe_idx: Vec<usize> = (0..n_facts).collect();
    rng.shuffle(&mut probe_idx);
    let probes = probe_idx
        .iter()
        .cycle()
        .take(n_probes)
        .map(|&i| Probe::Qa {
            question: format!("{} is", entities[i]),
            gold: format!("{}.", values[i]),
        })
        .collect();
    Ok(TaskInstance {
        id: format!("fact-recall-{seed}"),
        kind: TaskKind::FactRecall,
        context: Context::new(backend, format!("fact-recall-{seed}-ctx"), text)?,
        probes,
    })
}

/// Synthetic many-shot classification. The class of a word is its first
/// consonant; class labels are remapped to random distinct numerals under
/// the seed, so the mapping can only come from the shots. Probes are
/// held-out words.
pub fn gen_manyshot_icl(
    backend: &dyn LmBackend,
    seed: u64,
    n_classes: usize,
    n_shots: usize,
    n_probes: usize,
) -> Result<TaskInstance> {
    if n_classes < 2 || n_classes > CONSONANTS.len() {
        return Err(Error::Config(format!(
            "n_classes must be in 2..={}",
            CONSONANTS.len()
        )));
    }
    if n_shots < n_classes || n_probes == 0 {
        return Err(Error::Config(
            "need at least one shot per class and one probe".into(),
        ));
    }
    let mut rng = Rng::new(seed);

    // Class characters and their randomly assigned numeric labels.
    let mut chars: Vec<u8> = CONSONANTS.to_vec();
    rng.shuffle(&mut chars);
    let class_chars: Vec<u8> = chars[..n_classes].to_vec();
    let label_pool_max = if n_classes <= 10 { 10 } else { 100 };
    let mut labels: Vec<usize> = (0..label_pool_max).collect();
    rng.shuffle(&mut labels);
    let class_labels: Vec<usize> = labels[..n_classes].to_vec();

    let mut shot_words = std::collections::HashSet::new();
    let mut text = String::new();
    for s in 0..n_shots {
        // First n_classes shots cover every class once; the rest are random.
        let class = if s < n_classes { s } else { rng.below(n_classes) };
        let word = loop {
            let w = pseudo_word(&mut rng, 3, Some(class_chars[class]));
            if shot_words.insert(w.clone()) {
                break w;
            }
        };
        text.push_str(&format!("{word} -> {}\n", class_labels[class]));
    }

    let mut probes = Vec::with_capacity(n_probes);
    while probes.len() < n_probes {
        let class = rng.below(n_classes);
        let w = pseudo_word(&mut rng, 3, Some(class_chars[class]));
        if shot_words.contains(&w) {
            continue;
        }
        probes.push(Probe::Qa {
            question: format!("{w} ->"),
            gold: class_labels[class].to_string(),
        });
    }
    Ok(TaskInstance {
        id: format!("manyshot-icl-{seed}"),
        kind: TaskKind::ManyshotIcl,
        context: Context::new(backend, format!("manyshot-icl-{seed}-ctx"), text)?,
        probes,
    })
}

/// Counterfactual edits over a synthetic fact base. The edited mapping is a
/// permutation over the entity set, so multi-hop probes can chain edits; the
/// edit always contradicts the original mapping (rejection-sampled).
/// Returns the task plus the original (pre-edit) mapping for verification.
pub fn gen_knowledge_update_full(
    backend: &dyn LmBackend,
    seed: u64,
    n_edits: usize,
    hops: usize,
) -> Result<(TaskInstance, Vec<(String, String)>)> {
    if n_edits < 2 {
        return Err(Error::Config("need at least 2 edits".into()));
    }
    if !(1..=2).contains(&hops) {
        return Err(Error::Config("hops must be 1 or 2".into()));
    }
    let mut rng = Rng::new(seed);
    let entities = distinct_words(&mut rng, n_edits, 2);

    // Original and edited maps are permutations of the entity set; resample
    // until they disagree everywhere so every edit is a real contradiction.
    let mut orig: Vec<usize> = (0..n_edits).collect();
    rng.shuffle(&mut orig);
    let edited: Vec<usize> = loop {
        let mut e: Vec<usize> = (0..n_edits).collect();
        rng.shuffle(&mut e);
        if e.iter().zip(orig.iter()).all(|(a, b)| a != b) {
            break e;
        }
    };

    let mut text = String::new();
    for i in 0..n_edits {
        text.push_str(&format!("{} maps to {}.\n", entities[i], entities[edited[i]]));
    }

    let mut probes = Vec::with_capacity(n_edits);
    for i in 0..n_edits {
        match hops {
            1 => probes.push(Probe::Qa {
                question: format!("{} maps to", entities[i]),
                gold: format!("{}.", entities[edited[i]]),
            }),
            _ => {
                let two = edited[edited[i]];
                probes.push(Probe::Qa {
                    question: format!("{} maps to twice", entities[i]),
                    gold: format!("{}.", entities[two]),
                });
            }
        }
    }
    let original_pairs = (0..n_edits)
        .map(|i| (entities[i].clone(), entities[orig[i]].clone()))
        .collect();
    Ok((
        TaskInstance {
            id: format!("knowledge-update-{seed}-h{hops}"),
            kind: TaskKind::KnowledgeUpdate,
            context: Context::new(backend, format!("knowledge-update-{seed}-ctx"), text)?,
            probes,
        },
        original_pairs,
    ))
}

pub fn gen_knowledge_update(
    backend: &dyn LmBackend,
    seed: u64,
    n_edits: usize,
    hops: usize,
) -> Result<TaskInstance> {
    gen_knowledge_update_full(backend, seed, n_edits, hops).map(|(t, _)| t)
}

/// Reference slice lengths for text generation.
pub const TEXT_GEN_CONTEXT_TOKENS: usize = 2048;
pub const TEXT_GEN_TARGET_TOKENS: usize = 256;

/// Slice a context segment and the following target segment out of a corpus,
/// scaled down proportionally when the backend window is smaller than the
/// reference lengths.
pub fn gen_text_generation(backend: &dyn LmBackend, corpus: &str, seed: u64) -> Result<TaskInstance> {
    let tokens = backend.tokenize(corpus)?;
    let window = backend.context_window();
    let (mut ctx_len, mut tgt_len) = (TEXT_GEN_CONTEXT_TOKENS, TEXT_GEN_TARGET_TOKENS);
    let budget = window.saturating_sub(8);
    if ctx_len + tgt_len > budget {
        let scale = budget as f64 / (ctx_len + tgt_len) as f64;
        ctx_len = ((ctx_len as f64 * scale) as usize).max(16);
        tgt_len = ((tgt_len as f64 * scale) as usize).max(4);
    }
    if tokens.len() < ctx_len + tgt_len {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than the {} needed for a slice",
            tokens.len(),
            ctx_len + tgt_len
        )));
    }
    let mut rng = Rng::new(seed);
    let start = rng.below(tokens.len() - ctx_len - tgt_len + 1);
    let ctx_tokens = tokens.slice(start, start + ctx_len);
    let tgt_tokens = tokens.slice(start + ctx_len, start + ctx_len + tgt_len);
    Ok(TaskInstance {
        id: format!("text-generation-{seed}"),
        kind: TaskKind::TextGeneration,
        context: Context::from_tokens(backend, format!("text-generation-{seed}-ctx"), ctx_tokens),
        probes: vec![Probe::Continuation {
            prefix: String::new(),
            gold: backend.detokenize(&tgt_tokens),
        }],
    })
}
