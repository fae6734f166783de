//! Synthetic pretraining corpus for the reference backend.
//!
//! Episodes mirror the shapes the pipeline evaluates on: fact documents with
//! a templated query block, many-shot label-mapping documents with a query
//! block, and free-running pseudo-word text. Entities, values, and label
//! assignments are freshly random per episode, so the only learnable skill
//! is reading the answer out of the document (in-context copying), not any
//! particular fact.

use serde::{Deserialize, Serialize};

use crate::backend::{LmBackend, TokenSequence};
use crate::elicit::query_template;
use crate::error::Result;
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_fact_episodes: usize,
    pub n_icl_episodes: usize,
    pub n_open_episodes: usize,
    pub facts_per_doc: (usize, usize),
    pub shots_per_doc: (usize, usize),
    pub classes_per_doc: (usize, usize),
    /// Upper bound on extra query blocks appended per episode.
    pub queries_per_episode: usize,
    /// Episodes consisting of a random line repeated verbatim: dense
    /// training signal for the in-context copying circuit that fact lookup
    /// and label lookup both rely on.
    pub n_copy_episodes: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_fact_episodes: 1500,
            n_icl_episodes: 1500,
            n_open_episodes: 500,
            facts_per_doc: (4, 24),
            shots_per_doc: (6, 36),
            classes_per_doc: (2, 5),
            queries_per_episode: 3,
            n_copy_episodes: 800,
            seed: 0,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut Rng, syllables: usize, first: Option<u8>) -> String {
    let mut w = String::new();
    for s in 0..syllables {
        let c = if s == 0 {
            first.unwrap_or_else(|| CONSONANTS[rng.below(CONSONANTS.len())])
        } else {
            CONSONANTS[rng.below(CONSONANTS.len())]
        };
        w.push(c as char);
        w.push(VOWELS[rng.below(VOWELS.len())] as char);
    }
    w
}

fn between(rng: &mut Rng, range: (usize, usize)) -> usize {
    range.0 + rng.below(range.1 - range.0 + 1)
}

fn fact_episode(rng: &mut Rng, cfg: &CorpusConfig) -> String {
    let k = between(rng, cfg.facts_per_doc);
    let mut entities = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    let mut text = String::new();
    for _ in 0..k {
        let e = pseudo_word(rng, 2, None);
        let v = pseudo_word(rng, 2, None);
        text.push_str(&format!("{e} is {v}.\n"));
        entities.push(e);
        values.push(v);
    }
    // Several query blocks per document: the answer spans are the copy-skill
    // supervision, so one block per episode trains it too thinly.
    let blocks = 1 + rng.below(cfg.queries_per_episode);
    for _ in 0..blocks {
        let q = rng.below(k);
        text.push_str(&query_template(&format!("{} is", entities[q])));
        text.push_str(&format!("{}.\n", values[q]));
    }
    text.pop();
    text
}

fn icl_episode(rng: &mut Rng, cfg: &CorpusConfig) -> String {
    let n_classes = between(rng, cfg.classes_per_doc).min(CONSONANTS.len());
    let shots = between(rng, cfg.shots_per_doc).max(n_classes);
    let mut chars: Vec<u8> = CONSONANTS.to_vec();
    rng.shuffle(&mut chars);
    let class_chars = &chars[..n_classes];
    let mut labels: Vec<usize> = (0..10).collect();
    rng.shuffle(&mut labels);

    let mut text = String::new();
    for s in 0..shots {
        let class = if s < n_classes { s } else { rng.below(n_classes) };
        let w = pseudo_word(rng, 3, Some(class_chars[class]));
        text.push_str(&format!("{w} -> {}\n", labels[class]));
    }
    let blocks = 1 + rng.below(cfg.queries_per_episode);
    for _ in 0..blocks {
        let probe_class = rng.below(n_classes);
        let probe = pseudo_word(rng, 3, Some(class_chars[probe_class]));
        text.push_str(&query_template(&format!("{probe} ->")));
        text.push_str(&format!("{}\n", labels[probe_class]));
    }
    text.pop();
    text
}

fn copy_episode(rng: &mut Rng) -> String {
    // A few distinct lines, then echoes of randomly chosen originals: the
    // echo is predictable only by matching its prefix against an earlier
    // line and copying what followed there.
    let n_lines = 1 + rng.below(4);
    let lines: Vec<String> = (0..n_lines)
        .map(|_| {
            let words = 3 + rng.below(6);
            (0..words)
                .map(|_| pseudo_word(rng, 2, None))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut text = String::new();
    for line in &lines {
        text.push_str(line);
        text.push('\n');
    }
    let echoes = 2 + rng.below(4);
    for _ in 0..echoes {
        text.push_str(&lines[rng.below(n_lines)]);
        text.push('\n');
    }
    text.pop();
    text
}

fn open_episode(rng: &mut Rng) -> String {
    let sentences = 2 + rng.below(4);
    let mut text = String::new();
    for _ in 0..sentences {
        let words = 3 + rng.below(5);
        let sentence: Vec<String> = (0..words).map(|_| pseudo_word(rng, 2, None)).collect();
        text.push_str(&sentence.join(" "));
        text.push_str(".\n");
    }
    text
}

/// Generate the tokenized episode list. Order is interleaved by derived
/// seeds, so the composition is deterministic in the config. Episodes that
/// would overflow the backend window are regenerated with a derived retry
/// seed.
pub fn synthetic_mixed_corpus(
    backend: &dyn LmBackend,
    cfg: &CorpusConfig,
) -> Result<Vec<TokenSequence>> {
    let window = backend.context_window();
    let fitted = |label: &str, i: usize, gen: &mut dyn FnMut(&mut Rng) -> String| -> Result<TokenSequence> {
        for attempt in 0..64u64 {
            let mut rng = Rng::new(derive_seed(
                cfg.seed,
                label,
                (i as u64) << 8 | attempt,
            ));
            let tokens = backend.tokenize(&gen(&mut rng))?;
            if tokens.len() <= window {
                return Ok(tokens);
            }
        }
        Err(crate::error::Error::Config(format!(
            "cannot fit a {label} episode into a {window}-token window; \
shrink facts_per_doc/shots_per_doc"
        )))
    };

    let mut episodes =
        Vec::with_capacity(cfg.n_fact_episodes + cfg.n_icl_episodes + cfg.n_open_episodes);
    for i in 0..cfg.n_fact_episodes {
        episodes.push(fitted("corpus-fact", i, &mut |rng| fact_episode(rng, cfg))?);
    }
    for i in 0..cfg.n_icl_episodes {
        episodes.push(fitted("corpus-icl", i, &mut |rng| icl_episode(rng, cfg))?);
    }
    for i in 0..cfg.n_open_episodes {
        episodes.push(fitted("corpus-open", i, &mut |rng| open_episode(rng))?);
    }
    for i in 0..cfg.n_copy_episodes {
        episodes.push(fitted("corpus-copy", i, &mut |rng| copy_episode(rng))?);
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    Rng::new(derive_seed(cfg.seed, "corpus-order", 0)).shuffle(&mut order);
    Ok(order.into_iter().map(|i| episodes[i].clone()).collect())
}

/// Per-target loss weights for an episode: `answer_weight` on the characters
/// of every response line (the span between `Response:\n` and its newline,
/// terminator included), 1 elsewhere. Target `t` is the episode's token `t`,
/// with one trailing entry for the end marker.
pub fn answer_weights(
    backend: &dyn LmBackend,
    episode: &TokenSequence,
    answer_weight: f64,
) -> Vec<f64> {
    let text = backend.detokenize(episode);
    let mut weights = vec![1.0; episode.len() + 1];
    let marker = "Response:\n";
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(pos) = text[from..].find(marker) {
        let start = from + pos + marker.len();
        let mut end = start;
        while end < bytes.len() && bytes[end] != b'\n' {
            end += 1;
        }
        // Include the line terminator (or the end marker slot at text end).
        let end_incl = (end + 1).min(weights.len());
        for w in &mut weights[start..end_incl.max(start)] {
            *w = answer_weight;
        }
        from = end;
        if from >= text.len() {
            break;
        }
    }
    weights
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::dummy::UniformLm;
    use crate::backend::tokenizer::VOCAB_SIZE;

    #[test]
    fn corpus_is_deterministic_and_complete() {
        let model = UniformLm::new(VOCAB_SIZE, 1 << 20);
        let cfg = CorpusConfig {
            n_fact_episodes: 10,
            n_icl_episodes: 10,
            n_open_episodes: 5,
            n_copy_episodes: 5,
            seed: 3,
            ..CorpusConfig::default()
        };
        let a = synthetic_mixed_corpus(&model, &cfg).unwrap();
        let b = synthetic_mixed_corpus(&model, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|e| !e.is_empty()));
    }

    #[test]
    fn answer_weights_cover_response_spans() {
        let model = UniformLm::new(VOCAB_SIZE, 1 << 20);
        let text = "aa is bb.\nQuery:\naa is\nResponse:\nbb.\nQuery:\naa is\nResponse:\nbb.";
        let ep = model.tokenize(text).unwrap();
        let w = answer_weights(&model, &ep, 5.0);
        assert_eq!(w.len(), ep.len() + 1);
        let first = text.find("Response:\n").unwrap() + 10;
        // "bb." plus its newline carry the answer weight.
        assert_eq!(&w[first..first + 4], &[5.0; 4]);
        // The second answer runs to text end: its weight covers the
        // end-marker slot too.
        assert_eq!(w[ep.len()], 5.0);
        // Document positions stay at 1.
        assert_eq!(w[0], 1.0);
        let doc_chars = text.find("Query:").unwrap();
        assert!(w[..doc_chars].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn fact_episodes_embed_answerable_queries() {
        let model = UniformLm::new(VOCAB_SIZE, 1 << 20);
        for i in 0..20 {
            let mut rng = Rng::new(i);
            let text = fact_episode(&mut rng, &CorpusConfig::default());
            let _ = model.tokenize(&text).unwrap();
            let (doc, rest) = text.split_once("Query:\n").unwrap();
            // Every query block's answer must match the document.
            for block in rest.split("Query:\n") {
                let (q, tail) = block.split_once("\nResponse:\n").unwrap();
                let answer = tail.lines().next().unwrap();
                let entity = q.strip_suffix(" is").unwrap();
                assert!(doc.contains(&format!("{entity} is {answer}")), "{text}");
            }
        }
    }

    #[test]
    fn icl_episodes_are_consistent_with_their_mapping() {
        for i in 0..20 {
            let mut rng = Rng::new(100 + i);
            let text = icl_episode(&mut rng, &CorpusConfig::default());
            let (doc, rest) = text.split_once("Query:\n").unwrap();
            let lookup: std::collections::HashMap<char, String> = doc
                .lines()
                .map(|line| {
                    let (w, l) = line.split_once(" -> ").unwrap();
                    (w.chars().next().unwrap(), l.to_string())
                })
                .collect();
            for block in rest.split("Query:\n") {
                let (q, tail) = block.split_once("\nResponse:\n").unwrap();
                let answer = tail.lines().next().unwrap();
                let probe_word = q.strip_suffix(" ->").unwrap();
                let first = probe_word.chars().next().unwrap();
                assert_eq!(lookup[&first], answer, "{text}");
            }
        }
    }
}
