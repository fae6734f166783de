//! Transfer-entry generation against a teacher backend.

use std::collections::HashSet;

use crate::backend::{LmBackend, TokenSequence};
use crate::elicit::prompt::{build_query_prompt, parse_queries, query_template};
use crate::elicit::{Context, ElicitationConfig, EntryKind, QueryMode, TransferEntry, TransferSet};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a64};

fn hash_prompt(tokens: &TokenSequence) -> String {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in &tokens.0 {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    format!("{:016x}", fnv1a64(&bytes))
}

/// Upper bound on sampled tokens per query-batch call.
const QUERY_TOKEN_BUDGET_PER_QUERY: usize = 48;

/// Collect `n_qa` distinct queries for the context. Prompted mode samples
/// the elicitation prompt repeatedly with derived seeds and parses the
/// numbered output; synthesized mode derives cloze queries from context
/// spans deterministically.
pub fn generate_queries(
    model: &dyn LmBackend,
    context: &Context,
    config: &ElicitationConfig,
) -> Result<Vec<String>> {
    config.validate()?;
    if config.n_qa == 0 {
        return Ok(Vec::new());
    }
    match config.query_mode {
        QueryMode::Synthesized => Ok(queries_from_spans(context, config.n_qa)),
        QueryMode::Prompted => {
            let prompt_text = build_query_prompt(&context.text, config.queries_per_prompt);
            let prompt = model.tokenize(&prompt_text)?;
            let window = model.context_window();
            if prompt.len() >= window {
                return Err(Error::WindowOverflow {
                    got: prompt.len(),
                    window,
                    detail: "query prompt; chunk the context with the streaming pipeline".into(),
                });
            }
            let budget = (config.queries_per_prompt * QUERY_TOKEN_BUDGET_PER_QUERY)
                .min(window - prompt.len());

            let mut seen = HashSet::new();
            let mut queries = Vec::new();
            let mut failures = 0usize;
            let mut batch = 0u64;
            while queries.len() < config.n_qa {
                let seed = derive_seed(config.seed, "query-batch", batch);
                batch += 1;
                let sampled =
                    model.sample(None, &prompt, config.temperature, budget, seed)?;
                let raw = model.detokenize(&sampled);
                let before = queries.len();
                match parse_queries(&raw, config.queries_per_prompt) {
                    Ok(parsed) => {
                        for q in parsed {
                            if queries.len() >= config.n_qa {
                                break;
                            }
                            if seen.insert(q.clone()) {
                                queries.push(q);
                            }
                        }
                    }
                    Err(_) => {}
                }
                if queries.len() == before {
                    // Parse failure or all duplicates: both burn one retry.
                    failures += 1;
                    if failures > config.max_parse_retries {
                        return Err(Error::QueryParse {
                            attempts: failures,
                            raw,
                        });
                    }
                } else {
                    failures = 0;
                }
            }
            Ok(queries)
        }
    }
}

/// Cloze-style query synthesis: each non-empty context line with at least two
/// whitespace-separated tokens yields the line minus its last token; further
/// passes strip one more token each until `n_qa` distinct queries exist or
/// the spans are exhausted.
pub fn queries_from_spans(context: &Context, n_qa: usize) -> Vec<String> {
    let lines: Vec<Vec<&str>> = context
        .text
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|words| words.len() >= 2)
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let max_strip = lines.iter().map(|w| w.len() - 1).max().unwrap_or(0);
    for strip in 1..=max_strip {
        for words in &lines {
            if out.len() >= n_qa {
                return out;
            }
            if words.len() > strip {
                let q = words[..words.len() - strip].join(" ");
                if seen.insert(q.clone()) {
                    out.push(q);
                }
            }
        }
    }
    out
}

/// One teacher response per query, sampled with the full context in the
/// prompt and truncated to `entry_length` tokens. Queries whose prompt does
/// not fit the window are skipped with a warning; if every query is skipped
/// the call fails.
pub fn generate_responses(
    model: &dyn LmBackend,
    context: &Context,
    queries: &[String],
    config: &ElicitationConfig,
) -> Result<Vec<TransferEntry>> {
    let window = model.context_window();
    let mut entries = Vec::with_capacity(queries.len());
    let mut skipped = 0usize;
    for (i, q) in queries.iter().enumerate() {
        let template_tokens = model.tokenize(&query_template(q))?;
        let prompt = context.tokens.concat(&template_tokens);
        if prompt.len() >= window {
            eprintln!(
                "[ctxdistill] warning: skipping query {i} for context {:?}: \
prompt of {} tokens leaves no room in window {window}",
                context.id,
                prompt.len()
            );
            skipped += 1;
            continue;
        }
        let budget = config.entry_length.min(window - prompt.len());
        let seed = derive_seed(config.seed, "qa-response", i as u64);
        let response = model.sample(None, &prompt, config.temperature, budget, seed)?;
        if response.is_empty() {
            eprintln!(
                "[ctxdistill] warning: query {i} for context {:?} produced an empty response",
                context.id
            );
            skipped += 1;
            continue;
        }
        let response_text = model.detokenize(&response);
        entries.push(TransferEntry {
            context_id: context.id.clone(),
            kind: EntryKind::Qa,
            query_text: q.clone(),
            response_text,
            query_tokens: model.tokenize(q)?,
            response_tokens: response,
            seed,
            prompt_hash: hash_prompt(&prompt),
        });
    }
    if !queries.is_empty() && skipped == queries.len() {
        return Err(Error::AllEntriesFailed(format!(
            "all {skipped} query prompts overflowed the window or produced empty responses"
        )));
    }
    Ok(entries)
}

/// Open-ended continuations sampled from the raw context tokens (no
/// instruction wrapper), one derived seed per entry.
pub fn generate_open_continuations(
    model: &dyn LmBackend,
    context: &Context,
    config: &ElicitationConfig,
) -> Result<Vec<TransferEntry>> {
    if config.n_open == 0 {
        return Ok(Vec::new());
    }
    let window = model.context_window();
    if context.tokens.len() >= window {
        return Err(Error::WindowOverflow {
            got: context.tokens.len(),
            window,
            detail: "open continuation prompt; chunk the context with the streaming pipeline"
                .into(),
        });
    }
    let budget = config.entry_length.min(window - context.tokens.len());
    let prompt_hash = hash_prompt(&context.tokens);
    let mut entries = Vec::with_capacity(config.n_open);
    let mut skipped = 0usize;
    for i in 0..config.n_open {
        let seed = derive_seed(config.seed, "open", i as u64);
        let response = model.sample(None, &context.tokens, config.temperature, budget, seed)?;
        if response.is_empty() {
            skipped += 1;
            continue;
        }
        let response_text = model.detokenize(&response);
        entries.push(TransferEntry {
            context_id: context.id.clone(),
            kind: EntryKind::Open,
            query_text: String::new(),
            response_text,
            query_tokens: TokenSequence::empty(),
            response_tokens: response,
            seed,
            prompt_hash: prompt_hash.clone(),
        });
    }
    if skipped == config.n_open {
        return Err(Error::AllEntriesFailed(format!(
            "all {skipped} open continuations were empty"
        )));
    }
    Ok(entries)
}

/// Full elicitation: `n_qa` query-response pairs plus `n_open` open
/// continuations under one config snapshot.
pub fn build_transfer_set(
    model: &dyn LmBackend,
    context: &Context,
    config: &ElicitationConfig,
) -> Result<TransferSet> {
    config.validate()?;
    let mut entries = Vec::new();
    if config.n_qa > 0 {
        let queries = generate_queries(model, context, config)?;
        entries.extend(generate_responses(model, context, &queries, config)?);
    }
    if config.n_open > 0 {
        entries.extend(generate_open_continuations(model, context, config)?);
    }
    Ok(TransferSet {
        context_id: context.id.clone(),
        context_text: context.text.clone(),
        config: config.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::dummy::{ScriptedLm, UniformLm};

    fn ctx(model: &dyn LmBackend, text: &str) -> Context {
        Context::new(model, "ctx-test", text).unwrap()
    }

    fn small_config() -> ElicitationConfig {
        ElicitationConfig {
            n_qa: 2,
            n_open: 2,
            entry_length: 16,
            queries_per_prompt: 20,
            temperature: 1.0,
            seed: 7,
            query_mode: QueryMode::Prompted,
            max_parse_retries: 5,
        }
    }

    #[test]
    fn scripted_block_yields_first_two_queries() {
        let script = (1..=20)
            .map(|i| format!("{i}. query number {i}?"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n|||||";
        let model = ScriptedLm::new(&script, 8192);
        let context = ctx(&model, "some text.\n");
        let qs = generate_queries(&model, &context, &small_config()).unwrap();
        assert_eq!(qs, vec!["query number 1?", "query number 2?"]);
    }

    #[test]
    fn same_seed_same_queries() {
        let model = UniformLm::new(crate::backend::tokenizer::VOCAB_SIZE, 65536);
        let context = ctx(&model, "abc def.\nghi jkl.\n");
        let cfg = ElicitationConfig {
            n_qa: 3,
            query_mode: QueryMode::Synthesized,
            ..small_config()
        };
        let a = generate_queries(&model, &context, &cfg).unwrap();
        let b = generate_queries(&model, &context, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn span_synthesizer_strips_last_token_first() {
        let model = UniformLm::new(crate::backend::tokenizer::VOCAB_SIZE, 1024);
        let context = ctx(&model, "zuvo is kelar.\nwabo -> 7\nshort\n");
        let qs = queries_from_spans(&context, 10);
        assert_eq!(qs[0], "zuvo is");
        assert_eq!(qs[1], "wabo ->");
        // second pass strips two tokens
        assert!(qs.contains(&"zuvo".to_string()));
        assert!(qs.contains(&"wabo".to_string()));
        assert!(!qs.iter().any(|q| q == "short"));
    }

    #[test]
    fn parse_failure_exhausts_retry_budget() {
        // Script with no numbered lines: every batch fails to parse.
        let model = ScriptedLm::new("nothing numbered here", 8192);
        let context = ctx(&model, "text.\n");
        match generate_queries(&model, &context, &small_config()) {
            Err(Error::QueryParse { attempts, .. }) => assert_eq!(attempts, 6),
            other => panic!("expected QueryParse, got {other:?}"),
        }
    }

    #[test]
    fn empty_query_list_gives_empty_entries() {
        let model = UniformLm::new(crate::backend::tokenizer::VOCAB_SIZE, 1024);
        let context = ctx(&model, "body.\n");
        let entries = generate_responses(&model, &context, &[], &small_config()).unwrap();
        assert!(entries.is_empty());
    }

    #[test]
    fn responses_respect_entry_length() {
        let model = UniformLm::new(crate::backend::tokenizer::VOCAB_SIZE, 4096);
        let context = ctx(&model, "doc line one.\n");
        let cfg = ElicitationConfig {
            entry_length: 8,
            ..small_config()
        };
        let queries = vec!["q one".to_string(), "q two".to_string()];
        let entries = generate_responses(&model, &context, &queries, &cfg).unwrap();
        assert_eq!(entries.len(), 2);
        for e in &entries {
            assert!(e.response_tokens.len() <= 8);
            assert_eq!(e.kind, EntryKind::Qa);
            assert!(!e.query_text.is_empty());
        }
    }

    #[test]
    fn open_continuations_counted_and_seeded() {
        let model = UniformLm::new(crate::backend::tokenizer::VOCAB_SIZE, 4096);
        let context = ctx(&model, "raw context text\n");
        let cfg = ElicitationConfig {
            n_open: 5,
            entry_length: 12,
            ..small_config()
        };
        let a = generate_open_continuations(&model, &context, &cfg).unwrap();
        let b = generate_open_continuations(&model, &context, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for e in &a {
            assert_eq!(e.kind, EntryKind::Open);
            assert!(e.query_tokens.is_empty());
            assert!(e.response_tokens.len() <= 12);
        }
        // Distinct seeds per entry.
        let seeds: HashSet<u64> = a.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 5);
    }

    #[test]
    fn transfer_set_counts_and_round_trip() {
        let script = (1..=20)
            .map(|i| format!("{i}. q{i}"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n|||||";
        let model = ScriptedLm::new(&script, 1 << 20);
        let context = ctx(&model, "context body.\n");
        let cfg = ElicitationConfig {
            n_qa: 2,
            n_open: 2,
            entry_length: 16,
            ..small_config()
        };
        let ts = build_transfer_set(&model, &context, &cfg).unwrap();
        assert_eq!(ts.qa_count(), 2);
        assert_eq!(ts.open_count(), 2);
        assert_eq!(ts.entries.len(), 4);

        let text = ts.to_jsonl().unwrap();
        let back = TransferSet::from_jsonl(&text, "mem").unwrap();
        assert_eq!(back, ts);

        // Deterministic bytes for identical inputs.
        let ts2 = build_transfer_set(&model, &context, &cfg).unwrap();
        assert_eq!(ts2.to_jsonl().unwrap(), text);
    }

    #[test]
    fn qa_entries_record_context_bearing_prompt_hash() {
        let script = "1. only query\n|||||";
        let model = ScriptedLm::new(script, 1 << 20);
        let context = ctx(&model, "the context body.\n");
        let cfg = ElicitationConfig {
            n_qa: 1,
            n_open: 0,
            ..small_config()
        };
        let ts = build_transfer_set(&model, &context, &cfg).unwrap();
        let entry = &ts.entries[0];
        let expected_prompt = context
            .tokens
            .concat(&model.tokenize(&query_template(&entry.query_text)).unwrap());
        assert_eq!(entry.prompt_hash, hash_prompt(&expected_prompt));
    }
}
