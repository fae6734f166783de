//! Transfer-set elicitation: prompt the context-conditioned teacher for
//! queries, grounded responses, and open-ended continuations.

mod generate;
mod prompt;

pub use generate::{
    build_transfer_set, generate_open_continuations, generate_queries, generate_responses,
    queries_from_spans,
};
pub use prompt::{build_query_prompt, parse_queries, query_template, QUERY_END_SENTINEL};

use serde::{Deserialize, Serialize};

use crate::backend::{LmBackend, TokenSequence};
use crate::error::{Error, Result};

/// A context to internalize, with its tokenization pinned at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    pub text: String,
    pub tokens: TokenSequence,
}

impl Context {
    pub fn new(
        backend: &dyn LmBackend,
        id: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self> {
        let text = text.into();
        let tokens = backend.tokenize(&text)?;
        Ok(Context {
            id: id.into(),
            text,
            tokens,
        })
    }

    pub fn from_tokens(
        backend: &dyn LmBackend,
        id: impl Into<String>,
        tokens: TokenSequence,
    ) -> Self {
        Context {
            id: id.into(),
            text: backend.detokenize(&tokens),
            tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Qa,
    Open,
}

/// One elicited (query, response) pair or open continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub context_id: String,
    pub kind: EntryKind,
    pub query_text: String,
    pub response_text: String,
    pub query_tokens: TokenSequence,
    pub response_tokens: TokenSequence,
    pub seed: u64,
    /// Hash of the full teacher prompt used to sample the response; records
    /// that the context was present.
    pub prompt_hash: String,
}

/// How queries are obtained from the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Sample the hybrid query-elicitation prompt and parse the numbered
    /// output (requires an instruction-following model).
    Prompted,
    /// Derive cloze-style queries from context spans; fallback for models
    /// below instruction-following scale. Flagged in the config snapshot.
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationConfig {
    pub n_qa: usize,
    pub n_open: usize,
    pub entry_length: usize,
    pub queries_per_prompt: usize,
    pub temperature: f64,
    pub seed: u64,
    pub query_mode: QueryMode,
    pub max_parse_retries: usize,
}

impl Default for ElicitationConfig {
    fn default() -> Self {
        ElicitationConfig {
            n_qa: 200,
            n_open: 200,
            entry_length: 512,
            queries_per_prompt: 20,
            temperature: 1.0,
            seed: 0,
            query_mode: QueryMode::Prompted,
            max_parse_retries: 5,
        }
    }
}

impl ElicitationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_qa + self.n_open == 0 {
            return Err(Error::Config("n_qa and n_open cannot both be zero".into()));
        }
        if self.entry_length == 0 {
            return Err(Error::Config("entry_length must be >= 1".into()));
        }
        if self.queries_per_prompt == 0 {
            return Err(Error::Config("queries_per_prompt must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The elicited corpus for one context, with the config snapshot that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSet {
    pub context_id: String,
    /// Carried along so later stages can rebuild teacher prompts without the
    /// original context file.
    pub context_text: String,
    pub config: ElicitationConfig,
    pub entries: Vec<TransferEntry>,
}

impl TransferSet {
    pub fn qa_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Qa).count()
    }

    pub fn open_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Open).count()
    }

    /// Line-delimited serialization: a header record with the config
    /// snapshot, then one record per entry.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = serde_json::json!({
            "format": "transfer-set",
            "version": 1,
            "context_id": self.context_id,
            "context_text": self.context_text,
            "config": self.config,
        });
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path_for_err: &str) -> Result<TransferSet> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = match lines.next() {
            Some(l) => serde_json::from_str(l)?,
            None => {
                return Err(Error::FileFormat {
                    path: path_for_err.into(),
                    detail: "empty transfer-set file".into(),
                })
            }
        };
        if header.get("format").and_then(|v| v.as_str()) != Some("transfer-set") {
            return Err(Error::FileFormat {
                path: path_for_err.into(),
                detail: "missing transfer-set header".into(),
            });
        }
        let config: ElicitationConfig = serde_json::from_value(header["config"].clone())?;
        let context_id = header["context_id"].as_str().unwrap_or_default().to_string();
        let context_text = header["context_text"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        let mut entries = Vec::new();
        for l in lines {
            entries.push(serde_json::from_str(l)?);
        }
        Ok(TransferSet {
            context_id,
            context_text,
            config,
            entries,
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<TransferSet> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text, &path.display().to_string())
    }
}
