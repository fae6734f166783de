//! Evaluation harness: task instances, metrics, experiment conditions, and
//! recovery-rate reporting.

pub mod report;
pub mod tasks;

pub use report::{MetricKind, ReportTable, ResultRecord};
pub use tasks::{
    gen_fact_recall, gen_knowledge_update, gen_manyshot_icl, gen_text_generation, Probe,
    TaskInstance, TaskKind,
};

use serde::{Deserialize, Serialize};

use crate::backend::{AdapterState, LmBackend, TinyTransformer, TokenSequence};
use crate::elicit::query_template;
use crate::error::{Error, Result};
use crate::stream::{retained_suffix, sequential_transform, StreamConfig};

/// Pinned answer normalization: lowercase, collapse runs of whitespace to a
/// single space, strip surrounding (not internal) punctuation. No article
/// stripping.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .trim()
        .to_string()
}

pub fn exact_match(prediction: &str, gold: &str) -> u32 {
    u32::from(normalize_answer(prediction) == normalize_answer(gold))
}

/// `exp(-(1/|target|) * sum log P(target_t | ...))`.
pub fn perplexity(
    model: &dyn LmBackend,
    adapter: Option<&AdapterState>,
    prefix: &TokenSequence,
    target: &TokenSequence,
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::EmptyInput("perplexity target".into()));
    }
    let lps = model.score_logprobs(adapter, prefix, target)?;
    Ok((-lps.iter().sum::<f64>() / lps.len() as f64).exp())
}

pub fn mc_accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("multiple-choice predictions".into()));
    }
    let correct = predictions
        .iter()
        .zip(golds.iter())
        .filter(|(p, g)| p == g)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// `R = (M - L) / (U - L)`; undefined when the bounds coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RecoveryRate {
    Defined(f64),
    Undefined,
}

impl RecoveryRate {
    pub fn value(&self) -> Option<f64> {
        match self {
            RecoveryRate::Defined(v) => Some(*v),
            RecoveryRate::Undefined => None,
        }
    }
}

pub fn recovery_rate(m: f64, u: f64, l: f64) -> RecoveryRate {
    if u == l {
        RecoveryRate::Undefined
    } else {
        RecoveryRate::Defined((m - l) / (u - l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    FullContext,
    NoContext,
    LocalContext,
    Consolidated,
}

impl Condition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" | "full_context" => Ok(Condition::FullContext),
            "none" | "no_context" => Ok(Condition::NoContext),
            "local" | "local_context" => Ok(Condition::LocalContext),
            "consolidated" => Ok(Condition::Consolidated),
            other => Err(Error::Config(format!("unknown condition {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Condition::FullContext => "full_context",
            Condition::NoContext => "no_context",
            Condition::LocalContext => "local_context",
            Condition::Consolidated => "consolidated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub condition: Condition,
    pub rho: Option<f64>,
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<()> {
        let needs_rho = matches!(
            self.condition,
            Condition::LocalContext | Condition::Consolidated
        );
        match (needs_rho, self.rho) {
            (true, None) => Err(Error::Config(format!(
                "condition {} requires a retention ratio",
                self.condition.name()
            ))),
            (false, Some(_)) => Err(Error::Config(format!(
                "condition {} does not take a retention ratio",
                self.condition.name()
            ))),
            (_, Some(r)) if !(0.0..=1.0).contains(&r) => {
                Err(Error::Config(format!("retention ratio {r} not in [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Where the consolidated condition gets its parameters from.
pub enum ConsolidatedSource<'a> {
    /// Use an already-trained adapter checkpoint.
    Adapter(&'a AdapterState),
    /// Run the transformation pipeline (single or sequential) in place.
    Pipeline(&'a StreamConfig),
}

/// Aggregated outcome of evaluating one task under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub metric: MetricKind,
    /// Mean metric over probes; `None` when the prompt exceeded the window.
    pub score: Option<f64>,
    pub exceeds_window: bool,
    pub n_probes: usize,
}

/// Tokens generated per answer before taking the first line.
pub const ANSWER_BUDGET: usize = 48;

/// Evaluate `task` under `spec`. For the consolidated condition a
/// [`ConsolidatedSource`] must be supplied.
pub fn run_condition(
    model: &TinyTransformer,
    task: &TaskInstance,
    spec: &ConditionSpec,
    consolidated: Option<&ConsolidatedSource>,
) -> Result<ConditionOutcome> {
    spec.validate()?;
    task.validate()?;

    // Resolve the prompt prefix and adapter for this condition.
    let (prefix, adapter): (TokenSequence, Option<&AdapterState>) = match spec.condition {
        Condition::FullContext => (task.context.tokens.clone(), None),
        Condition::NoContext => (TokenSequence::empty(), None),
        Condition::LocalContext => (
            retained_suffix(model, &task.context, spec.rho.unwrap())?.tokens,
            None,
        ),
        Condition::Consolidated => {
            let rho = spec.rho.unwrap();
            let residual = retained_suffix(model, &task.context, rho)?.tokens;
            match consolidated {
                None => {
                    return Err(Error::Config(
                        "consolidated condition needs an adapter or pipeline config".into(),
                    ))
                }
                Some(ConsolidatedSource::Adapter(ad)) => (residual, Some(*ad)),
                Some(ConsolidatedSource::Pipeline(stream_cfg)) => {
                    let mut cfg = (*stream_cfg).clone();
                    cfg.retention_ratio = rho;
                    let state = sequential_transform(model, &task.context, &cfg)
                        .map_err(|abort| abort.error)?;
                    let (final_model, adapter) = state.final_view(model);
                    return score_probes(final_model, adapter, &state.residual.tokens, task);
                }
            }
        }
    };

    score_probes(model, adapter, &prefix, task)
}

fn score_probes(
    model: &TinyTransformer,
    adapter: Option<&AdapterState>,
    prefix: &TokenSequence,
    task: &TaskInstance,
) -> Result<ConditionOutcome> {
    let window = model.context_window();
    let metric = task.kind.metric();
    let mut total = 0.0;
    let mut n = 0usize;

    for probe in &task.probes {
        match probe {
            Probe::Qa { question, gold } => {
                let template = model.tokenize(&query_template(question))?;
                let prompt = prefix.concat(&template);
                if prompt.len() + 1 > window {
                    return Ok(ConditionOutcome {
                        metric,
                        score: None,
                        exceeds_window: true,
                        n_probes: task.probes.len(),
                    });
                }
                let budget = ANSWER_BUDGET.min(window - prompt.len());
                let out = model.sample(adapter, &prompt, 0.0, budget, 0)?;
                let prediction = first_line(&model.detokenize(&out));
                total += exact_match(&prediction, gold) as f64;
                n += 1;
            }
            Probe::Continuation {
                prefix: probe_prefix,
                gold,
            } => {
                let pp = model.tokenize(probe_prefix)?;
                let gold_tokens = model.tokenize(gold)?;
                let prompt = prefix.concat(&pp);
                if prompt.len() + gold_tokens.len() > window {
                    return Ok(ConditionOutcome {
                        metric,
                        score: None,
                        exceeds_window: true,
                        n_probes: task.probes.len(),
                    });
                }
                total += perplexity(model, adapter, &prompt, &gold_tokens)?;
                n += 1;
            }
            Probe::Choice {
                question,
                options,
                gold,
            } => {
                let rendered = render_choice_question(question, options);
                let template = model.tokenize(&query_template(&rendered))?;
                let prompt = prefix.concat(&template);
                if prompt.len() + 1 > window {
                    return Ok(ConditionOutcome {
                        metric,
                        score: None,
                        exceeds_window: true,
                        n_probes: task.probes.len(),
                    });
                }
                let budget = 8.min(window - prompt.len());
                let out = model.sample(adapter, &prompt, 0.0, budget, 0)?;
                let prediction = parse_choice_index(&model.detokenize(&out), options.len());
                total += f64::from(prediction == Some(*gold));
                n += 1;
            }
        }
    }
    Ok(ConditionOutcome {
        metric,
        score: Some(total / n as f64),
        exceeds_window: false,
        n_probes: n,
    })
}

/// First line of the greedy output, trimmed: the extracted answer.
pub fn first_line(text: &str) -> String {
    text.lines().next().unwrap_or("").trim().to_string()
}

fn render_choice_question(question: &str, options: &[String]) -> String {
    let mut s = String::from(question);
    for (i, opt) in options.iter().enumerate() {
        s.push_str(&format!("\n{}) {}", i + 1, opt));
    }
    s
}

/// Leading integer of the first line, 1-based, mapped to an option index.
fn parse_choice_index(text: &str, n_options: usize) -> Option<usize> {
    let line = first_line(text);
    let digits: String = line.chars().take_while(|c| c.is_ascii_digit()).collect();
    let v: usize = digits.parse().ok()?;
    (1..=n_options).contains(&v).then(|| v - 1)
}
