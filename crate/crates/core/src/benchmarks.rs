//! Adapters for external hallucination benchmarks.
//!
//! Each adapter reads a user-supplied file in the upstream schema (a JSON
//! array or JSONL), maps every item to a binary-labelled [`HalluRecord`] and
//! scores predictions with the benchmark's customary metric.
//!
//! Accepted item shapes:
//!
//! | benchmark | fields |
//! |---|---|
//! | HaluEval QA | `question`, `right_answer`, `hallucinated_answer`, optional `knowledge`; or flat `question`, `answer`, `hallucination` |
//! | HaluEval dialogue | `dialogue_history`, `right_response`, `hallucinated_response`, optional `knowledge`; or flat `dialogue_history`, `response`, `hallucination` |
//! | HaluEval summarization | `document`, `right_summary`, `hallucinated_summary`; or flat `document`, `summary`, `hallucination` |
//! | HaluEval general | `user_query`, `chatgpt_response`, `hallucination` (or `hallucination_label`), optional `ID` |
//! | FactCHD | `query`, `response`, `label` (`FACTUAL` / `NON-FACTUAL`), optional `id` |
//! | FaithBench | `sample_id`, `source`, `summary`, `annotations` |
//!
//! Paired HaluEval items carry both a correct and a hallucinated answer; the
//! adapter keeps one of them, chosen by a seeded coin per item.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{HalluRecord, Status};
use crate::detection::Prediction;
use crate::metrics::{align, classification_metrics, micro_f1_positive, MetricsError, Weighted};
use crate::rng::substream;
use crate::taxonomy::{collapse_binary, Label, TaskKindId};

/// Query appended after the document for summarization benchmarks.
pub const SUMMARIZE_QUERY: &str = "Summarize the above document.";

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("unknown benchmark {0:?}")]
    UnknownBenchmark(String),
    #[error("failed to read benchmark file: {0}")]
    Io(#[from] std::io::Error),
    #[error("item {index}: {message}")]
    Schema { index: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BenchmarkName {
    #[serde(rename = "halueval-dial")]
    HaluEvalDial,
    #[serde(rename = "halueval-gen")]
    HaluEvalGen,
    #[serde(rename = "halueval-qa")]
    HaluEvalQa,
    #[serde(rename = "halueval-summ")]
    HaluEvalSumm,
    #[serde(rename = "factchd")]
    FactChd,
    #[serde(rename = "faithbench")]
    FaithBench,
}

impl BenchmarkName {
    pub const ALL: [BenchmarkName; 6] = [
        BenchmarkName::HaluEvalDial,
        BenchmarkName::HaluEvalGen,
        BenchmarkName::HaluEvalQa,
        BenchmarkName::HaluEvalSumm,
        BenchmarkName::FactChd,
        BenchmarkName::FaithBench,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkName::HaluEvalDial => "halueval-dial",
            BenchmarkName::HaluEvalGen => "halueval-gen",
            BenchmarkName::HaluEvalQa => "halueval-qa",
            BenchmarkName::HaluEvalSumm => "halueval-summ",
            BenchmarkName::FactChd => "factchd",
            BenchmarkName::FaithBench => "faithbench",
        }
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkName {
    type Err = BenchmarkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        BenchmarkName::ALL
            .into_iter()
            .find(|b| b.as_str() == key)
            .ok_or_else(|| BenchmarkError::UnknownBenchmark(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    MicroF1Positive,
    BaAndMacroF1,
}

/// Which source fields feed the detector prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub context_source: Option<&'static str>,
    pub query_source: &'static str,
    pub response_source: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchmarkSpec {
    pub name: BenchmarkName,
    pub metric: MetricKind,
    pub task_kind: TaskKindId,
    pub placement: Placement,
}

impl BenchmarkSpec {
    pub fn of(name: BenchmarkName) -> BenchmarkSpec {
        let (metric, task_kind, context, query, response) = match name {
            BenchmarkName::HaluEvalDial => (
                MetricKind::Accuracy,
                TaskKindId::Dialogue,
                Some("knowledge"),
                "dialogue_history",
                "response",
            ),
            BenchmarkName::HaluEvalGen => (
                MetricKind::Accuracy,
                TaskKindId::InstructionFollowing,
                None,
                "user_query",
                "chatgpt_response",
            ),
            BenchmarkName::HaluEvalQa => (
                MetricKind::Accuracy,
                TaskKindId::ShortFormQa,
                Some("knowledge"),
                "question",
                "answer",
            ),
            BenchmarkName::HaluEvalSumm => (
                MetricKind::Accuracy,
                TaskKindId::Summarization,
                Some("document"),
                "<fixed summarization query>",
                "summary",
            ),
            BenchmarkName::FactChd => (
                MetricKind::MicroF1Positive,
                TaskKindId::ShortFormQa,
                None,
                "query",
                "response",
            ),
            BenchmarkName::FaithBench => (
                MetricKind::BaAndMacroF1,
                TaskKindId::Summarization,
                Some("source"),
                "<fixed summarization query>",
                "summary",
            ),
        };
        BenchmarkSpec {
            name,
            metric,
            task_kind,
            placement: Placement {
                context_source: context,
                query_source: query,
                response_source: response,
            },
        }
    }
}

/// Joins the context and query portions of a detector input.
pub fn compose_input(context: Option<&str>, query: &str) -> String {
    match context {
        Some(c) if !c.trim().is_empty() => format!("{c}\n\n{query}"),
        _ => query.to_string(),
    }
}

fn parse_items(text: &str) -> Result<Vec<Value>, BenchmarkError> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| BenchmarkError::Schema {
            index: 0,
            message: format!("invalid JSON array: {e}"),
        });
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(index, l)| {
            serde_json::from_str(l).map_err(|e| BenchmarkError::Schema {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

struct Item<'a> {
    index: usize,
    obj: &'a Map<String, Value>,
}

impl<'a> Item<'a> {
    fn err(&self, message: impl Into<String>) -> BenchmarkError {
        BenchmarkError::Schema {
            index: self.index,
            message: message.into(),
        }
    }

    fn has(&self, key: &str) -> bool {
        self.obj.contains_key(key)
    }

    fn opt_text(&self, key: &str) -> Result<Option<String>, BenchmarkError> {
        match self.obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            // Dialogue histories are sometimes stored as turn lists.
            Some(Value::Array(turns)) if turns.iter().all(Value::is_string) => Ok(Some(
                turns
                    .iter()
                    .filter_map(Value::as_str)
                    .collect::<Vec<_>>()
                    .join("\n"),
            )),
            Some(Value::Number(n)) => Ok(Some(n.to_string())),
            Some(_) => Err(self.err(format!("field {key:?} must be a string"))),
        }
    }

    fn text(&self, key: &str) -> Result<String, BenchmarkError> {
        self.opt_text(key)?
            .filter(|s| !s.is_empty())
            .ok_or_else(|| self.err(format!("missing field {key:?}")))
    }

    fn yes_no(&self, keys: &[&str]) -> Result<bool, BenchmarkError> {
        for key in keys {
            match self.obj.get(*key) {
                None => continue,
                Some(Value::Bool(b)) => return Ok(*b),
                Some(Value::String(s)) => {
                    return match s.trim().to_ascii_lowercase().as_str() {
                        "yes" | "true" => Ok(true),
                        "no" | "false" => Ok(false),
                        other => Err(self.err(format!("field {key:?} must be yes or no, got {other:?}"))),
                    }
                }
                Some(_) => return Err(self.err(format!("field {key:?} must be yes or no"))),
            }
        }
        Err(self.err(format!("missing field {:?}", keys[0])))
    }
}

fn record(
    spec: &BenchmarkSpec,
    id: String,
    task_input: String,
    output: String,
    hallucinated: bool,
) -> HalluRecord {
    let mut extra = Map::new();
    extra.insert("benchmark".into(), Value::String(spec.name.as_str().into()));
    HalluRecord {
        source_id: id.clone(),
        id,
        task_kind: spec.task_kind,
        task_input,
        output,
        label: if hallucinated {
            Label::BinaryHallucinated
        } else {
            Label::NoHallucination
        },
        span: String::new(),
        correction: String::new(),
        provenance: None,
        status: Status::AnnotatedPass,
        flags: Vec::new(),
        extra,
    }
}

/// Paired HaluEval item: keep the hallucinated side with probability 1/2.
fn paired(
    spec: &BenchmarkSpec,
    item: &Item,
    seed: u64,
    right: &str,
    wrong: &str,
    flat: &str,
) -> Result<(String, bool), BenchmarkError> {
    if item.has(right) || item.has(wrong) {
        let mut rng = substream(seed, &["benchmark", spec.name.as_str(), &item.index.to_string()]);
        let pick_wrong: bool = rng.random();
        let key = if pick_wrong { wrong } else { right };
        Ok((item.text(key)?, pick_wrong))
    } else {
        Ok((item.text(flat)?, item.yes_no(&["hallucination", "hallucination_label"])?))
    }
}

fn id_or_index(item: &Item, key: &str, spec: &BenchmarkSpec) -> Result<String, BenchmarkError> {
    Ok(item
        .opt_text(key)?
        .unwrap_or_else(|| format!("{}-{}", spec.name.as_str(), item.index)))
}

fn convert(spec: &BenchmarkSpec, item: &Item, seed: u64) -> Result<HalluRecord, BenchmarkError> {
    let default_id = || format!("{}-{}", spec.name.as_str(), item.index);
    match spec.name {
        BenchmarkName::HaluEvalQa => {
            let (answer, h) = paired(spec, item, seed, "right_answer", "hallucinated_answer", "answer")?;
            let input = compose_input(item.opt_text("knowledge")?.as_deref(), &item.text("question")?);
            Ok(record(spec, default_id(), input, answer, h))
        }
        BenchmarkName::HaluEvalDial => {
            let (response, h) = paired(spec, item, seed, "right_response", "hallucinated_response", "response")?;
            let input = compose_input(item.opt_text("knowledge")?.as_deref(), &item.text("dialogue_history")?);
            Ok(record(spec, default_id(), input, response, h))
        }
        BenchmarkName::HaluEvalSumm => {
            let (summary, h) = paired(spec, item, seed, "right_summary", "hallucinated_summary", "summary")?;
            let input = compose_input(Some(&item.text("document")?), SUMMARIZE_QUERY);
            Ok(record(spec, default_id(), input, summary, h))
        }
        BenchmarkName::HaluEvalGen => {
            let h = item.yes_no(&["hallucination", "hallucination_label"])?;
            Ok(record(
                spec,
                id_or_index(item, "ID", spec)?,
                item.text("user_query")?,
                item.text("chatgpt_response")?,
                h,
            ))
        }
        BenchmarkName::FactChd => {
            let label = item.text("label")?;
            let h = match label.trim().to_ascii_uppercase().replace('_', "-").as_str() {
                "NON-FACTUAL" => true,
                "FACTUAL" => false,
                other => return Err(item.err(format!("label must be FACTUAL or NON-FACTUAL, got {other:?}"))),
            };
            Ok(record(
                spec,
                id_or_index(item, "id", spec)?,
                item.text("query")?,
                item.text("response")?,
                h,
            ))
        }
        BenchmarkName::FaithBench => {
            let annotations = match item.obj.get("annotations") {
                None | Some(Value::Null) => 0,
                Some(Value::Array(a)) => a.len(),
                Some(_) => return Err(item.err("field \"annotations\" must be a list")),
            };
            let input = compose_input(Some(&item.text("source")?), SUMMARIZE_QUERY);
            Ok(record(
                spec,
                id_or_index(item, "sample_id", spec)?,
                input,
                item.text("summary")?,
                annotations > 0,
            ))
        }
    }
}

/// Parses benchmark text. `seed` only matters for paired HaluEval items.
pub fn ingest_str(spec: &BenchmarkSpec, text: &str, seed: u64) -> Result<Vec<HalluRecord>, BenchmarkError> {
    let values = parse_items(text)?;
    let mut out = Vec::with_capacity(values.len());
    let mut seen = std::collections::HashSet::new();
    for (index, v) in values.iter().enumerate() {
        let obj = v.as_object().ok_or(BenchmarkError::Schema {
            index,
            message: "item must be a JSON object".into(),
        })?;
        let rec = convert(spec, &Item { index, obj }, seed)?;
        if !seen.insert(rec.id.clone()) {
            return Err(BenchmarkError::Schema {
                index,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn ingest(spec: &BenchmarkSpec, path: &Path, seed: u64) -> Result<Vec<HalluRecord>, BenchmarkError> {
    ingest_str(spec, &std::fs::read_to_string(path)?, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub benchmark: BenchmarkName,
    pub metric: MetricKind,
    pub n_items: usize,
    pub n_hallucinated: usize,
    /// Predictions that could not be parsed; scored as hallucinated.
    pub n_invalid: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1_positive: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
}

pub fn score(spec: &BenchmarkSpec, gold: &[HalluRecord], preds: &[Prediction]) -> Result<BenchmarkReport, BenchmarkError> {
    let pairs = align(gold, preds)?;
    let g: Vec<bool> = pairs.iter().map(|(r, _)| collapse_binary(&r.label)).collect();
    let p: Vec<bool> = pairs.iter().map(|(_, p)| collapse_binary(&p.result.predicted)).collect();
    let mut report = BenchmarkReport {
        benchmark: spec.name,
        metric: spec.metric,
        n_items: pairs.len(),
        n_hallucinated: g.iter().filter(|h| **h).count(),
        n_invalid: pairs
            .iter()
            .filter(|(_, p)| matches!(p.result.predicted, Label::Invalid(_)))
            .count(),
        accuracy: None,
        micro_f1_positive: None,
        balanced_accuracy: None,
        macro_f1: None,
    };
    match spec.metric {
        MetricKind::Accuracy => {
            let weighted: Vec<Weighted<bool>> = p.iter().map(|b| Weighted::certain(*b)).collect();
            report.accuracy = Some(classification_metrics(&g, &weighted)?.accuracy);
        }
        MetricKind::MicroF1Positive => {
            let w: Vec<f64> = p.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
            report.micro_f1_positive = Some(micro_f1_positive(&g, &w)?);
        }
        MetricKind::BaAndMacroF1 => {
            let weighted: Vec<Weighted<bool>> = p.iter().map(|b| Weighted::certain(*b)).collect();
            let summary = classification_metrics(&g, &weighted)?;
            report.balanced_accuracy = Some(summary.balanced_accuracy);
            report.macro_f1 = Some(summary.macro_f1);
        }
    }
    Ok(report)
}
