//! Detection prompts, response parsing and the detection run loop.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::corpus::HalluRecord;
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::retrieval::{build_query, insert_knowledge, Retriever};
use crate::taxonomy::{is_negative_text, normalize, Label, Taxonomy};

pub const TYPE_HEADER: &str = "Hallucination Type";
pub const LABEL_HEADER: &str = "Hallucination Label";
pub const SPAN_HEADER: &str = "Hallucination Span";
pub const CORRECTION_HEADER: &str = "Correction";

pub mod flags {
    pub const TRANSPORT_ERROR: &str = "transport_error";
    pub const RETRIEVAL_ERROR: &str = "retrieval_error";
}

const DETECT_INSTRUCTION: &str = "Given a pair of task input and task output, your goal is to detect whether the task output contains any hallucination.";
const FINE_ASK: &str = "If a hallucination is present, specify the type of hallucination, identify the hallucination span, and provide the correct version of the output.";
const BINARY_ASK: &str = "If a hallucination is present, identify the hallucination span and provide the correct version of the output.";
const BASELINE_ASK: &str = "If a hallucination is present, specify the type of hallucination based on the type description, identify the hallucination span, and provide the correct version of the output.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineExample {
    pub task_input: String,
    pub task_output: String,
    pub label: Label,
    #[serde(default)]
    pub span: String,
    #[serde(default)]
    pub correction: String,
}

/// The two fixed in-context examples of the baseline prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineShots {
    pub correct: BaselineExample,
    pub hallucinated: BaselineExample,
}

impl Default for BaselineShots {
    /// A hand-written pair shipped with the toolkit. Not the examples used in
    /// any published evaluation; replace via `--baseline-shots`.
    fn default() -> Self {
        BaselineShots {
            correct: BaselineExample {
                task_input: "What is the capital city of Australia?".into(),
                task_output: "The capital city of Australia is Canberra.".into(),
                label: Label::NoHallucination,
                span: String::new(),
                correction: String::new(),
            },
            hallucinated: BaselineExample {
                task_input: "Who wrote the novel Pride and Prejudice?".into(),
                task_output: "Pride and Prejudice was written by Charlotte Bronte and first published in 1813.".into(),
                label: Label::Type(crate::taxonomy::TypeId::Fre),
                span: "Charlotte Bronte".into(),
                correction: "Pride and Prejudice was written by Jane Austen and first published in 1813.".into(),
            },
        }
    }
}

impl BaselineShots {
    pub fn validate(&self) -> Result<(), DetectionError> {
        if !self.correct.label.is_negative() {
            return Err(DetectionError::BadShots("the correct example must be labelled No Hallucination".into()));
        }
        if self.hallucinated.label.type_id().is_none() {
            return Err(DetectionError::BadShots("the hallucinated example needs a fine-grained type".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum PromptMode {
    #[default]
    FineGrained,
    Binary,
    BaselineFewShot(Box<BaselineShots>),
}

impl PromptMode {
    fn label_header(&self) -> &'static str {
        match self {
            PromptMode::Binary => LABEL_HEADER,
            _ => TYPE_HEADER,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DetectionError {
    #[error("task input and task output must be nonempty")]
    EmptyInput,
    #[error("invalid baseline examples: {0}")]
    BadShots(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub predicted: Label,
    pub span: String,
    pub correction: String,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_used: Option<Vec<String>>,
}

impl DetectionResult {
    fn invalid(raw: &str, label_text: Option<String>) -> Self {
        DetectionResult {
            predicted: Label::Invalid(label_text.unwrap_or_else(|| raw.to_string())),
            span: String::new(),
            correction: String::new(),
            raw: raw.to_string(),
            knowledge_used: None,
        }
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    #[serde(flatten)]
    pub result: DetectionResult,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn example_block(task_input: &str, task_output: &str) -> String {
    format!("**Task Input:**\n{task_input}\n\n**Task Output:**\n{task_output}")
}

pub fn build_detection_prompt(
    taxonomy: &Taxonomy,
    task_input: &str,
    task_output: &str,
    mode: &PromptMode,
) -> Result<String, DetectionError> {
    if task_input.is_empty() || task_output.is_empty() {
        return Err(DetectionError::EmptyInput);
    }
    let target = example_block(task_input, task_output);
    Ok(match mode {
        PromptMode::FineGrained | PromptMode::Binary => {
            let ask = if matches!(mode, PromptMode::Binary) { BINARY_ASK } else { FINE_ASK };
            format!(
                "### Instruction ###\n{DETECT_INSTRUCTION}\n{ask}\n\n### Example ###\n{target}\n\n### Your Detection ###"
            )
        }
        PromptMode::BaselineFewShot(shots) => {
            shots.validate()?;
            let descriptions: Vec<String> = taxonomy
                .entries()
                .map(|e| format!("{}: {}", e.display_name, e.definition))
                .collect();
            let shot = |ex: &BaselineExample| {
                format!(
                    "{}\n\n{}",
                    example_block(&ex.task_input, &ex.task_output),
                    render_response(&ex.label, &ex.span, &ex.correction, mode)
                )
            };
            format!(
                "### Instruction ###\n{DETECT_INSTRUCTION}\n{BASELINE_ASK}\n\n### Hallucination Type Description ###\n{}\n\n### Example ###\n{}\n\n### Example ###\n{}\n\n### Example ###\n{target}",
                descriptions.join("\n"),
                shot(&shots.correct),
                shot(&shots.hallucinated),
            )
        }
    })
}

/// Renders the response template. Negative labels emit the label section
/// only.
pub fn render_response(label: &Label, span: &str, correction: &str, mode: &PromptMode) -> String {
    let header = mode.label_header();
    let text = match (mode, label) {
        (_, Label::NoHallucination) => return format!("**{header}:**\n{}", label.display()),
        (PromptMode::Binary, Label::Type(_)) => Label::BinaryHallucinated.display().to_string(),
        _ => label.display().to_string(),
    };
    format!("**{header}:**\n{text}\n\n**{SPAN_HEADER}:**\n{span}\n\n**{CORRECTION_HEADER}:**\n{correction}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Label,
    Span,
    Correction,
}

fn marker_of(line: &str) -> Option<Marker> {
    let t = line.trim();
    let inner = t
        .strip_prefix("**")
        .and_then(|s| s.strip_suffix(":**").or_else(|| s.strip_suffix("**:")))?;
    let inner = inner.trim();
    if inner.eq_ignore_ascii_case(TYPE_HEADER) || inner.eq_ignore_ascii_case(LABEL_HEADER) {
        Some(Marker::Label)
    } else if inner.eq_ignore_ascii_case(SPAN_HEADER) {
        Some(Marker::Span)
    } else if inner.eq_ignore_ascii_case(CORRECTION_HEADER) {
        Some(Marker::Correction)
    } else {
        None
    }
}

const BINARY_POSITIVE: [&str; 4] = ["hallucination", "hallucinated", "yes", "hallucination present"];

fn parse_binary_label(taxonomy: &Taxonomy, text: &str) -> Label {
    if is_negative_text(text) {
        return Label::NoHallucination;
    }
    let key = normalize(text);
    if BINARY_POSITIVE.contains(&key.as_str()) || taxonomy.lookup(text).is_ok() {
        Label::BinaryHallucinated
    } else {
        Label::Invalid(text.to_string())
    }
}

/// Extracts (label, span, correction) from a model response.
///
/// Markers count only when they form an entire trimmed line. The last label
/// marker that starts a well-formed section sequence wins, so echoed
/// templates earlier in the text are ignored.
pub fn parse_detection_response(taxonomy: &Taxonomy, raw: &str, mode: &PromptMode) -> DetectionResult {
    let lines: Vec<&str> = raw.split('\n').collect();
    let markers: Vec<(usize, Marker)> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, l)| marker_of(l).map(|m| (i, m)))
        .collect();
    let section = |from: usize, to: usize| lines[from..to].join("\n").trim().to_string();

    for (pos, &(line, kind)) in markers.iter().enumerate().rev() {
        if kind != Marker::Label {
            continue;
        }
        let next = |k: usize| markers.get(k).map(|&(l, _)| l).unwrap_or(lines.len());
        let label_text = section(line + 1, next(pos + 1));
        let label = match mode {
            PromptMode::Binary => parse_binary_label(taxonomy, &label_text),
            _ => taxonomy.parse_label(&label_text),
        };
        if label.is_negative() {
            return DetectionResult {
                predicted: Label::NoHallucination,
                span: String::new(),
                correction: String::new(),
                raw: raw.to_string(),
                knowledge_used: None,
            };
        }
        let span_at = markers.get(pos + 1).filter(|m| m.1 == Marker::Span);
        let corr_at = markers.get(pos + 2).filter(|m| m.1 == Marker::Correction);
        let (Some(&(s, _)), Some(&(c, _))) = (span_at, corr_at) else {
            continue;
        };
        // The correction runs to the next label marker, so stray span or
        // correction markers after it stay part of the text.
        let end = markers[pos + 3..]
            .iter()
            .find(|m| m.1 == Marker::Label)
            .map(|m| m.0)
            .unwrap_or(lines.len());
        if let Label::Invalid(_) = label {
            return DetectionResult::invalid(raw, Some(label_text));
        }
        return DetectionResult {
            predicted: label,
            span: section(s + 1, c),
            correction: section(c + 1, end),
            raw: raw.to_string(),
            knowledge_used: None,
        };
    }
    DetectionResult::invalid(raw, None)
}

/// Knowledge augmentation settings for [`run_detection`].
pub struct Knowledge<'a> {
    pub retriever: &'a dyn Retriever,
    pub top_k: usize,
}

pub struct DetectionRun<'a> {
    pub mode: &'a PromptMode,
    pub endpoint: &'a str,
    pub knowledge: Option<Knowledge<'a>>,
    pub max_in_flight: usize,
}

fn transport_failure(record: &HalluRecord, extra_flag: Option<&str>) -> Prediction {
    let mut flags = vec![flags::TRANSPORT_ERROR.to_string()];
    flags.extend(extra_flag.map(String::from));
    Prediction {
        record_id: record.id.clone(),
        result: DetectionResult::invalid("", None),
        flags,
    }
}

/// Runs the detector over `records` at temperature 0 with one sample each.
/// Results are aligned with the input order.
pub async fn run_detection(
    taxonomy: &Taxonomy,
    gateway: &Gateway,
    records: &[HalluRecord],
    run: &DetectionRun<'_>,
) -> Result<Vec<Prediction>, DetectionError> {
    gateway.endpoint(run.endpoint)?;
    let limit = run.max_in_flight.max(1);

    // Retrieval first, so each prompt is final before dispatch.
    let knowledge: Vec<Option<Result<Vec<crate::retrieval::RetrievalPassage>, String>>> = match &run.knowledge {
        None => vec![None; records.len()],
        Some(k) => {
            stream::iter(records.iter().map(|r| async move {
                let query = build_query(&r.task_input, &r.output);
                Some(k.retriever.retrieve(&query, k.top_k).await.map_err(|e| e.to_string()))
            }))
            .buffered(limit)
            .collect()
            .await
        }
    };

    let mut out: Vec<Option<Prediction>> = vec![None; records.len()];
    let mut pending = Vec::new();
    for (i, (record, passages)) in records.iter().zip(&knowledge).enumerate() {
        let (input, used) = match passages {
            None => (record.task_input.clone(), None),
            Some(Ok(ps)) => (
                insert_knowledge(&record.task_input, ps),
                Some(ps.iter().map(|p| p.passage_id.clone()).collect::<Vec<_>>()),
            ),
            Some(Err(e)) => {
                tracing::warn!(record = %record.id, error = %e, "retrieval failed");
                out[i] = Some(transport_failure(record, Some(flags::RETRIEVAL_ERROR)));
                continue;
            }
        };
        let prompt = build_detection_prompt(taxonomy, &input, &record.output, run.mode)?;
        pending.push((i, used, CompletionRequest::new(run.endpoint, prompt, 0.0, 1)));
    }

    let requests: Vec<CompletionRequest> = pending.iter().map(|p| p.2.clone()).collect();
    let responses = gateway.complete_batch(&requests, limit).await;
    for ((i, used, _), response) in pending.into_iter().zip(responses) {
        let record = &records[i];
        out[i] = Some(match response {
            Ok(res) => {
                let mut result = parse_detection_response(taxonomy, &res.texts[0], run.mode);
                result.knowledge_used = used;
                Prediction {
                    record_id: record.id.clone(),
                    result,
                    flags: Vec::new(),
                }
            }
            Err(e) => {
                tracing::warn!(record = %record.id, error = %e, "detector call failed");
                transport_failure(record, None)
            }
        });
    }
    Ok(out.into_iter().map(|p| p.expect("every slot is filled")).collect())
}
