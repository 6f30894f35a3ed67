//! Hallucination injection: prompt rendering, candidate parsing and the
//! injection run loop.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::corpus::{flags, read_jsonl, CorpusError, HalluRecord, Provenance, SourceRecord, Status};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::rng::substream;
use crate::taxonomy::{Label, TaskKindId, Taxonomy, TypeId};

pub const SHOTS_PER_PROMPT: usize = 3;
pub const DEFAULT_CANDIDATES: u32 = 5;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

const BUILTIN_POOL: &str = include_str!("../assets/fewshot_pool.jsonl");

const INJECT_INSTRUCTION: &str = "Given a pair of task input and output, your objective is to create an error data by intentionally modifying the given task output. Inject the error exactly as the error type description, without introducing any other modifications. The error should be restricted to a single error span, which is the part of the task output that you modify. Do not include any other errors or changes outside of the designated error span. Provide the modified output and the error span in your response.";

const MODIFIED_MARKERS: [&str; 2] = ["**Modified Output:**", "**Modified Output**:"];
/// Closed list of accepted span markers.
pub const SPAN_MARKERS: [&str; 3] = ["**Error Span**:", "**Error Span:**", "**Error span:**"];

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("type {type_id} is not allowed for task kind {kind}")]
    IncompatibleType { kind: TaskKindId, type_id: TypeId },
    #[error("few-shot pool for {type_id} has {available} example(s), need {SHOTS_PER_PROMPT}")]
    PoolTooSmall { type_id: TypeId, available: usize },
    #[error("could not parse injection response")]
    Parse { raw: String },
    #[error("invalid few-shot example {index}: {message}")]
    BadExample { index: usize, message: String },
    #[error("no source records given")]
    NoSources,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub type_id: TypeId,
    pub task_input: String,
    pub task_output: String,
    pub modified_output: String,
    pub error_span: String,
}

impl FewShotExample {
    fn check(&self) -> Result<(), String> {
        for (name, v) in [
            ("task_input", &self.task_input),
            ("task_output", &self.task_output),
            ("modified_output", &self.modified_output),
            ("error_span", &self.error_span),
        ] {
            if v.trim().is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        if !self.modified_output.contains(&self.error_span) {
            return Err("error_span is not a substring of modified_output".into());
        }
        Ok(())
    }

    fn render(&self) -> String {
        format!(
            "### Example ###\n**Task Input:**\n{}\n**Task Output:**\n{}\n**Modified Output:**\n{}\n**Error Span**:\n{}",
            self.task_input, self.task_output, self.modified_output, self.error_span
        )
    }
}

/// Per-type few-shot examples, kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct FewShotPool {
    by_type: BTreeMap<TypeId, Vec<FewShotExample>>,
}

impl FewShotPool {
    /// The starter pool shipped with the crate.
    pub fn builtin() -> FewShotPool {
        let mut pool = FewShotPool::default();
        for (i, line) in BUILTIN_POOL.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let ex: FewShotExample = serde_json::from_str(line).expect("builtin pool is valid JSON");
            pool.add(ex).unwrap_or_else(|e| panic!("builtin pool line {}: {e}", i + 1));
        }
        pool
    }

    pub fn add(&mut self, ex: FewShotExample) -> Result<(), String> {
        ex.check()?;
        self.by_type.entry(ex.type_id).or_default().push(ex);
        Ok(())
    }

    /// Appends the examples of a JSONL pool file.
    pub fn extend_from_path(&mut self, path: &Path) -> Result<(), SynthesisError> {
        let items: Vec<FewShotExample> = read_jsonl(path)?;
        for (index, ex) in items.into_iter().enumerate() {
            self.add(ex)
                .map_err(|message| SynthesisError::BadExample { index, message })?;
        }
        Ok(())
    }

    pub fn examples(&self, t: TypeId) -> &[FewShotExample] {
        self.by_type.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Draws three distinct examples for one source, independently of every
    /// other source.
    pub fn sample_shots(&self, t: TypeId, source_id: &str, seed: u64) -> Result<Vec<&FewShotExample>, SynthesisError> {
        let items = self.examples(t);
        if items.len() < SHOTS_PER_PROMPT {
            return Err(SynthesisError::PoolTooSmall {
                type_id: t,
                available: items.len(),
            });
        }
        let mut rng = substream(seed, &["synthesis", t.as_str(), source_id]);
        Ok(sample(&mut rng, items.len(), SHOTS_PER_PROMPT)
            .into_iter()
            .map(|i| &items[i])
            .collect())
    }
}

pub fn build_injection_prompt(
    taxonomy: &Taxonomy,
    source: &SourceRecord,
    t: TypeId,
    shots: &[&FewShotExample],
) -> Result<String, SynthesisError> {
    if !taxonomy.is_compatible(source.task_kind, t) {
        return Err(SynthesisError::IncompatibleType {
            kind: source.task_kind,
            type_id: t,
        });
    }
    if shots.len() != SHOTS_PER_PROMPT || shots.iter().any(|s| s.type_id != t) {
        return Err(SynthesisError::PoolTooSmall {
            type_id: t,
            available: shots.iter().filter(|s| s.type_id == t).count(),
        });
    }
    let examples: Vec<String> = shots.iter().map(|s| s.render()).collect();
    Ok(format!(
        "### Instruction ###\n{INJECT_INSTRUCTION}\n\n### Error Type Description ###\n{}\n\n{}\n\n### Example ###\n**Task Input:**\n{}\n**Task Output:**\n{}",
        taxonomy.entry(t).definition,
        examples.join("\n\n"),
        source.task_input,
        source.gold_output,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionCandidate {
    pub modified_output: String,
    pub error_span: String,
    pub raw: String,
}

/// Byte offset just past `marker` if `line` starts with one of `markers`
/// after leading whitespace.
fn match_marker(line: &str, markers: &[&str]) -> Option<usize> {
    let lead = line.len() - line.trim_start().len();
    markers
        .iter()
        .find(|m| line[lead..].starts_with(*m))
        .map(|m| lead + m.len())
}

/// Extracts the modified output and error span from an injector response.
///
/// Uses the last "Modified Output" marker and the first span marker after
/// it, so echoed few-shot examples are skipped.
pub fn parse_injection_response(raw: &str) -> Result<InjectionCandidate, SynthesisError> {
    let fail = || SynthesisError::Parse { raw: raw.to_string() };
    let mut offset = 0;
    let mut modified = None;
    let mut lines = Vec::new();
    for line in raw.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if let Some(end) = match_marker(body, &MODIFIED_MARKERS) {
            modified = Some((lines.len(), offset + end));
        }
        lines.push((offset, body));
        offset += line.len();
    }
    let (m, m_end) = modified.ok_or_else(fail)?;
    let (s_off, s_end) = lines[m + 1..]
        .iter()
        .find_map(|(off, body)| match_marker(body, &SPAN_MARKERS).map(|end| (*off, off + end)))
        .ok_or_else(fail)?;
    let modified_output = raw[m_end..s_off].trim();
    let error_span = raw[s_end..].trim();
    if modified_output.is_empty() || error_span.is_empty() {
        return Err(fail());
    }
    Ok(InjectionCandidate {
        modified_output: modified_output.to_string(),
        error_span: error_span.to_string(),
        raw: raw.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct InjectConfig {
    pub type_id: TypeId,
    pub n_candidates: u32,
    pub temperature: f64,
    pub seed: u64,
    pub endpoint: String,
    pub max_in_flight: usize,
    pub injected_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub sources: usize,
    pub candidates_requested: usize,
    pub records: usize,
    pub dropped_unparseable: usize,
    pub span_unanchored: usize,
    pub failures: Vec<SourceFailure>,
}

/// Requests `n_candidates` perturbations per source and keeps every
/// parseable one as a raw record. Output order follows `sources`.
pub async fn inject(
    taxonomy: &Taxonomy,
    pool: &FewShotPool,
    gateway: &Gateway,
    sources: &[SourceRecord],
    cfg: &InjectConfig,
) -> Result<(Vec<HalluRecord>, InjectionReport), SynthesisError> {
    if sources.is_empty() {
        return Err(SynthesisError::NoSources);
    }
    let model = gateway.endpoint(&cfg.endpoint)?.model.clone();
    let mut report = InjectionReport {
        sources: sources.len(),
        ..Default::default()
    };

    let mut prepared = Vec::new();
    for src in sources {
        let prompt = pool
            .sample_shots(cfg.type_id, &src.id, cfg.seed)
            .and_then(|shots| build_injection_prompt(taxonomy, src, cfg.type_id, &shots));
        match prompt {
            Ok(p) => prepared.push((src, p)),
            Err(e @ SynthesisError::PoolTooSmall { .. }) => return Err(e),
            Err(e) => report.failures.push(SourceFailure {
                source_id: src.id.clone(),
                message: e.to_string(),
            }),
        }
    }

    let reqs: Vec<CompletionRequest> = prepared
        .iter()
        .map(|(_, prompt)| {
            CompletionRequest::new(&cfg.endpoint, prompt.clone(), cfg.temperature, cfg.n_candidates)
                .with_seed(Some(cfg.seed))
        })
        .collect();
    report.candidates_requested = reqs.len() * cfg.n_candidates as usize;
    let responses = gateway.complete_batch(&reqs, cfg.max_in_flight).await;

    let mut records = Vec::new();
    for ((src, _), response) in prepared.into_iter().zip(responses) {
        let texts = match response {
            Ok(r) => r.texts,
            Err(e) => {
                tracing::warn!(source = %src.id, error = %e, "injection call failed");
                report.failures.push(SourceFailure {
                    source_id: src.id.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        for (idx, text) in texts.iter().enumerate() {
            let Ok(cand) = parse_injection_response(text) else {
                report.dropped_unparseable += 1;
                continue;
            };
            let mut rec = HalluRecord {
                id: format!("{}-{}-c{idx}", src.id, cfg.type_id.as_str()),
                source_id: src.id.clone(),
                task_kind: src.task_kind,
                task_input: src.task_input.clone(),
                output: cand.modified_output,
                label: Label::Type(cfg.type_id),
                span: cand.error_span,
                correction: src.gold_output.clone(),
                provenance: Some(Provenance {
                    generator_model: model.clone(),
                    temperature: cfg.temperature,
                    candidate_index: idx as u32,
                    injected_at: cfg.injected_at,
                }),
                status: Status::Raw,
                flags: Vec::new(),
                extra: Map::new(),
            };
            if !rec.output.contains(&rec.span) {
                rec.add_flag(flags::SPAN_UNANCHORED);
                report.span_unanchored += 1;
            }
            records.push(rec);
        }
    }
    if report.dropped_unparseable > 0 {
        tracing::info!(dropped = report.dropped_unparseable, "unparseable candidates dropped");
    }
    report.records = records.len();
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::source;
    use crate::gateway::{EndpointConfig, MockBackend, MockEndpointScript, MockReply, MockScript, Registry, RetryPolicy};
    use std::collections::HashMap;
    use std::sync::Arc;

    #[test]
    fn builtin_pool_covers_every_type() {
        let pool = FewShotPool::builtin();
        for t in TypeId::ALL {
            assert!(pool.examples(t).len() >= 5, "{t:?}");
        }
    }

    #[test]
    fn prompt_layout_and_determinism() {
        let tax = Taxonomy::builtin();
        let pool = FewShotPool::builtin();
        let src = source("s1", TaskKindId::Lfqa);
        let shots = pool.sample_shots(TypeId::Fe, &src.id, 7).unwrap();
        let p = build_injection_prompt(&tax, &src, TypeId::Fe, &shots).unwrap();
        assert_eq!(p.matches("### Example ###").count(), 4);
        assert!(p.contains(&tax.entry(TypeId::Fe).definition));
        assert!(p.ends_with(&format!("**Task Output:**\n{}", src.gold_output)));
        let again = pool.sample_shots(TypeId::Fe, &src.id, 7).unwrap();
        assert_eq!(p, build_injection_prompt(&tax, &src, TypeId::Fe, &again).unwrap());
    }

    #[test]
    fn incompatible_type_and_small_pool() {
        let tax = Taxonomy::builtin();
        let pool = FewShotPool::builtin();
        let src = source("s1", TaskKindId::PoemWriting);
        let shots = pool.sample_shots(TypeId::Fre, "s1", 1).unwrap();
        assert!(matches!(
            build_injection_prompt(&tax, &src, TypeId::Fre, &shots),
            Err(SynthesisError::IncompatibleType { .. })
        ));
        assert!(matches!(
            FewShotPool::default().sample_shots(TypeId::Fre, "s1", 1),
            Err(SynthesisError::PoolTooSmall { available: 0, .. })
        ));
    }

    #[test]
    fn shots_vary_across_sources() {
        let pool = FewShotPool::builtin();
        let picks: std::collections::HashSet<Vec<String>> = (0..20)
            .map(|i| {
                pool.sample_shots(TypeId::Si, &format!("s{i}"), 3)
                    .unwrap()
                    .iter()
                    .map(|e| e.modified_output.clone())
                    .collect()
            })
            .collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn parse_examples() {
        let c = parse_injection_response("**Modified Output:**\nX Y Z\n**Error Span**:\nY").unwrap();
        assert_eq!((c.modified_output.as_str(), c.error_span.as_str()), ("X Y Z", "Y"));
        let c = parse_injection_response("**Modified Output**:\n\nX\n\n**Error Span:**\n Y \n").unwrap();
        assert_eq!((c.modified_output.as_str(), c.error_span.as_str()), ("X", "Y"));
        assert!(parse_injection_response("**Modified Output:**\nX").is_err());
        assert!(parse_injection_response("**Modified Output:**\nX\n**Span**:\nY").is_err());
        assert!(parse_injection_response("**Modified Output:** X\n**Error span:** Y").is_ok());
        assert!(parse_injection_response("**Modified Output:**\n\n**Error Span**:\nY").is_err());
    }

    #[test]
    fn rendered_example_round_trips() {
        for ex in FewShotPool::builtin().by_type.values().flatten() {
            let c = parse_injection_response(&ex.render()).unwrap();
            assert_eq!(c.modified_output, ex.modified_output);
            assert_eq!(c.error_span, ex.error_span);
        }
    }

    #[tokio::test]
    async fn inject_counts_records_and_drops() {
        let good = "**Modified Output:**\nchanged text\n**Error Span**:\nchanged";
        let script = MockEndpointScript {
            default: Some(MockReply::Texts(vec![
                good.into(),
                good.into(),
                "garbage".into(),
                "**Modified Output:**\nother\n**Error Span**:\nnot there".into(),
                good.into(),
            ])),
            ..Default::default()
        };
        let backend = Arc::new(MockBackend::new(MockScript {
            endpoints: HashMap::from([("injector".to_string(), script)]),
        }));
        let mut reg = Registry::default();
        reg.insert(EndpointConfig::mock("injector"));
        let gw = Gateway::new(reg, backend.clone()).with_retry(RetryPolicy::immediate(1));
        let sources = vec![source("a", TaskKindId::Lfqa), source("b", TaskKindId::ShortFormQa)];
        let cfg = InjectConfig {
            type_id: TypeId::Fre,
            n_candidates: 5,
            temperature: 1.0,
            seed: 7,
            endpoint: "injector".into(),
            max_in_flight: 4,
            injected_at: DateTime::UNIX_EPOCH,
        };
        let (records, report) = inject(&Taxonomy::builtin(), &FewShotPool::builtin(), &gw, &sources, &cfg)
            .await
            .unwrap();
        assert_eq!(records.len(), 8);
        assert_eq!(report.dropped_unparseable, 2);
        assert_eq!(report.span_unanchored, 2);
        assert_eq!(records[0].id, "a-FRE-c0");
        assert_eq!(records[3].id, "a-FRE-c4");
        assert!(records.iter().all(|r| r.status == Status::Raw && r.correction == sources.iter().find(|s| s.id == r.source_id).unwrap().gold_output));
        assert_eq!(records[0].provenance.as_ref().unwrap().temperature, 1.0);
        assert!(backend.calls().iter().all(|c| c.n_samples == 5 && c.temperature == 1.0));
    }
}
