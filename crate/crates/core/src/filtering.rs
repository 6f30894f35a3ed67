//! Verifier-based filtering of raw injection candidates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{flags, HalluRecord, Status};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::taxonomy::{Label, Taxonomy, TaxonomyEntry, TypeId};

const CHECK_INSTRUCTION: &str = "Given a task input, a task output containing an error, and a specified span that represents the erroneous part, your goal is to evaluate whether the task output and specified span correspond to the specified error type, based on the provided criteria. For each criterion, provide an analysis that explains how the task output and specified span either satisfy or fail to meet it. Finally, aggregate all the analysis carefully, and conclude with \"Conclusion: Yes\" if all criteria are met, or \"Conclusion: No\" if they are not.";

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("record {id} has label {found:?}, expected a fine-grained type")]
    LabelMismatch { id: String, found: String },
    #[error("record {id} has status {status:?}, expected raw")]
    NotRaw { id: String, status: Status },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conclusion {
    Yes,
    No,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub conclusion: Conclusion,
    pub analysis: String,
}

pub fn build_check_prompt(record: &HalluRecord, entry: &TaxonomyEntry) -> Result<String, FilterError> {
    if record.label != Label::Type(entry.type_id) {
        return Err(FilterError::LabelMismatch {
            id: record.id.clone(),
            found: record.label.display().to_string(),
        });
    }
    Ok(format!(
        "### Instruction ###\n{CHECK_INSTRUCTION}\n\n### Error Type Description ###\n{}\n\n### Criteria ###\n{}\n\n### Example ###\n**Task Input:**\n{}\n\n**Task Output:**\n{}\n\n**Specified Span:**\n{}\n\n### Your Judgement ###",
        entry.definition,
        entry.criteria.join("\n"),
        record.task_input,
        record.output,
        record.span,
    ))
}

/// Reads the word after the last case-insensitive "Conclusion:".
///
/// Markdown emphasis and quotes around the word are skipped, so
/// `**Conclusion:** **Yes**` parses as Yes.
pub fn parse_verdict(raw: &str) -> Verdict {
    const KEY: &str = "conclusion:";
    let lower = raw.to_ascii_lowercase();
    let conclusion = match lower.rfind(KEY) {
        None => Conclusion::Unparseable,
        Some(at) => {
            let rest = lower[at + KEY.len()..]
                .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '"' | '\''));
            let word: String = rest.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
            match word.as_str() {
                "yes" => Conclusion::Yes,
                "no" => Conclusion::No,
                _ => Conclusion::Unparseable,
            }
        }
    };
    Verdict {
        conclusion,
        analysis: raw.to_string(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeRate {
    pub passed: usize,
    pub failed: usize,
    pub pass_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub unparseable: usize,
    pub deferred: usize,
    /// passed / (passed + failed); deferred records are excluded.
    pub pass_rate: f64,
    pub per_type: BTreeMap<TypeId, TypeRate>,
    pub deferred_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub passed: Vec<HalluRecord>,
    pub failed: Vec<HalluRecord>,
    /// Records whose verifier call failed; returned unchanged apart from the
    /// `deferred` flag.
    pub deferred: Vec<HalluRecord>,
    pub report: FilterReport,
}

fn rate(passed: usize, failed: usize) -> f64 {
    if passed + failed == 0 {
        0.0
    } else {
        passed as f64 / (passed + failed) as f64
    }
}

/// Judges each raw record once at temperature 0.
pub async fn filter_run(
    taxonomy: &Taxonomy,
    gateway: &Gateway,
    records: &[HalluRecord],
    endpoint: &str,
    max_in_flight: usize,
) -> Result<FilterOutcome, FilterError> {
    gateway.endpoint(endpoint)?;
    let mut reqs = Vec::with_capacity(records.len());
    for r in records {
        if r.status != Status::Raw {
            return Err(FilterError::NotRaw {
                id: r.id.clone(),
                status: r.status,
            });
        }
        let Some(t) = r.label.type_id() else {
            return Err(FilterError::LabelMismatch {
                id: r.id.clone(),
                found: r.label.display().to_string(),
            });
        };
        let prompt = build_check_prompt(r, taxonomy.entry(t))?;
        reqs.push(CompletionRequest::new(endpoint, prompt, 0.0, 1));
    }

    let responses = gateway.complete_batch(&reqs, max_in_flight).await;
    let mut out = FilterOutcome::default();
    let mut per_type: BTreeMap<TypeId, (usize, usize)> = BTreeMap::new();
    for (record, response) in records.iter().zip(responses) {
        let mut rec = record.clone();
        let t = rec.label.type_id().expect("checked above");
        let text = match response {
            Ok(r) => r.texts.into_iter().next().unwrap_or_default(),
            Err(e) => {
                tracing::warn!(record = %rec.id, error = %e, "verifier call failed, deferring");
                rec.add_flag(flags::DEFERRED);
                out.report.deferred_ids.push(rec.id.clone());
                out.deferred.push(rec);
                continue;
            }
        };
        let counts = per_type.entry(t).or_default();
        match parse_verdict(&text).conclusion {
            Conclusion::Yes => {
                rec.status = Status::FilteredPass;
                counts.0 += 1;
                out.passed.push(rec);
            }
            verdict => {
                if verdict == Conclusion::Unparseable {
                    rec.add_flag(flags::UNPARSEABLE);
                    out.report.unparseable += 1;
                }
                rec.status = Status::FilteredFail;
                counts.1 += 1;
                out.failed.push(rec);
            }
        }
    }
    let report = &mut out.report;
    report.total = records.len();
    report.passed = out.passed.len();
    report.failed = out.failed.len();
    report.deferred = out.deferred.len();
    report.pass_rate = rate(report.passed, report.failed);
    report.per_type = per_type
        .into_iter()
        .map(|(t, (p, f))| {
            (
                t,
                TypeRate {
                    passed: p,
                    failed: f,
                    pass_rate: rate(p, f),
                },
            )
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::hallu;
    use crate::gateway::{EndpointConfig, MockBackend, MockEndpointScript, MockFailure, MockReply, MockScript, Registry, RetryPolicy};
    use crate::taxonomy::TaskKindId;
    use std::collections::HashMap;
    use std::sync::Arc;

    #[test]
    fn check_prompt_contents() {
        let tax = Taxonomy::builtin();
        let rec = hallu("r1", TaskKindId::Summarization, TypeId::Io);
        let p = build_check_prompt(&rec, tax.entry(TypeId::Io)).unwrap();
        assert!(p.contains("The task output should omit necessary information"));
        assert!(p.contains("The task output contains an error in the specified span."));
        assert!(p.contains("There are no other errors in the task output except for the specified span"));
        assert!(p.contains("**Specified Span:**\n"));
        assert!(p.ends_with("### Your Judgement ###"));
        let mut neg = rec.clone();
        neg.label = Label::NoHallucination;
        assert!(matches!(
            build_check_prompt(&neg, tax.entry(TypeId::Io)),
            Err(FilterError::LabelMismatch { .. })
        ));
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("...analysis...\nConclusion: Yes").conclusion, Conclusion::Yes);
        assert_eq!(parse_verdict("Conclusion: No because...").conclusion, Conclusion::No);
        assert_eq!(parse_verdict("All criteria met.").conclusion, Conclusion::Unparseable);
        assert_eq!(parse_verdict("Conclusion: No\n...\n**Conclusion:** **Yes**").conclusion, Conclusion::Yes);
        assert_eq!(parse_verdict("conclusion: yesterday").conclusion, Conclusion::Unparseable);
        assert_eq!(parse_verdict("Conclusion: Nope").conclusion, Conclusion::Unparseable);
        assert_eq!(parse_verdict("CONCLUSION:NO.").conclusion, Conclusion::No);
    }

    #[tokio::test]
    async fn pass_rate_and_deferral() {
        let mut sequence: Vec<MockReply> = Vec::new();
        for i in 0..10 {
            let text = if i % 5 == 4 { "Conclusion: No" } else { "Conclusion: Yes" };
            sequence.push(MockReply::Texts(vec![text.into()]));
        }
        sequence.push(MockReply::Error { error: MockFailure::Status(500) });
        sequence.push(MockReply::Texts(vec!["no idea".into()]));
        let backend = Arc::new(MockBackend::new(MockScript {
            endpoints: HashMap::from([(
                "verifier".to_string(),
                MockEndpointScript {
                    sequence,
                    ..Default::default()
                },
            )]),
        }));
        let mut reg = Registry::default();
        reg.insert(EndpointConfig::mock("verifier"));
        let gw = Gateway::new(reg, backend).with_retry(RetryPolicy::immediate(1));
        let records: Vec<_> = (0..12)
            .map(|i| hallu(&format!("r{i}"), TaskKindId::Lfqa, TypeId::Fre))
            .collect();
        let out = filter_run(&Taxonomy::builtin(), &gw, &records, "verifier", 1).await.unwrap();
        assert_eq!(out.report.passed, 8);
        assert_eq!(out.report.failed, 3);
        assert_eq!(out.report.unparseable, 1);
        assert_eq!(out.report.deferred_ids, vec!["r10".to_string()]);
        assert_eq!(out.report.pass_rate, 8.0 / 11.0);
        assert!(out.failed.iter().any(|r| r.has_flag(flags::UNPARSEABLE)));
        assert!(out.passed.iter().all(|r| r.status == Status::FilteredPass));
    }
}
