//! Double-annotation workflow: a versioned in-memory store backed by an
//! append-only JSONL event log, and its HTTP front end in [`http`].

pub mod http;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{assemble_balanced, flags, save, CorpusError, HalluRecord, SourceRecord, Status};

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("stale version for item {item}: current is {current}, got {given}")]
    VersionConflict { item: String, current: u64, given: u64 },
    #[error("annotator {annotator} already judged item {item}")]
    DuplicateJudgment { item: String, annotator: String },
    #[error("item {item} is leased by {holder}")]
    LeaseHeld { item: String, holder: String },
    #[error("item {item} is {disposition:?}; {action} is not allowed")]
    InvalidState {
        item: String,
        disposition: Disposition,
        action: &'static str,
    },
    #[error("new span is not a substring of the new output")]
    SpanNotInOutput,
    #[error("{0} item(s) are still pending")]
    PendingItemsRemain(usize),
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("event log line {line}: {message}")]
    Replay { line: usize, message: String },
    #[error("event log I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "pass", alias = "Pass")]
    Pass,
    #[serde(rename = "fail", alias = "Fail")]
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Disposition {
    Pending,
    #[serde(rename = "Agreed_Pass")]
    AgreedPass,
    #[serde(rename = "Agreed_Fail")]
    AgreedFail,
    Disagreed,
    #[serde(rename = "Edited_Pass")]
    EditedPass,
    Dropped,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Pending => "Pending",
            Disposition::AgreedPass => "Agreed_Pass",
            Disposition::AgreedFail => "Agreed_Fail",
            Disposition::Disagreed => "Disagreed",
            Disposition::EditedPass => "Edited_Pass",
            Disposition::Dropped => "Dropped",
        }
    }
}

/// Disposition after two independent verdicts.
pub fn combine(a: Verdict, b: Verdict) -> Disposition {
    match (a, b) {
        (Verdict::Pass, Verdict::Pass) => Disposition::AgreedPass,
        (Verdict::Fail, Verdict::Fail) => Disposition::AgreedFail,
        _ => Disposition::Disagreed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub annotator: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub notes: String,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub new_output: String,
    pub new_span: String,
    pub editor_id: String,
    pub edited_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub record: HalluRecord,
    /// In submission order.
    pub judgments: Vec<Judgment>,
    pub edit: Option<Edit>,
    pub disposition: Disposition,
    pub version: u64,
}

impl AnnotationItem {
    fn new(record: HalluRecord) -> Self {
        AnnotationItem {
            record,
            judgments: Vec::new(),
            edit: None,
            disposition: Disposition::Pending,
            version: 0,
        }
    }

    fn judged_by(&self, annotator: &str) -> bool {
        self.judgments.iter().any(|j| j.annotator == annotator)
    }
}

#[derive(Debug, Clone)]
pub struct AnnotationConfig {
    pub annotators: BTreeSet<String>,
    pub lease: Duration,
    /// Lets a third annotator settle disagreements by majority.
    pub tie_breaker: bool,
}

impl AnnotationConfig {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(annotators: I) -> Self {
        AnnotationConfig {
            annotators: annotators.into_iter().map(Into::into).collect(),
            lease: Duration::minutes(30),
            tie_breaker: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Judgment {
        item_id: String,
        annotator: String,
        verdict: Verdict,
        notes: String,
        at: DateTime<Utc>,
    },
    Edit {
        item_id: String,
        editor: String,
        new_output: String,
        new_span: String,
        at: DateTime<Utc>,
    },
    Drop {
        item_id: String,
        by: String,
        at: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateBreakdown {
    pub n_items: usize,
    pub n_double_judged: usize,
    pub agreement_rate: f64,
    pub pass_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n_items: usize,
    pub n_pending: usize,
    pub n_double_judged: usize,
    pub n_matching: usize,
    /// Matching first two verdicts over double-judged items.
    pub agreement_rate: f64,
    /// (Agreed_Pass + Edited_Pass) over non-pending items.
    pub pass_rate: f64,
    /// True when no item has been decided yet, so both rates are vacuous.
    pub empty: bool,
    pub dispositions: BTreeMap<String, usize>,
    pub per_type: BTreeMap<String, RateBreakdown>,
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    pub force: bool,
    /// Positive pool and seed for emitting a balanced file.
    pub balance: Option<(Vec<SourceRecord>, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub path: PathBuf,
    pub hallucinated: usize,
    pub non_hallucinated: usize,
    pub total: usize,
}

struct State {
    items: Vec<AnnotationItem>,
    index: HashMap<String, usize>,
    leases: HashMap<String, (String, DateTime<Utc>)>,
}

pub struct AnnotationStore {
    state: RwLock<State>,
    log: Option<Mutex<File>>,
    config: AnnotationConfig,
    clock: Clock,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl AnnotationStore {
    /// Builds the store from the records under review and replays
    /// `log_path` if it exists. New events are appended to the same file.
    pub fn open(
        records: Vec<HalluRecord>,
        config: AnnotationConfig,
        log_path: Option<&Path>,
        clock: Clock,
    ) -> Result<Self, AnnotationError> {
        let mut index = HashMap::with_capacity(records.len());
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            if index.insert(r.id.clone(), items.len()).is_some() {
                return Err(AnnotationError::DuplicateItem(r.id));
            }
            items.push(AnnotationItem::new(r));
        }
        let store = AnnotationStore {
            state: RwLock::new(State {
                items,
                index,
                leases: HashMap::new(),
            }),
            log: None,
            config,
            clock,
        };
        let Some(path) = log_path else {
            return Ok(store);
        };
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut state = store.state.write();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let replay = |message: String| AnnotationError::Replay { line: i + 1, message };
                let event: Event = serde_json::from_str(&line).map_err(|e| replay(e.to_string()))?;
                store.check(&state, &event).map_err(|e| replay(e.to_string()))?;
                Self::apply(&mut state, &event);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AnnotationStore {
            log: Some(Mutex::new(file)),
            ..store
        })
    }

    pub fn config(&self) -> &AnnotationConfig {
        &self.config
    }

    fn ensure_annotator(&self, id: &str) -> Result<(), AnnotationError> {
        if self.config.annotators.contains(id) {
            Ok(())
        } else {
            Err(AnnotationError::UnknownAnnotator(id.to_string()))
        }
    }

    fn judgeable(&self, item: &AnnotationItem) -> bool {
        match item.disposition {
            Disposition::Pending => true,
            Disposition::Disagreed => self.config.tie_breaker && item.judgments.len() < 3 && item.edit.is_none(),
            _ => false,
        }
    }

    fn position(state: &State, id: &str) -> Result<usize, AnnotationError> {
        state
            .index
            .get(id)
            .copied()
            .ok_or_else(|| AnnotationError::UnknownItem(id.to_string()))
    }

    /// Validates an event against the current state (no version check).
    fn check(&self, state: &State, event: &Event) -> Result<(), AnnotationError> {
        match event {
            Event::Judgment { item_id, annotator, .. } => {
                self.ensure_annotator(annotator)?;
                let item = &state.items[Self::position(state, item_id)?];
                if item.judged_by(annotator) {
                    return Err(AnnotationError::DuplicateJudgment {
                        item: item_id.clone(),
                        annotator: annotator.clone(),
                    });
                }
                if !self.judgeable(item) {
                    return Err(AnnotationError::InvalidState {
                        item: item_id.clone(),
                        disposition: item.disposition,
                        action: "judgment",
                    });
                }
            }
            Event::Edit {
                item_id,
                new_output,
                new_span,
                ..
            } => {
                let item = &state.items[Self::position(state, item_id)?];
                if !matches!(item.disposition, Disposition::Disagreed | Disposition::AgreedFail) {
                    return Err(AnnotationError::InvalidState {
                        item: item_id.clone(),
                        disposition: item.disposition,
                        action: "edit",
                    });
                }
                if new_span.is_empty() || new_output.is_empty() || !new_output.contains(new_span.as_str()) {
                    return Err(AnnotationError::SpanNotInOutput);
                }
            }
            Event::Drop { item_id, .. } => {
                let item = &state.items[Self::position(state, item_id)?];
                if matches!(item.disposition, Disposition::Dropped | Disposition::EditedPass) {
                    return Err(AnnotationError::InvalidState {
                        item: item_id.clone(),
                        disposition: item.disposition,
                        action: "drop",
                    });
                }
            }
        }
        Ok(())
    }

    fn apply(state: &mut State, event: &Event) {
        let pos = match event {
            Event::Judgment { item_id, .. } | Event::Edit { item_id, .. } | Event::Drop { item_id, .. } => {
                state.index[item_id.as_str()]
            }
        };
        let item = &mut state.items[pos];
        match event {
            Event::Judgment {
                annotator,
                verdict,
                notes,
                at,
                ..
            } => {
                item.judgments.push(Judgment {
                    annotator: annotator.clone(),
                    verdict: *verdict,
                    notes: notes.clone(),
                    submitted_at: *at,
                });
                item.disposition = match item.judgments.as_slice() {
                    [_] => Disposition::Pending,
                    [a, b] => combine(a.verdict, b.verdict),
                    all => {
                        let passes = all.iter().filter(|j| j.verdict == Verdict::Pass).count();
                        if passes * 2 > all.len() {
                            Disposition::AgreedPass
                        } else {
                            Disposition::AgreedFail
                        }
                    }
                };
                state.leases.remove(&item.record.id);
            }
            Event::Edit {
                editor,
                new_output,
                new_span,
                at,
                ..
            } => {
                item.edit = Some(Edit {
                    new_output: new_output.clone(),
                    new_span: new_span.clone(),
                    editor_id: editor.clone(),
                    edited_at: *at,
                });
                item.disposition = Disposition::EditedPass;
            }
            Event::Drop { .. } => {
                item.disposition = Disposition::Dropped;
                state.leases.remove(&item.record.id);
            }
        }
        item.version += 1;
    }

    fn persist(&self, event: &Event) -> Result<(), AnnotationError> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(event).expect("events serialize");
            line.push('\n');
            let mut f = log.lock();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }

    /// Version check, validation, durable append and apply, all under the
    /// write lock.
    fn mutate(&self, item_id: &str, version: u64, event: Event) -> Result<AnnotationItem, AnnotationError> {
        let mut state = self.state.write();
        let pos = Self::position(&state, item_id)?;
        let current = state.items[pos].version;
        if current != version {
            return Err(AnnotationError::VersionConflict {
                item: item_id.to_string(),
                current,
                given: version,
            });
        }
        self.check(&state, &event)?;
        self.persist(&event)?;
        Self::apply(&mut state, &event);
        Ok(state.items[pos].clone())
    }

    /// Returns the next item this annotator may judge and leases it.
    /// A lease the annotator already holds is returned first.
    pub fn next_item(&self, annotator: &str) -> Result<Option<AnnotationItem>, AnnotationError> {
        self.ensure_annotator(annotator)?;
        let now = (self.clock)();
        let mut state = self.state.write();
        state.leases.retain(|_, (_, until)| *until > now);
        let held = state
            .leases
            .iter()
            .find(|(_, (who, _))| who == annotator)
            .map(|(id, _)| id.clone());
        let pick = held.map(|id| state.index[id.as_str()]).or_else(|| {
            state.items.iter().position(|item| {
                self.judgeable(item)
                    && !item.judged_by(annotator)
                    && !state.leases.contains_key(&item.record.id)
            })
        });
        let Some(pos) = pick else {
            return Ok(None);
        };
        let id = state.items[pos].record.id.clone();
        state.leases.insert(id, (annotator.to_string(), now + self.config.lease));
        Ok(Some(state.items[pos].clone()))
    }

    pub fn submit_judgment(
        &self,
        item_id: &str,
        annotator: &str,
        verdict: Verdict,
        notes: &str,
        version: u64,
    ) -> Result<AnnotationItem, AnnotationError> {
        self.ensure_annotator(annotator)?;
        let now = (self.clock)();
        {
            let state = self.state.read();
            if let Some((holder, until)) = state.leases.get(item_id) {
                if holder != annotator && *until > now {
                    return Err(AnnotationError::LeaseHeld {
                        item: item_id.to_string(),
                        holder: holder.clone(),
                    });
                }
            }
        }
        self.mutate(
            item_id,
            version,
            Event::Judgment {
                item_id: item_id.to_string(),
                annotator: annotator.to_string(),
                verdict,
                notes: notes.to_string(),
                at: now,
            },
        )
    }

    pub fn edit_item(
        &self,
        item_id: &str,
        editor: &str,
        new_output: &str,
        new_span: &str,
        version: u64,
    ) -> Result<AnnotationItem, AnnotationError> {
        self.ensure_annotator(editor)?;
        self.mutate(
            item_id,
            version,
            Event::Edit {
                item_id: item_id.to_string(),
                editor: editor.to_string(),
                new_output: new_output.to_string(),
                new_span: new_span.to_string(),
                at: (self.clock)(),
            },
        )
    }

    pub fn drop_item(&self, item_id: &str, by: &str, version: u64) -> Result<AnnotationItem, AnnotationError> {
        self.ensure_annotator(by)?;
        self.mutate(
            item_id,
            version,
            Event::Drop {
                item_id: item_id.to_string(),
                by: by.to_string(),
                at: (self.clock)(),
            },
        )
    }

    pub fn item(&self, id: &str) -> Option<AnnotationItem> {
        let state = self.state.read();
        state.index.get(id).map(|&i| state.items[i].clone())
    }

    pub fn items(&self) -> Vec<AnnotationItem> {
        self.state.read().items.clone()
    }

    pub fn stats(&self) -> AgreementStats {
        let state = self.state.read();
        let mut s = AgreementStats {
            n_items: state.items.len(),
            ..Default::default()
        };
        #[derive(Default)]
        struct Acc {
            items: usize,
            double: usize,
            matching: usize,
            decided: usize,
            passed: usize,
        }
        let mut total = Acc::default();
        let mut per_type: BTreeMap<String, Acc> = BTreeMap::new();
        for item in &state.items {
            *s.dispositions.entry(item.disposition.as_str().to_string()).or_insert(0) += 1;
            let key = match item.record.label.type_id() {
                Some(t) => t.as_str().to_string(),
                None => item.record.label.display().to_string(),
            };
            let acc = per_type.entry(key).or_default();
            for a in [&mut total, acc] {
                a.items += 1;
                if let [x, y, ..] = item.judgments.as_slice() {
                    a.double += 1;
                    a.matching += usize::from(x.verdict == y.verdict);
                }
                if item.disposition != Disposition::Pending {
                    a.decided += 1;
                    a.passed += usize::from(matches!(
                        item.disposition,
                        Disposition::AgreedPass | Disposition::EditedPass
                    ));
                }
            }
        }
        s.n_pending = total.items - total.decided;
        s.n_double_judged = total.double;
        s.n_matching = total.matching;
        s.agreement_rate = rate(total.matching, total.double);
        s.pass_rate = rate(total.passed, total.decided);
        s.empty = total.decided == 0 && total.double == 0;
        s.per_type = per_type
            .into_iter()
            .map(|(k, a)| {
                (
                    k,
                    RateBreakdown {
                        n_items: a.items,
                        n_double_judged: a.double,
                        agreement_rate: rate(a.matching, a.double),
                        pass_rate: rate(a.passed, a.decided),
                    },
                )
            })
            .collect();
        s
    }

    /// Finalized records in load order: Agreed_Pass as-is, Edited_Pass with
    /// the edit applied and the original kept in `original_output` /
    /// `original_span`.
    pub fn finalized(&self) -> Vec<HalluRecord> {
        let state = self.state.read();
        state
            .items
            .iter()
            .filter_map(|item| {
                let mut rec = item.record.clone();
                match (item.disposition, &item.edit) {
                    (Disposition::AgreedPass, _) => {}
                    (Disposition::EditedPass, Some(edit)) => {
                        rec.extra.insert("original_output".into(), Value::String(rec.output.clone()));
                        rec.extra.insert("original_span".into(), Value::String(rec.span.clone()));
                        rec.output = edit.new_output.clone();
                        rec.span = edit.new_span.clone();
                        rec.add_flag(flags::EDITED);
                    }
                    _ => return None,
                }
                rec.status = Status::AnnotatedPass;
                Some(rec)
            })
            .collect()
    }

    pub fn export(&self, path: &Path, opts: &ExportOptions) -> Result<ExportSummary, AnnotationError> {
        let pending = self.stats().n_pending;
        if pending > 0 && !opts.force {
            return Err(AnnotationError::PendingItemsRemain(pending));
        }
        let mut records = self.finalized();
        if let Some((pool, seed)) = &opts.balance {
            records = assemble_balanced(&records, pool, *seed)?;
        }
        save(&records, path)?;
        let hallucinated = records.iter().filter(|r| r.is_hallucinated()).count();
        Ok(ExportSummary {
            path: path.to_path_buf(),
            hallucinated,
            non_hallucinated: records.len() - hallucinated,
            total: records.len(),
        })
    }
}
