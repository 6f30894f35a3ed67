//! Record types, JSONL persistence and dataset assembly.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::index;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::rng::substream;
use crate::taxonomy::{collapse_binary, Label, TaskKindId, TypeId};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("not enough non-hallucinated sources for task kind {kind}: need {needed}, have {available}")]
    InsufficientPositives {
        kind: TaskKindId,
        needed: usize,
        available: usize,
    },
    #[error("pool for {type_id} has {available} records, target is {target}")]
    PoolTooSmall {
        type_id: TypeId,
        target: usize,
        available: usize,
    },
    #[error("positive_fraction must lie in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A correct input/output pair from a source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub id: String,
    pub task_kind: TaskKindId,
    pub task_input: String,
    pub gold_output: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_model: String,
    pub temperature: f64,
    pub candidate_index: u32,
    pub injected_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Raw,
    FilteredPass,
    FilteredFail,
    AnnotatedPass,
    AnnotatedFail,
    Edited,
}

impl Status {
    fn stage(self) -> u8 {
        match self {
            Status::Raw => 0,
            Status::FilteredPass | Status::FilteredFail => 1,
            Status::AnnotatedPass | Status::AnnotatedFail | Status::Edited => 2,
        }
    }

    /// Transitions only move forward through raw, filtered, annotated.
    pub fn can_advance_to(self, next: Status) -> bool {
        next.stage() > self.stage()
    }
}

/// A synthesized or annotated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalluRecord {
    pub id: String,
    pub source_id: String,
    pub task_kind: TaskKindId,
    pub task_input: String,
    pub output: String,
    pub label: Label,
    pub span: String,
    pub correction: String,
    pub provenance: Option<Provenance>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

pub mod flags {
    pub const SPAN_UNANCHORED: &str = "span_unanchored";
    pub const UNPARSEABLE: &str = "unparseable";
    pub const DEFERRED: &str = "deferred";
    pub const EDITED: &str = "edited";
}

impl HalluRecord {
    /// A non-hallucinated record that reuses the source's gold output verbatim.
    pub fn clean_from_source(source: &SourceRecord, status: Status) -> HalluRecord {
        HalluRecord {
            id: format!("{}-nohallu", source.id),
            source_id: source.id.clone(),
            task_kind: source.task_kind,
            task_input: source.task_input.clone(),
            output: source.gold_output.clone(),
            label: Label::NoHallucination,
            span: String::new(),
            correction: String::new(),
            provenance: None,
            status,
            flags: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn is_hallucinated(&self) -> bool {
        collapse_binary(&self.label)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub fn add_flag(&mut self, flag: &str) {
        if !self.has_flag(flag) {
            self.flags.push(flag.to_string());
        }
    }
}

/// Per-record checks applied on load.
pub trait Validate {
    fn record_id(&self) -> &str;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Validate for SourceRecord {
    fn record_id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        if self.task_input.is_empty() {
            return Err("task_input must be nonempty".into());
        }
        Ok(())
    }
}

impl Validate for HalluRecord {
    fn record_id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        match &self.label {
            Label::NoHallucination if !self.span.is_empty() || !self.correction.is_empty() => {
                Err("No Hallucination records must have empty span and correction".into())
            }
            Label::Type(_) if self.span.is_empty() => Err("typed records need a nonempty span".into()),
            _ => Ok(()),
        }
    }
}

/// Reads a JSONL file. Blank lines are skipped; any malformed line rejects
/// the whole file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
/// Missing parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Writes one JSON object per line, through a temporary file renamed into place.
pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| io_at(path)(std::io::Error::other(e)))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf).map_err(io_at(path))
}

/// Loads and validates records, rejecting duplicate ids.
pub fn load<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(io_at(path))?;
    let mut out: Vec<T> = Vec::new();
    let mut seen = HashSet::new();
    let schema = |line: usize, message: String| CorpusError::Schema {
        path: path.display().to_string(),
        line,
        message,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?;
        rec.validate().map_err(|m| schema(i + 1, m))?;
        if !seen.insert(rec.record_id().to_string()) {
            return Err(schema(i + 1, format!("duplicate id {:?}", rec.record_id())));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save<T: Serialize>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    write_jsonl(records, path)
}

/// Largest-remainder apportionment of `total` over integer `weights`.
/// Ties on the remainder go to the earlier entry.
pub fn largest_remainder<K: Clone>(weights: &[(K, usize)], total: usize) -> Vec<(K, usize)> {
    let sum: usize = weights.iter().map(|(_, w)| w).sum();
    if sum == 0 {
        return weights.iter().map(|(k, _)| (k.clone(), 0)).collect();
    }
    let mut out: Vec<(K, usize)> = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, (k, w)) in weights.iter().enumerate() {
        let num = total as u128 * *w as u128;
        let q = (num / sum as u128) as usize;
        remainders.push((num % sum as u128, i));
        assigned += q;
        out.push((k.clone(), q));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in remainders.into_iter().take(total - assigned) {
        out[i].1 += 1;
    }
    out
}

fn task_distribution(records: &[HalluRecord]) -> BTreeMap<TaskKindId, usize> {
    let mut dist = BTreeMap::new();
    for r in records {
        *dist.entry(r.task_kind).or_insert(0) += 1;
    }
    dist
}

fn sample_sorted<'a, T>(
    mut pool: Vec<&'a T>,
    key: impl Fn(&T) -> &str,
    n: usize,
    rng: &mut crate::rng::StreamRng,
) -> Vec<&'a T> {
    pool.sort_by(|a, b| key(a).cmp(key(b)));
    let mut picks = index::sample(rng, pool.len(), n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| pool[i]).collect()
}

/// Draws clean records per task kind to match `counts`.
fn draw_clean(
    counts: &BTreeMap<TaskKindId, usize>,
    pool: &[SourceRecord],
    stream: &str,
    seed: u64,
    status: Status,
) -> Result<Vec<HalluRecord>, CorpusError> {
    let mut out = Vec::new();
    for (&kind, &needed) in counts {
        if needed == 0 {
            continue;
        }
        let candidates: Vec<&SourceRecord> = pool.iter().filter(|s| s.task_kind == kind).collect();
        if candidates.len() < needed {
            return Err(CorpusError::InsufficientPositives {
                kind,
                needed,
                available: candidates.len(),
            });
        }
        let mut rng = substream(seed, &[stream, kind.as_str()]);
        for src in sample_sorted(candidates, |s| &s.id, needed, &mut rng) {
            out.push(HalluRecord::clean_from_source(src, status));
        }
    }
    Ok(out)
}

/// Adds one non-hallucinated record per hallucinated record, mirroring the
/// hallucinated records' task distribution.
pub fn assemble_balanced(
    hallucinated: &[HalluRecord],
    pool: &[SourceRecord],
    seed: u64,
) -> Result<Vec<HalluRecord>, CorpusError> {
    let counts = task_distribution(hallucinated);
    let clean = draw_clean(&counts, pool, "balance", seed, Status::AnnotatedPass)?;
    let mut out = hallucinated.to_vec();
    out.extend(clean);
    Ok(out)
}

/// Approximate per-type training mixture sizes.
pub fn default_mixture() -> BTreeMap<TypeId, usize> {
    TypeId::ALL
        .into_iter()
        .map(|t| {
            let n = match t {
                t if t.is_factual() => 9_000,
                TypeId::Cwic | TypeId::Bi | TypeId::Io => 5_000,
                _ => 2_500,
            };
            (t, n)
        })
        .collect()
}

/// Draws a training mixture: `targets[t]` hallucinated records of each type
/// plus `round_half_up(positive_fraction * total)` clean records whose task
/// distribution follows the hallucinated draw.
pub fn ratio_sample(
    pools: &BTreeMap<TypeId, Vec<HalluRecord>>,
    targets: &BTreeMap<TypeId, usize>,
    clean_pool: &[SourceRecord],
    positive_fraction: f64,
    seed: u64,
) -> Result<Vec<HalluRecord>, CorpusError> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(CorpusError::BadFraction(positive_fraction));
    }
    let mut out = Vec::new();
    for (&t, &target) in targets {
        let pool: Vec<&HalluRecord> = pools.get(&t).map(|p| p.iter().collect()).unwrap_or_default();
        if pool.len() < target {
            return Err(CorpusError::PoolTooSmall {
                type_id: t,
                target,
                available: pool.len(),
            });
        }
        let mut rng = substream(seed, &["ratio_sample", t.as_str()]);
        out.extend(sample_sorted(pool, |r| &r.id, target, &mut rng).into_iter().cloned());
    }
    let n_clean = (positive_fraction * out.len() as f64 + 0.5).floor() as usize;
    let dist: Vec<(TaskKindId, usize)> = task_distribution(&out).into_iter().collect();
    let counts: BTreeMap<TaskKindId, usize> = largest_remainder(&dist, n_clean).into_iter().collect();
    out.extend(draw_clean(&counts, clean_pool, "ratio_sample_clean", seed, Status::Raw)?);
    Ok(out)
}

/// Samples up to `per_cell` hallucinated records for every (task kind, type)
/// cell. Cells are emitted in (task kind, type) order.
pub fn sample_per_cell(records: &[HalluRecord], per_cell: usize, seed: u64) -> Vec<HalluRecord> {
    let mut cells: BTreeMap<(TaskKindId, TypeId), Vec<&HalluRecord>> = BTreeMap::new();
    for r in records {
        if let Some(t) = r.label.type_id() {
            cells.entry((r.task_kind, t)).or_default().push(r);
        }
    }
    let mut out = Vec::new();
    for ((kind, t), pool) in cells {
        let n = per_cell.min(pool.len());
        let mut rng = substream(seed, &["annotation_sample", kind.as_str(), t.as_str()]);
        out.extend(sample_sorted(pool, |r| &r.id, n, &mut rng).into_iter().cloned());
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Counts of every hallucinated label, keyed by its display text.
    pub per_label: BTreeMap<String, usize>,
    pub per_task: BTreeMap<TaskKindId, usize>,
    pub hallucinated: usize,
    pub non_hallucinated: usize,
    pub total: usize,
}

pub fn stats(records: &[HalluRecord]) -> DatasetStats {
    let mut s = DatasetStats::default();
    for r in records {
        *s.per_task.entry(r.task_kind).or_insert(0) += 1;
        if r.is_hallucinated() {
            s.hallucinated += 1;
            let key = match &r.label {
                Label::Invalid(_) => "Invalid".to_string(),
                other => other.display().to_string(),
            };
            *s.per_label.entry(key).or_insert(0) += 1;
        } else {
            s.non_hallucinated += 1;
        }
        s.total += 1;
    }
    s
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut recs = vec![
            hallu("a", TaskKindId::Lfqa, TypeId::Fe),
            hallu("b", TaskKindId::Summarization, TypeId::Io),
            HalluRecord::clean_from_source(&source("c", TaskKindId::Dialogue), Status::Raw),
        ];
        recs[0].provenance = Some(Provenance {
            generator_model: "gpt-4o".into(),
            temperature: 1.0,
            candidate_index: 3,
            injected_at: "2024-01-02T03:04:05Z".parse().unwrap(),
        });
        recs[1].extra.insert("note".into(), Value::String("kept".into()));
        recs[1].add_flag(flags::SPAN_UNANCHORED);
        save(&recs, &path).unwrap();
        let back: Vec<HalluRecord> = load(&path).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn schema_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let good = serde_json::to_string(&hallu("a", TaskKindId::Lfqa, TypeId::Fe)).unwrap();
        let mut bad: Value = serde_json::from_str(&good).unwrap();
        bad.as_object_mut().unwrap().remove("output");
        bad["id"] = "b".into();
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load::<HalluRecord>(&path) {
            Err(CorpusError::Schema { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("output"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut r = HalluRecord::clean_from_source(&source("c", TaskKindId::Dialogue), Status::Raw);
        r.span = "x".into();
        save(&[r], &path).unwrap();
        assert!(matches!(load::<HalluRecord>(&path), Err(CorpusError::Schema { line: 1, .. })));

        let a = hallu("a", TaskKindId::Lfqa, TypeId::Fe);
        save(&[a.clone(), a], &path).unwrap();
        assert!(matches!(load::<HalluRecord>(&path), Err(CorpusError::Schema { line: 2, .. })));
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load::<HalluRecord>(&path).unwrap().is_empty());
    }

    #[test]
    fn status_is_monotone() {
        assert!(Status::Raw.can_advance_to(Status::FilteredPass));
        assert!(Status::FilteredPass.can_advance_to(Status::Edited));
        assert!(!Status::AnnotatedPass.can_advance_to(Status::FilteredPass));
        assert!(!Status::FilteredFail.can_advance_to(Status::FilteredPass));
    }

    #[test]
    fn balanced_mirrors_task_distribution() {
        let hallucinated = vec![
            hallu("h1", TaskKindId::Summarization, TypeId::Io),
            hallu("h2", TaskKindId::Summarization, TypeId::Bi),
            hallu("h3", TaskKindId::Lfqa, TypeId::Fe),
            hallu("h4", TaskKindId::Lfqa, TypeId::Fre),
        ];
        let pool: Vec<SourceRecord> = (0..5)
            .map(|i| source(&format!("s{i}"), TaskKindId::Summarization))
            .chain((0..5).map(|i| source(&format!("l{i}"), TaskKindId::Lfqa)))
            .collect();
        let out = assemble_balanced(&hallucinated, &pool, 3).unwrap();
        assert_eq!(out.len(), 8);
        let clean: Vec<_> = out.iter().filter(|r| !r.is_hallucinated()).collect();
        assert_eq!(clean.len(), 4);
        assert_eq!(clean.iter().filter(|r| r.task_kind == TaskKindId::Summarization).count(), 2);
        assert_eq!(clean.iter().filter(|r| r.task_kind == TaskKindId::Lfqa).count(), 2);
        for r in &clean {
            assert!(r.span.is_empty() && r.correction.is_empty());
            let src = pool.iter().find(|s| s.id == r.source_id).unwrap();
            assert_eq!(r.output, src.gold_output);
        }
        assert_eq!(out, assemble_balanced(&hallucinated, &pool, 3).unwrap());
        assert!(assemble_balanced(&[], &pool, 3).unwrap().is_empty());
    }

    #[test]
    fn balanced_reports_deficient_kind() {
        let hallucinated = vec![hallu("h1", TaskKindId::Dialogue, TypeId::Fe)];
        let pool = vec![source("s", TaskKindId::Lfqa)];
        match assemble_balanced(&hallucinated, &pool, 0) {
            Err(CorpusError::InsufficientPositives { kind, .. }) => assert_eq!(kind, TaskKindId::Dialogue),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn largest_remainder_cases() {
        assert_eq!(largest_remainder(&[("a", 1), ("b", 1)], 3), vec![("a", 2), ("b", 1)]);
        assert_eq!(largest_remainder(&[("a", 2), ("b", 1)], 2), vec![("a", 1), ("b", 1)]);
        assert_eq!(largest_remainder(&[("a", 5), ("b", 3), ("c", 2)], 7), vec![("a", 4), ("b", 2), ("c", 1)]);
        assert_eq!(largest_remainder::<&str>(&[], 0), vec![]);
    }

    fn pools_for(types: &[(TypeId, usize)]) -> BTreeMap<TypeId, Vec<HalluRecord>> {
        types
            .iter()
            .map(|&(t, n)| {
                let kind = if t.is_factual() { TaskKindId::Lfqa } else { TaskKindId::Summarization };
                (t, (0..n).map(|i| hallu(&format!("{t}-{i}"), kind, t)).collect())
            })
            .collect()
    }

    #[test]
    fn ratio_sample_rounds_half_up() {
        let pools = pools_for(&[(TypeId::Fe, 4), (TypeId::Io, 4)]);
        let clean: Vec<_> = (0..4)
            .map(|i| source(&format!("l{i}"), TaskKindId::Lfqa))
            .chain((0..4).map(|i| source(&format!("s{i}"), TaskKindId::Summarization)))
            .collect();
        let targets = BTreeMap::from([(TypeId::Fe, 2), (TypeId::Io, 1)]);
        let out = ratio_sample(&pools, &targets, &clean, 0.5, 1).unwrap();
        assert_eq!(out.len(), 5);
        let hallucinated = out.iter().filter(|r| r.is_hallucinated()).count();
        assert_eq!(hallucinated, 3);
        // 1.5 positives rounds to 2, split 2:1 over lfqa:summarization -> 1 and 1.
        let clean_out: Vec<_> = out.iter().filter(|r| !r.is_hallucinated()).collect();
        assert_eq!(clean_out.iter().filter(|r| r.task_kind == TaskKindId::Lfqa).count(), 1);
        assert_eq!(clean_out.iter().filter(|r| r.task_kind == TaskKindId::Summarization).count(), 1);

        let only = ratio_sample(&pools, &targets, &clean, 0.0, 1).unwrap();
        assert_eq!(only.len(), 3);
        assert!(only.iter().all(|r| r.is_hallucinated()));
    }

    #[test]
    fn ratio_sample_pool_too_small() {
        let pools = pools_for(&[(TypeId::Fe, 1)]);
        let targets = BTreeMap::from([(TypeId::Fe, 2)]);
        assert!(matches!(
            ratio_sample(&pools, &targets, &[], 0.5, 1),
            Err(CorpusError::PoolTooSmall { type_id: TypeId::Fe, .. })
        ));
    }

    #[test]
    fn default_mixture_keeps_half_ratio() {
        let mixture = default_mixture();
        assert_eq!(mixture[&TypeId::Fre], 9_000);
        assert_eq!(mixture[&TypeId::Bi], 5_000);
        assert_eq!(mixture[&TypeId::Si], 2_500);
        // Scaled-down profile (1/100) over adequate pools.
        let targets: BTreeMap<TypeId, usize> = mixture.iter().map(|(&t, &n)| (t, n / 100)).collect();
        let pools = pools_for(&targets.iter().map(|(&t, &n)| (t, n + 5)).collect::<Vec<_>>());
        let clean: Vec<_> = (0..300)
            .map(|i| source(&format!("l{i}"), TaskKindId::Lfqa))
            .chain((0..300).map(|i| source(&format!("s{i}"), TaskKindId::Summarization)))
            .collect();
        let out = ratio_sample(&pools, &targets, &clean, 0.5, 9).unwrap();
        let h = out.iter().filter(|r| r.is_hallucinated()).count();
        let c = out.len() - h;
        assert_eq!(h, targets.values().sum::<usize>());
        assert_eq!(c, (h as f64 * 0.5 + 0.5).floor() as usize);
    }

    #[test]
    fn stats_counts() {
        assert_eq!(stats(&[]), DatasetStats::default());
        let recs = vec![
            hallu("a", TaskKindId::Lfqa, TypeId::Fe),
            hallu("b", TaskKindId::Lfqa, TypeId::Fe),
            HalluRecord::clean_from_source(&source("c", TaskKindId::Lfqa), Status::Raw),
        ];
        let s = stats(&recs);
        assert_eq!(s.per_label["Fabricated Entity"], 2);
        assert_eq!(s.non_hallucinated, 1);
        assert_eq!(s.hallucinated, 2);
        assert_eq!(s.total, 3);
        assert_eq!(s.per_task[&TaskKindId::Lfqa], 3);
    }

    #[test]
    fn per_cell_sampling_caps_each_cell() {
        let mut recs = Vec::new();
        for i in 0..30 {
            recs.push(hallu(&format!("a{i}"), TaskKindId::Lfqa, TypeId::Fe));
        }
        for i in 0..5 {
            recs.push(hallu(&format!("b{i}"), TaskKindId::Lfqa, TypeId::Fa));
        }
        let out = sample_per_cell(&recs, 20, 4);
        assert_eq!(out.len(), 25);
        assert_eq!(out, sample_per_cell(&recs, 20, 4));
    }

    proptest! {
        #[test]
        fn ratio_sample_ignores_pool_order(seed in 0u64..1000, rot in 0usize..10) {
            let pools = pools_for(&[(TypeId::Fe, 10), (TypeId::Io, 10)]);
            let mut rotated = pools.clone();
            for p in rotated.values_mut() {
                p.rotate_left(rot);
            }
            let clean: Vec<_> = (0..10)
                .map(|i| source(&format!("l{i}"), TaskKindId::Lfqa))
                .chain((0..10).map(|i| source(&format!("s{i}"), TaskKindId::Summarization)))
                .collect();
            let mut clean_rot = clean.clone();
            clean_rot.reverse();
            let targets = BTreeMap::from([(TypeId::Fe, 4), (TypeId::Io, 3)]);
            let a = ratio_sample(&pools, &targets, &clean, 0.5, seed).unwrap();
            let b = ratio_sample(&rotated, &targets, &clean_rot, 0.5, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn stats_totals_add_up(kinds in proptest::collection::vec((0usize..11, 0usize..12), 0..60)) {
            let recs: Vec<HalluRecord> = kinds
                .iter()
                .enumerate()
                .map(|(i, &(k, t))| {
                    let kind = TaskKindId::ALL[k];
                    if t == 11 {
                        HalluRecord::clean_from_source(&source(&format!("c{i}"), kind), Status::Raw)
                    } else {
                        hallu(&format!("h{i}"), kind, TypeId::ALL[t])
                    }
                })
                .collect();
            let s = stats(&recs);
            prop_assert_eq!(s.total, recs.len());
            prop_assert_eq!(s.hallucinated + s.non_hallucinated, s.total);
            prop_assert_eq!(s.per_label.values().sum::<usize>(), s.hallucinated);
            prop_assert_eq!(s.per_task.values().sum::<usize>(), s.total);
        }
    }
}
