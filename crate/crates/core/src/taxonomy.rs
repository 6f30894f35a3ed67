//! Hallucination type registry, task kinds and the task-kind compatibility map.
//!
//! The registry is loaded from a TOML document. A default document is
//! embedded in the binary; a user-supplied file can replace it wholesale.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// The embedded default taxonomy document.
pub const DEFAULT_TAXONOMY_TOML: &str = include_str!("../assets/taxonomy.toml");

/// Display text of the negative label.
pub const NO_HALLUCINATION: &str = "No Hallucination";

/// Display text of the type-free positive label used in binary mode.
pub const BINARY_HALLUCINATED: &str = "Hallucination";

const NEGATIVE_SYNONYMS: [&str; 3] = ["no hallucination", "none", "no hallu"];

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("unknown hallucination type: {0:?}")]
    UnknownType(String),
    #[error("unknown task kind: {0:?}")]
    UnknownTaskKind(String),
    #[error("invalid taxonomy config: {0}")]
    Config(String),
    #[error("failed to read taxonomy file: {0}")]
    Io(#[from] std::io::Error),
}

/// The eleven fine-grained hallucination types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TypeId {
    Tti,
    Tri,
    Cwic,
    Bi,
    Io,
    Cwoc,
    Si,
    Fre,
    Fie,
    Fe,
    Fa,
}

impl TypeId {
    pub const ALL: [TypeId; 11] = [
        TypeId::Tti,
        TypeId::Tri,
        TypeId::Cwic,
        TypeId::Bi,
        TypeId::Io,
        TypeId::Cwoc,
        TypeId::Si,
        TypeId::Fre,
        TypeId::Fie,
        TypeId::Fe,
        TypeId::Fa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TypeId::Tti => "TTI",
            TypeId::Tri => "TRI",
            TypeId::Cwic => "CwIC",
            TypeId::Bi => "BI",
            TypeId::Io => "IO",
            TypeId::Cwoc => "CwOC",
            TypeId::Si => "SI",
            TypeId::Fre => "FRE",
            TypeId::Fie => "FIE",
            TypeId::Fe => "FE",
            TypeId::Fa => "FA",
        }
    }

    /// Canonical display name. Labels are always serialized with this text.
    pub fn display_name(self) -> &'static str {
        match self {
            TypeId::Tti => "Task Type Inconsistency",
            TypeId::Tri => "Task Requirement Inconsistency",
            TypeId::Cwic => "Contradiction with Input Content",
            TypeId::Bi => "Baseless Information",
            TypeId::Io => "Information Omission",
            TypeId::Cwoc => "Contradiction within Output Content",
            TypeId::Si => "Structural Incoherence",
            TypeId::Fre => "Factual Recall Error",
            TypeId::Fie => "Factual Inference Error",
            TypeId::Fe => "Fabricated Entity",
            TypeId::Fa => "Fictional Attribution",
        }
    }

    pub fn level1(self) -> Level1 {
        match self {
            TypeId::Fre | TypeId::Fie | TypeId::Fe | TypeId::Fa => Level1::Factuality,
            _ => Level1::Faithfulness,
        }
    }

    pub fn level2(self) -> Level2 {
        match self {
            TypeId::Tti | TypeId::Tri => Level2::InstructionInconsistency,
            TypeId::Cwic | TypeId::Bi | TypeId::Io => Level2::InputContextInconsistency,
            TypeId::Cwoc | TypeId::Si => Level2::InternalInconsistency,
            TypeId::Fre | TypeId::Fie => Level2::FactContradiction,
            TypeId::Fe | TypeId::Fa => Level2::FactFabrication,
        }
    }

    pub fn is_factual(self) -> bool {
        self.level1() == Level1::Factuality
    }

    /// Matches the id or canonical display name, ignoring case and
    /// surrounding/repeated whitespace.
    pub fn from_name(text: &str) -> Option<TypeId> {
        let key = normalize(text);
        TypeId::ALL.into_iter().find(|t| {
            normalize(t.as_str()) == key || normalize(t.display_name()) == key
        })
    }
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TypeId {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TypeId::from_name(s).ok_or_else(|| TaxonomyError::UnknownType(s.to_string()))
    }
}

impl Serialize for TypeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TypeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level1 {
    Faithfulness,
    Factuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level2 {
    InstructionInconsistency,
    InputContextInconsistency,
    InternalInconsistency,
    FactContradiction,
    FactFabrication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    InformationExpansion,
    InformationAlignment,
    InformationCondensation,
    InformationContinuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindId {
    StoryWriting,
    PoemWriting,
    Paraphrasing,
    DataToText,
    Summarization,
    ContextualQa,
    ShortFormQa,
    Lfqa,
    MathReasoning,
    Dialogue,
    InstructionFollowing,
}

impl TaskKindId {
    pub const ALL: [TaskKindId; 11] = [
        TaskKindId::StoryWriting,
        TaskKindId::PoemWriting,
        TaskKindId::Paraphrasing,
        TaskKindId::DataToText,
        TaskKindId::Summarization,
        TaskKindId::ContextualQa,
        TaskKindId::ShortFormQa,
        TaskKindId::Lfqa,
        TaskKindId::MathReasoning,
        TaskKindId::Dialogue,
        TaskKindId::InstructionFollowing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKindId::StoryWriting => "story_writing",
            TaskKindId::PoemWriting => "poem_writing",
            TaskKindId::Paraphrasing => "paraphrasing",
            TaskKindId::DataToText => "data_to_text",
            TaskKindId::Summarization => "summarization",
            TaskKindId::ContextualQa => "contextual_qa",
            TaskKindId::ShortFormQa => "short_form_qa",
            TaskKindId::Lfqa => "lfqa",
            TaskKindId::MathReasoning => "math_reasoning",
            TaskKindId::Dialogue => "dialogue",
            TaskKindId::InstructionFollowing => "instruction_following",
        }
    }
}

impl fmt::Display for TaskKindId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKindId {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        TaskKindId::ALL
            .into_iter()
            .find(|k| k.as_str() == key)
            .ok_or_else(|| TaxonomyError::UnknownTaskKind(s.to_string()))
    }
}

/// A label as emitted by a model or stored on a record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    Type(TypeId),
    NoHallucination,
    /// Positive label without a fine-grained type (binary mode only).
    BinaryHallucinated,
    /// Unparseable model text, kept verbatim.
    Invalid(String),
}

impl Label {
    pub fn type_id(&self) -> Option<TypeId> {
        match self {
            Label::Type(t) => Some(*t),
            _ => None,
        }
    }

    pub fn is_negative(&self) -> bool {
        matches!(self, Label::NoHallucination)
    }

    /// Text used when the label appears in a response template or a record.
    pub fn display(&self) -> &str {
        match self {
            Label::Type(t) => t.display_name(),
            Label::NoHallucination => NO_HALLUCINATION,
            Label::BinaryHallucinated => BINARY_HALLUCINATED,
            Label::Invalid(raw) => raw,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display())
    }
}

/// Labels serialize as their display text; `Invalid` serializes as
/// `{"invalid": raw}` so that it can never be confused with a real label.
impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Label::Invalid(raw) => {
                use serde::ser::SerializeMap;
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("invalid", raw)?;
                m.end()
            }
            other => s.serialize_str(other.display()),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Invalid { invalid: String },
        }
        match Repr::deserialize(d)? {
            Repr::Invalid { invalid } => Ok(Label::Invalid(invalid)),
            Repr::Text(text) => {
                let key = normalize(&text);
                if key == normalize(NO_HALLUCINATION) {
                    Ok(Label::NoHallucination)
                } else if key == normalize(BINARY_HALLUCINATED) {
                    Ok(Label::BinaryHallucinated)
                } else {
                    TypeId::from_name(&text)
                        .map(Label::Type)
                        .ok_or_else(|| serde::de::Error::custom(format!("unknown label {text:?}")))
                }
            }
        }
    }
}

/// Negative-label synonyms are matched case-insensitively after trimming.
pub fn is_negative_text(text: &str) -> bool {
    let key = normalize(text);
    NEGATIVE_SYNONYMS.iter().any(|s| *s == key)
}

/// Collapses a label to the binary decision: `true` means hallucinated.
///
/// `Invalid` counts as hallucinated.
pub fn collapse_binary(label: &Label) -> bool {
    !matches!(label, Label::NoHallucination)
}

#[derive(Debug, Clone, Serialize)]
pub struct TaxonomyEntry {
    pub type_id: TypeId,
    pub display_name: String,
    /// Extra accepted spellings besides id and display name.
    pub names: Vec<String>,
    pub level1: Level1,
    pub level2: Level2,
    pub definition: String,
    /// General criteria followed by the type-specific ones.
    pub criteria: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskKind {
    pub kind_id: TaskKindId,
    pub category: TaskCategory,
    pub allowed_types: BTreeSet<TypeId>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    #[allow(dead_code)]
    version: u32,
    general_criteria: Vec<String>,
    types: Vec<TypeSection>,
    task_kinds: Vec<TaskKindSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TypeSection {
    id: TypeId,
    display_name: String,
    #[serde(default)]
    names: Vec<String>,
    level1: Level1,
    level2: Level2,
    definition: String,
    criteria: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskKindSection {
    id: TaskKindId,
    category: TaskCategory,
    allowed_types: Vec<TypeId>,
}

/// Immutable registry of types and task kinds.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    general_criteria: Vec<String>,
    entries: BTreeMap<TypeId, TaxonomyEntry>,
    kinds: BTreeMap<TaskKindId, TaskKind>,
}

impl Taxonomy {
    /// Loads the embedded default document.
    pub fn builtin() -> Taxonomy {
        Taxonomy::from_toml(DEFAULT_TAXONOMY_TOML).expect("embedded taxonomy is valid")
    }

    pub fn from_path(path: &Path) -> Result<Taxonomy, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Taxonomy, TaxonomyError> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| TaxonomyError::Config(e.to_string()))?;
        if file.general_criteria.len() < 2 {
            return Err(TaxonomyError::Config(
                "general_criteria needs at least two entries".into(),
            ));
        }

        let mut entries = BTreeMap::new();
        for section in file.types {
            let t = section.id;
            if section.level1 != t.level1() || section.level2 != t.level2() {
                return Err(TaxonomyError::Config(format!(
                    "{t}: level pairing ({:?}, {:?}) does not match the hierarchy",
                    section.level1, section.level2
                )));
            }
            if normalize(&section.display_name) != normalize(t.display_name()) {
                return Err(TaxonomyError::Config(format!(
                    "{t}: display_name must be {:?}; use `names` for aliases",
                    t.display_name()
                )));
            }
            let mut criteria = file.general_criteria.clone();
            criteria.extend(section.criteria);
            let entry = TaxonomyEntry {
                type_id: t,
                display_name: section.display_name,
                names: section.names,
                level1: section.level1,
                level2: section.level2,
                definition: section.definition,
                criteria,
            };
            if entries.insert(t, entry).is_some() {
                return Err(TaxonomyError::Config(format!("{t}: duplicate type section")));
            }
        }
        if let Some(missing) = TypeId::ALL.iter().find(|t| !entries.contains_key(t)) {
            return Err(TaxonomyError::Config(format!("missing type section for {missing}")));
        }

        let mut kinds = BTreeMap::new();
        for section in file.task_kinds {
            if section.allowed_types.is_empty() {
                return Err(TaxonomyError::Config(format!(
                    "{}: allowed_types must be nonempty",
                    section.id
                )));
            }
            let kind = TaskKind {
                kind_id: section.id,
                category: section.category,
                allowed_types: section.allowed_types.into_iter().collect(),
            };
            if kinds.insert(section.id, kind).is_some() {
                return Err(TaxonomyError::Config(format!(
                    "{}: duplicate task kind section",
                    section.id
                )));
            }
        }

        Ok(Taxonomy {
            general_criteria: file.general_criteria,
            entries,
            kinds,
        })
    }

    pub fn general_criteria(&self) -> &[String] {
        &self.general_criteria
    }

    /// Entries in canonical type order.
    pub fn entries(&self) -> impl Iterator<Item = &TaxonomyEntry> {
        TypeId::ALL.iter().map(move |t| &self.entries[t])
    }

    pub fn entry(&self, t: TypeId) -> &TaxonomyEntry {
        &self.entries[&t]
    }

    pub fn task_kinds(&self) -> impl Iterator<Item = &TaskKind> {
        self.kinds.values()
    }

    pub fn task_kind(&self, kind: TaskKindId) -> Result<&TaskKind, TaxonomyError> {
        self.kinds
            .get(&kind)
            .ok_or_else(|| TaxonomyError::UnknownTaskKind(kind.to_string()))
    }

    pub fn lookup(&self, name: &str) -> Result<&TaxonomyEntry, TaxonomyError> {
        let key = normalize(name);
        self.entries()
            .find(|e| {
                normalize(e.type_id.as_str()) == key
                    || normalize(&e.display_name) == key
                    || e.names.iter().any(|n| normalize(n) == key)
            })
            .ok_or_else(|| TaxonomyError::UnknownType(name.to_string()))
    }

    /// Parses a fine-grained label emitted by a model.
    pub fn parse_label(&self, raw: &str) -> Label {
        if is_negative_text(raw) {
            return Label::NoHallucination;
        }
        match self.lookup(raw) {
            Ok(entry) => Label::Type(entry.type_id),
            Err(_) => Label::Invalid(raw.to_string()),
        }
    }

    pub fn allowed_types_for(&self, kind: TaskKindId) -> Result<&BTreeSet<TypeId>, TaxonomyError> {
        Ok(&self.task_kind(kind)?.allowed_types)
    }

    pub fn is_compatible(&self, kind: TaskKindId, t: TypeId) -> bool {
        self.allowed_types_for(kind)
            .map(|set| set.contains(&t))
            .unwrap_or(false)
    }
}

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy::builtin()
    }
}

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_eleven_types_with_hierarchy() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.entries().count(), 11);
        assert_eq!(tax.entry(TypeId::Fre).level2, Level2::FactContradiction);
        assert_eq!(tax.entry(TypeId::Fie).level2, Level2::FactContradiction);
        assert_eq!(tax.entry(TypeId::Fe).level2, Level2::FactFabrication);
        assert_eq!(tax.entry(TypeId::Fa).level2, Level2::FactFabrication);
        assert_eq!(tax.entry(TypeId::Si).level1, Level1::Faithfulness);
        for e in tax.entries() {
            assert!(e.criteria.len() > 2, "{} lacks specific criteria", e.type_id);
            assert_eq!(e.criteria[..2], tax.general_criteria()[..]);
        }
    }

    #[test]
    fn lookup_by_name_and_id() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.lookup("Information Omission").unwrap().type_id, TypeId::Io);
        assert_eq!(tax.lookup("io").unwrap().type_id, TypeId::Io);
        assert_eq!(tax.lookup("  cwic ").unwrap().type_id, TypeId::Cwic);
        assert_eq!(
            tax.lookup("factual  recall hallucination").unwrap().type_id,
            TypeId::Fre
        );
        assert!(matches!(
            tax.lookup("Fabricated Facts"),
            Err(TaxonomyError::UnknownType(_))
        ));
    }

    #[test]
    fn parse_label_cases() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.parse_label("Structural Incoherence"), Label::Type(TypeId::Si));
        assert_eq!(tax.parse_label("No Hallucination"), Label::NoHallucination);
        assert_eq!(tax.parse_label(" NONE "), Label::NoHallucination);
        assert_eq!(tax.parse_label("no hallu"), Label::NoHallucination);
        assert_eq!(
            tax.parse_label("Hallucinated!!"),
            Label::Invalid("Hallucinated!!".into())
        );
    }

    #[test]
    fn display_names_round_trip() {
        let tax = Taxonomy::builtin();
        for t in TypeId::ALL {
            assert_eq!(tax.parse_label(t.display_name()), Label::Type(t));
        }
    }

    #[test]
    fn collapse_is_total() {
        assert!(collapse_binary(&Label::Type(TypeId::Fe)));
        assert!(!collapse_binary(&Label::NoHallucination));
        assert!(collapse_binary(&Label::Invalid("???".into())));
        assert!(collapse_binary(&Label::BinaryHallucinated));
    }

    #[test]
    fn compatibility_map() {
        let tax = Taxonomy::builtin();
        let para = tax.allowed_types_for(TaskKindId::Paraphrasing).unwrap();
        assert!(para.contains(&TypeId::Io) && para.contains(&TypeId::Bi));
        assert!(!para.contains(&TypeId::Fre));
        let lfqa = tax.allowed_types_for(TaskKindId::Lfqa).unwrap();
        for t in [TypeId::Fre, TypeId::Fie, TypeId::Fe, TypeId::Fa] {
            assert!(lfqa.contains(&t));
        }
        assert!(!tax
            .allowed_types_for(TaskKindId::StoryWriting)
            .unwrap()
            .contains(&TypeId::Fre));
    }

    #[test]
    fn compatibility_respects_category_rules() {
        let tax = Taxonomy::builtin();
        let knowledge_seeking = [
            TaskKindId::Lfqa,
            TaskKindId::ShortFormQa,
            TaskKindId::ContextualQa,
            TaskKindId::Dialogue,
            TaskKindId::InstructionFollowing,
        ];
        let mut union = BTreeSet::new();
        for kind in tax.task_kinds() {
            assert!(!kind.allowed_types.is_empty());
            for t in &kind.allowed_types {
                if t.is_factual() {
                    assert!(knowledge_seeking.contains(&kind.kind_id), "{t} on {}", kind.kind_id);
                }
                if matches!(t, TypeId::Bi | TypeId::Io) {
                    assert!(
                        matches!(
                            kind.category,
                            TaskCategory::InformationAlignment | TaskCategory::InformationCondensation
                        ) || kind.kind_id == TaskKindId::Dialogue,
                        "{t} on {}",
                        kind.kind_id
                    );
                }
            }
            union.extend(kind.allowed_types.iter().copied());
        }
        assert_eq!(union.len(), 11);
        assert_eq!(
            tax.task_kind(TaskKindId::Summarization).unwrap().category,
            TaskCategory::InformationCondensation
        );
        assert_eq!(
            tax.task_kind(TaskKindId::DataToText).unwrap().category,
            TaskCategory::InformationAlignment
        );
    }

    #[test]
    fn label_serde() {
        let labels = vec![
            Label::Type(TypeId::Cwoc),
            Label::NoHallucination,
            Label::BinaryHallucinated,
            Label::Invalid("Hallucination".into()),
        ];
        let json = serde_json::to_string(&labels).unwrap();
        assert_eq!(
            json,
            r#"["Contradiction within Output Content","No Hallucination","Hallucination",{"invalid":"Hallucination"}]"#
        );
        let back: Vec<Label> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, labels);
        assert!(serde_json::from_str::<Label>(r#""Fabricated Facts""#).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let broken = DEFAULT_TAXONOMY_TOML.replace(
            "level2 = \"fact_fabrication\"\ndefinition = \"The generated content contains entirely",
            "level2 = \"fact_contradiction\"\ndefinition = \"The generated content contains entirely",
        );
        assert!(matches!(
            Taxonomy::from_toml(&broken),
            Err(TaxonomyError::Config(_))
        ));
    }
}
