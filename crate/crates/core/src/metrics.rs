//! Evaluation math: classification scores over (possibly fractional)
//! predictions, word-level span/correction overlap, and confusion matrices.
//!
//! All aggregation runs in item order so results are bit-reproducible.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::corpus::HalluRecord;
use crate::detection::Prediction;
use crate::taxonomy::{collapse_binary, Label, TypeId};

const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("gold has {gold} items but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("prediction {index}: weights must be non-negative and sum to 1")]
    BadWeights { index: usize },
    #[error("predictions do not align with gold: missing {missing:?}, extra {extra:?}")]
    Alignment {
        missing: Vec<String>,
        extra: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    pub const ONE: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    pub fn from_pr(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    /// Arithmetic mean of each component; zero for an empty slice.
    pub fn mean(items: &[Prf]) -> Prf {
        if items.is_empty() {
            return Prf::ZERO;
        }
        let n = items.len() as f64;
        let (p, r, f) = items.iter().fold((0.0, 0.0, 0.0), |(p, r, f), x| {
            (p + x.precision, r + x.recall, f + x.f1)
        });
        Prf {
            precision: p / n,
            recall: r / n,
            f1: f / n,
        }
    }
}

/// Word-level overlap between a gold and a predicted text.
///
/// Tokens are whitespace-separated, case-sensitive, punctuation attached.
/// Overlap is the multiset intersection size.
pub fn word_prf(gold: &str, pred: &str) -> Prf {
    let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    match (gold_tokens.is_empty(), pred_tokens.is_empty()) {
        (true, true) => return Prf::ONE,
        (true, false) | (false, true) => return Prf::ZERO,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_tokens {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    Prf::from_pr(
        overlap as f64 / pred_tokens.len() as f64,
        overlap as f64 / gold_tokens.len() as f64,
    )
}

/// A prediction expressed as weights over classes, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighted<K> {
    pub weights: Vec<(K, f64)>,
}

impl<K> Weighted<K> {
    pub fn certain(class: K) -> Self {
        Weighted {
            weights: vec![(class, 1.0)],
        }
    }

    pub fn new(weights: Vec<(K, f64)>) -> Self {
        Weighted { weights }
    }

    fn is_valid(&self) -> bool {
        let sum: f64 = self.weights.iter().map(|(_, w)| w).sum();
        self.weights.iter().all(|(_, w)| w.is_finite() && *w >= 0.0)
            && (sum - 1.0).abs() <= WEIGHT_TOLERANCE
    }
}

impl<K> From<K> for Weighted<K> {
    fn from(class: K) -> Self {
        Weighted::certain(class)
    }
}

/// Rows are gold classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix<K> {
    pub classes: Vec<K>,
    pub cells: Vec<Vec<f64>>,
    pub support: Vec<usize>,
}

impl<K: Ord> ConfusionMatrix<K> {
    pub fn index_of(&self, class: &K) -> Option<usize> {
        self.classes.binary_search(class).ok()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.cells[i].iter().sum()
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        self.cells.iter().map(|row| row[j]).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.cells.iter().flatten().sum()
    }
}

impl<K: std::fmt::Display> ConfusionMatrix<K> {
    /// CSV with a header row of predicted classes and one row per gold class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for c in &self.classes {
            out.push(',');
            out.push_str(&csv_field(&c.to_string()));
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.cells) {
            out.push_str(&csv_field(&c.to_string()));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore<K> {
    pub class: K,
    #[serde(flatten)]
    pub prf: Prf,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationSummary<K> {
    pub n_items: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix<K>,
    pub per_class: Vec<ClassScore<K>>,
}

/// Accuracy, balanced accuracy and macro scores.
///
/// The macro class set is every class present in gold or carrying positive
/// predicted weight. Balanced accuracy averages recall over gold classes only.
/// Empty input yields all-zero scores.
pub fn classification_metrics<K: Ord + Clone>(
    gold: &[K],
    pred: &[Weighted<K>],
) -> Result<ClassificationSummary<K>, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if let Some(index) = pred.iter().position(|p| !p.is_valid()) {
        return Err(MetricsError::BadWeights { index });
    }

    let mut set: BTreeSet<K> = gold.iter().cloned().collect();
    for p in pred {
        set.extend(p.weights.iter().filter(|(_, w)| *w > 0.0).map(|(k, _)| k.clone()));
    }
    let classes: Vec<K> = set.into_iter().collect();
    let k = classes.len();
    let idx = |c: &K| classes.binary_search(c).expect("class collected above");

    let mut cells = vec![vec![0.0f64; k]; k];
    let mut support = vec![0usize; k];
    let mut correct = 0.0f64;
    for (g, p) in gold.iter().zip(pred) {
        let gi = idx(g);
        support[gi] += 1;
        for (c, w) in &p.weights {
            if *w > 0.0 {
                cells[gi][idx(c)] += w;
                if c == g {
                    correct += w;
                }
            }
        }
    }

    let n = gold.len();
    let mut per_class = Vec::with_capacity(k);
    let mut recall_sum_gold = 0.0;
    let mut gold_classes = 0usize;
    for (i, class) in classes.iter().enumerate() {
        let tp = cells[i][i];
        let predicted: f64 = cells.iter().map(|row| row[i]).sum();
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if support[i] > 0 {
            tp / support[i] as f64
        } else {
            0.0
        };
        if support[i] > 0 {
            recall_sum_gold += recall;
            gold_classes += 1;
        }
        per_class.push(ClassScore {
            class: class.clone(),
            prf: Prf::from_pr(precision, recall),
            support: support[i],
        });
    }

    let macro_of = |f: fn(&Prf) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(|c| f(&c.prf)).sum::<f64>() / k as f64
        }
    };
    Ok(ClassificationSummary {
        n_items: n,
        accuracy: if n == 0 { 0.0 } else { correct / n as f64 },
        balanced_accuracy: if gold_classes == 0 {
            0.0
        } else {
            recall_sum_gold / gold_classes as f64
        },
        macro_precision: macro_of(|p| p.precision),
        macro_recall: macro_of(|p| p.recall),
        macro_f1: macro_of(|p| p.f1),
        confusion: ConfusionMatrix {
            classes,
            cells,
            support,
        },
        per_class,
    })
}

/// F1 over pooled TP/FP/FN with "hallucinated" as the positive class.
///
/// `pred_positive[i]` is the weight the prediction puts on "hallucinated".
/// With no gold positives and no predicted positive mass the score is 1.
pub fn micro_f1_positive(gold: &[bool], pred_positive: &[f64]) -> Result<f64, MetricsError> {
    if gold.len() != pred_positive.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred_positive.len(),
        });
    }
    if let Some(index) = pred_positive
        .iter()
        .position(|w| !(w.is_finite() && (0.0..=1.0).contains(w)))
    {
        return Err(MetricsError::BadWeights { index });
    }
    let (mut tp, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64);
    for (&g, &w) in gold.iter().zip(pred_positive) {
        if g {
            tp += w;
            fn_ += 1.0 - w;
        } else {
            fp += w;
        }
    }
    let denom = 2.0 * tp + fp + fn_;
    Ok(if denom == 0.0 { 1.0 } else { 2.0 * tp / denom })
}

/// Class key for label-valued metrics. All invalid texts share one class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelClass {
    Type(TypeId),
    NoHallucination,
    BinaryHallucinated,
    Invalid,
}

impl LabelClass {
    /// Short category name used in per-class tables.
    pub fn short_name(&self) -> &'static str {
        match self {
            LabelClass::Type(t) => t.as_str(),
            LabelClass::NoHallucination => "No Hallu",
            LabelClass::BinaryHallucinated => "Hallu",
            LabelClass::Invalid => "Invalid",
        }
    }
}

impl From<&Label> for LabelClass {
    fn from(label: &Label) -> Self {
        match label {
            Label::Type(t) => LabelClass::Type(*t),
            Label::NoHallucination => LabelClass::NoHallucination,
            Label::BinaryHallucinated => LabelClass::BinaryHallucinated,
            Label::Invalid(_) => LabelClass::Invalid,
        }
    }
}

impl std::fmt::Display for LabelClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelClass::Type(t) => f.write_str(t.display_name()),
            LabelClass::NoHallucination => f.write_str(crate::taxonomy::NO_HALLUCINATION),
            LabelClass::BinaryHallucinated => f.write_str(crate::taxonomy::BINARY_HALLUCINATED),
            LabelClass::Invalid => f.write_str("Invalid"),
        }
    }
}

impl Serialize for LabelClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverallScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_items: usize,
    pub n_hallucinated: usize,
    pub binary_accuracy: f64,
    pub fine_accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1_positive: f64,
    pub span: Prf,
    pub correction: Prf,
    /// Macro average over all present categories.
    pub overall: OverallScore,
    pub per_class: Vec<ClassScore<LabelClass>>,
    pub confusion: ConfusionMatrix<LabelClass>,
}

impl MetricsReport {
    /// Per-category precision/recall/F1/size table in percent, followed by
    /// the macro-averaged overall row.
    pub fn per_class_table(&self) -> String {
        let mut out = String::from("Category,Precision,Recall,F1-Score,Size\n");
        let pct = |x: f64| format!("{:.2}", x * 100.0);
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.class.short_name(),
                pct(c.prf.precision),
                pct(c.prf.recall),
                pct(c.prf.f1),
                c.support
            );
        }
        let _ = writeln!(
            out,
            "overall,{},{},{},{}",
            pct(self.overall.precision),
            pct(self.overall.recall),
            pct(self.overall.f1),
            self.overall.support
        );
        out
    }
}

/// Pairs predictions with gold records by id, in gold order.
pub fn align<'a>(
    gold: &'a [HalluRecord],
    preds: &'a [Prediction],
) -> Result<Vec<(&'a HalluRecord, &'a Prediction)>, MetricsError> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    let mut extra = Vec::new();
    for p in preds {
        if by_id.insert(p.record_id.as_str(), p).is_some() {
            extra.push(p.record_id.clone());
        }
    }
    let gold_ids: std::collections::HashSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    extra.extend(
        preds
            .iter()
            .filter(|p| !gold_ids.contains(p.record_id.as_str()))
            .map(|p| p.record_id.clone()),
    );
    let missing: Vec<String> = gold
        .iter()
        .filter(|g| !by_id.contains_key(g.id.as_str()))
        .map(|g| g.id.clone())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(MetricsError::Alignment { missing, extra });
    }
    Ok(gold.iter().map(|g| (g, by_id[g.id.as_str()])).collect())
}

/// Full in-domain evaluation of detector predictions against gold records.
pub fn evaluate(gold: &[HalluRecord], preds: &[Prediction]) -> Result<MetricsReport, MetricsError> {
    let pairs = align(gold, preds)?;
    let n = pairs.len();

    let gold_classes: Vec<LabelClass> = pairs.iter().map(|(g, _)| (&g.label).into()).collect();
    let pred_classes: Vec<Weighted<LabelClass>> = pairs
        .iter()
        .map(|(_, p)| Weighted::certain((&p.result.predicted).into()))
        .collect();
    let fine = classification_metrics(&gold_classes, &pred_classes)?;

    let gold_binary: Vec<bool> = pairs.iter().map(|(g, _)| collapse_binary(&g.label)).collect();
    let pred_binary: Vec<bool> = pairs
        .iter()
        .map(|(_, p)| collapse_binary(&p.result.predicted))
        .collect();
    let binary_correct = gold_binary
        .iter()
        .zip(&pred_binary)
        .filter(|(g, p)| g == p)
        .count();
    let pred_weights: Vec<f64> = pred_binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let micro = micro_f1_positive(&gold_binary, &pred_weights)?;

    let mut spans = Vec::new();
    let mut corrections = Vec::new();
    for (g, p) in &pairs {
        if !collapse_binary(&g.label) {
            continue;
        }
        if matches!(p.result.predicted, Label::Invalid(_)) {
            spans.push(Prf::ZERO);
            corrections.push(Prf::ZERO);
        } else {
            spans.push(word_prf(&g.span, &p.result.span));
            corrections.push(word_prf(&g.correction, &p.result.correction));
        }
    }

    Ok(MetricsReport {
        n_items: n,
        n_hallucinated: spans.len(),
        binary_accuracy: if n == 0 {
            0.0
        } else {
            binary_correct as f64 / n as f64
        },
        fine_accuracy: fine.accuracy,
        balanced_accuracy: fine.balanced_accuracy,
        macro_f1: fine.macro_f1,
        micro_f1_positive: micro,
        span: Prf::mean(&spans),
        correction: Prf::mean(&corrections),
        overall: OverallScore {
            precision: fine.macro_precision,
            recall: fine.macro_recall,
            f1: fine.macro_f1,
            support: n,
        },
        per_class: fine.per_class,
        confusion: fine.confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr) => {
                assert_close!($a, $b, 1e-9)
            };
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{} vs {}", a, b);
            }};
        }
        pub(crate) use assert_close;
    }

    #[test]
    fn word_prf_hand_case() {
        let prf = word_prf("after a long day at school.", "a long day");
        assert_eq!(prf.precision, 1.0);
        assert_eq!(prf.recall, 0.5);
        assert_close!(prf.f1, 2.0 / 3.0);
        assert_eq!(word_prf("same text here", "same text here"), Prf::ONE);
        assert_eq!(word_prf("x y", "z"), Prf::ZERO);
    }

    #[test]
    fn word_prf_conventions() {
        assert_eq!(word_prf("", ""), Prf::ONE);
        assert_eq!(word_prf("  ", "\n"), Prf::ONE);
        assert_eq!(word_prf("a", ""), Prf::ZERO);
        assert_eq!(word_prf("", "a"), Prf::ZERO);
        // Case-sensitive, punctuation attached, multiset counting.
        assert_eq!(word_prf("School.", "school.").f1, 0.0);
        let prf = word_prf("a a b", "a a a");
        assert_close!(prf.precision, 2.0 / 3.0);
        assert_close!(prf.recall, 2.0 / 3.0);
    }

    #[test]
    fn classification_hand_case() {
        // H = 0, N = 1
        let gold = [0, 0, 1, 1];
        let pred: Vec<Weighted<u8>> = [0, 1, 1, 1].into_iter().map(Weighted::certain).collect();
        let m = classification_metrics(&gold, &pred).unwrap();
        assert_close!(m.accuracy, 0.75);
        assert_close!(m.balanced_accuracy, 0.75);
        assert_close!(m.per_class[0].prf.f1, 2.0 / 3.0);
        assert_close!(m.per_class[1].prf.f1, 0.8);
        assert_close!(m.macro_f1, (2.0 / 3.0 + 0.8) / 2.0);
    }

    #[test]
    fn classification_perfect_and_fractional() {
        let gold = ["a", "b", "c"];
        let pred: Vec<_> = gold.iter().map(|g| Weighted::certain(*g)).collect();
        let m = classification_metrics(&gold, &pred).unwrap();
        assert_eq!((m.accuracy, m.balanced_accuracy, m.macro_f1), (1.0, 1.0, 1.0));

        let m = classification_metrics(&["H"], &[Weighted::new(vec![("H", 0.5), ("N", 0.5)])]).unwrap();
        assert_close!(m.accuracy, 0.5);
        assert_close!(m.confusion.total_mass(), 1.0);
    }

    #[test]
    fn classification_errors() {
        assert!(matches!(
            classification_metrics(&[1, 2], &[Weighted::certain(1)]),
            Err(MetricsError::LengthMismatch { gold: 2, pred: 1 })
        ));
        assert!(matches!(
            classification_metrics(&[1], &[Weighted::new(vec![(1, 0.7)])]),
            Err(MetricsError::BadWeights { index: 0 })
        ));
        let m = classification_metrics::<u8>(&[], &[]).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.macro_f1, 0.0);
    }

    #[test]
    fn micro_f1_cases() {
        let gold = [true, true, false];
        assert_close!(micro_f1_positive(&gold, &[1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(micro_f1_positive(&gold, &[1.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(micro_f1_positive(&gold, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(micro_f1_positive(&[false], &[0.0]).unwrap(), 1.0);
        assert!(micro_f1_positive(&gold, &[0.0]).is_err());
    }

    #[test]
    fn confusion_csv_layout() {
        let m = classification_metrics(&["a", "b"], &[Weighted::certain("a"), Weighted::certain("a")]).unwrap();
        assert_eq!(m.confusion.to_csv(), "gold\\pred,a,b\na,1,0\nb,1,0\n");
    }
}
