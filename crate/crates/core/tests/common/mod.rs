//! Shared helpers: a brute-force metric oracle and record builders.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hadkit::corpus::{HalluRecord, SourceRecord, Status};
use hadkit::taxonomy::{Label, TaskKindId};
use serde_json::Map;

/// Scores recomputed class by class straight from the definitions, without
/// a confusion matrix.
#[derive(Debug, Clone, Copy)]
pub struct OracleScores {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `pred[i]` lists (class, weight) pairs; classes within one item are distinct.
pub fn oracle_scores(gold: &[u8], pred: &[Vec<(u8, f64)>]) -> OracleScores {
    let weight = |i: usize, c: u8| -> f64 { pred[i].iter().filter(|(k, _)| *k == c).map(|(_, w)| *w).sum() };
    let mut classes: BTreeSet<u8> = gold.iter().copied().collect();
    for p in pred {
        for (c, w) in p {
            if *w > 0.0 {
                classes.insert(*c);
            }
        }
    }
    let n = gold.len();
    let accuracy = (0..n).map(|i| weight(i, gold[i])).sum::<f64>() / n as f64;

    let mut f1s = Vec::new();
    let mut recalls = Vec::new();
    for &c in &classes {
        let support = gold.iter().filter(|&&g| g == c).count();
        let tp: f64 = (0..n).filter(|&i| gold[i] == c).map(|i| weight(i, c)).sum();
        let predicted: f64 = (0..n).map(|i| weight(i, c)).sum();
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if support > 0 { tp / support as f64 } else { 0.0 };
        if support > 0 {
            recalls.push(r);
        }
        f1s.push(harmonic(p, r));
    }
    OracleScores {
        accuracy,
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
    }
}

/// Positive-class F1 via precision and recall.
pub fn oracle_micro_f1(gold: &[bool], pred_positive: &[f64]) -> f64 {
    let tp: f64 = gold.iter().zip(pred_positive).filter(|(g, _)| **g).map(|(_, w)| w).sum();
    let pred_mass: f64 = pred_positive.iter().sum();
    let positives = gold.iter().filter(|g| **g).count() as f64;
    if positives == 0.0 && pred_mass == 0.0 {
        return 1.0;
    }
    let p = if pred_mass > 0.0 { tp / pred_mass } else { 0.0 };
    let r = if positives > 0.0 { tp / positives } else { 0.0 };
    harmonic(p, r)
}

pub fn source(id: &str, kind: TaskKindId, input: &str, gold: &str) -> SourceRecord {
    SourceRecord {
        id: id.to_string(),
        task_kind: kind,
        task_input: input.to_string(),
        gold_output: gold.to_string(),
        extra: Map::new(),
    }
}

pub fn record(id: &str, kind: TaskKindId, label: Label, output: &str, span: &str, correction: &str) -> HalluRecord {
    HalluRecord {
        id: id.to_string(),
        source_id: format!("src-{id}"),
        task_kind: kind,
        task_input: format!("input for {id}"),
        output: output.to_string(),
        label,
        span: span.to_string(),
        correction: correction.to_string(),
        provenance: None,
        status: Status::AnnotatedPass,
        flags: Vec::new(),
        extra: Map::new(),
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
