//! Accuracy, confusion reports and attention export.

mod export;

pub use export::{export_attention, AttentionExport, EXPORT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_aligned<T>(preds: &[Vec<T>], golds: &[Vec<T>], ids: Option<&[String]>) -> Result<usize> {
    if preds.len() != golds.len() {
        return Err(Error::Validation(format!(
            "{} predicted conversations for {} gold conversations",
            preds.len(),
            golds.len()
        )));
    }
    let mut total = 0;
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            let name = ids.and_then(|ids| ids.get(i)).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::Validation(format!(
                "conversation `{name}`: {} predictions for {} gold labels",
                p.len(),
                g.len()
            )));
        }
        total += g.len();
    }
    Ok(total)
}

/// Fraction of utterances whose prediction equals the gold label, pooled
/// over all conversations. `ids` names conversations in error messages.
pub fn accuracy<T: PartialEq>(preds: &[Vec<T>], golds: &[Vec<T>], ids: Option<&[String]>) -> Result<f64> {
    let total = check_aligned(preds, golds, ids)?;
    if total == 0 {
        return Err(Error::Validation("no utterances to score".into()));
    }
    let correct = preds
        .iter()
        .zip(golds)
        .flat_map(|(p, g)| p.iter().zip(g))
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: String,
    /// 0 when the label is never predicted.
    pub precision: f64,
    /// 0 when the label never occurs.
    pub recall: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub labels: Vec<String>,
    pub per_label: Vec<LabelStats>,
    /// Rows true, columns predicted.
    pub confusion: Vec<Vec<usize>>,
    /// Confusion rows divided by their sums; all-zero rows stay zero.
    pub normalized: Vec<Vec<f64>>,
    pub total_utterances: usize,
}

/// Confusion counts and per-label statistics. Labels are ids into `labels`.
pub fn confusion(preds: &[Vec<usize>], golds: &[Vec<usize>], labels: &[String], ids: Option<&[String]>) -> Result<EvalReport> {
    let total = check_aligned(preds, golds, ids)?;
    let l = labels.len();
    let mut m = vec![vec![0usize; l]; l];
    for (p, g) in preds.iter().zip(golds) {
        for (&py, &gy) in p.iter().zip(g) {
            if py >= l || gy >= l {
                return Err(Error::Index {
                    kind: "label",
                    index: py.max(gy),
                    len: l,
                });
            }
            m[gy][py] += 1;
        }
    }
    let correct: usize = (0..l).map(|i| m[i][i]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_label = (0..l)
        .map(|i| {
            let support: usize = m[i].iter().sum();
            let predicted: usize = m.iter().map(|row| row[i]).sum();
            LabelStats {
                label: labels[i].clone(),
                precision: ratio(m[i][i], predicted),
                recall: ratio(m[i][i], support),
                support,
                predicted,
            }
        })
        .collect();
    let normalized = m
        .iter()
        .map(|row| {
            let s: usize = row.iter().sum();
            row.iter().map(|&c| ratio(c, s)).collect()
        })
        .collect();
    Ok(EvalReport {
        accuracy: ratio(correct, total),
        labels: labels.to_vec(),
        per_label,
        confusion: m,
        normalized,
        total_utterances: total,
    })
}

/// Like [`confusion`] over label names. The label set is the gold labels in
/// first-seen order followed by any predicted-only labels.
pub fn confusion_by_name(preds: &[Vec<String>], golds: &[Vec<String>], ids: Option<&[String]>) -> Result<EvalReport> {
    check_aligned(preds, golds, ids)?;
    let mut labels: Vec<String> = Vec::new();
    for name in golds.iter().flatten().chain(preds.iter().flatten()) {
        if !labels.contains(name) {
            labels.push(name.clone());
        }
    }
    let id = |s: &String| labels.iter().position(|l| l == s).expect("collected above");
    let map = |xs: &[Vec<String>]| -> Vec<Vec<usize>> { xs.iter().map(|c| c.iter().map(id).collect()).collect() };
    confusion(&map(preds), &map(golds), &labels, ids)
}
