//! Confusion matrix and precision/recall/F1 reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

pub type Confusion = [[u64; Label::COUNT]; Label::COUNT];

/// Rows are gold labels, columns are predictions.
pub fn confusion_matrix(preds: &[Label], golds: &[Label]) -> Result<Confusion> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut m = [[0u64; Label::COUNT]; Label::COUNT];
    for (p, g) in preds.iter().zip(golds) {
        m[g.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    /// Indexed by `Label::index`.
    pub per_class: Vec<ClassScores>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class scores; any zero denominator yields 0.
pub fn prf1(confusion: &Confusion) -> Metrics {
    let k = Label::COUNT;
    let mut per_class = Vec::with_capacity(k);
    let total: u64 = confusion.iter().flatten().sum();
    let mut diag = 0;
    for i in 0..k {
        let tp = confusion[i][i];
        diag += tp;
        let row: u64 = confusion[i].iter().sum();
        let col: u64 = confusion.iter().map(|r| r[i]).sum();
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
            support: row,
        });
    }
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class
            .iter()
            .map(|c| c.support as f64 * c.f1)
            .sum::<f64>()
            / total as f64
    };
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    Metrics {
        confusion: *confusion,
        per_class,
        weighted_f1,
        macro_f1,
        accuracy: ratio(diag, total),
    }
}

impl Metrics {
    pub fn scores(&self, label: Label) -> ClassScores {
        self.per_class[label.index()]
    }

    /// Support-weighted precision and recall, for the summary row.
    pub fn weighted_precision_recall(&self) -> (f64, f64) {
        let total: u64 = self.per_class.iter().map(|c| c.support).sum();
        if total == 0 {
            return (0.0, 0.0);
        }
        let w = |f: fn(&ClassScores) -> f64| {
            self.per_class
                .iter()
                .map(|c| c.support as f64 * f(c))
                .sum::<f64>()
                / total as f64
        };
        (w(|c| c.precision), w(|c| c.recall))
    }

    /// Plain-text table: one row per class, then "Weighted Avg.".
    pub fn to_table(&self) -> String {
        let width = Label::ALL
            .iter()
            .map(|l| l.as_str().len())
            .max()
            .unwrap_or(0)
            .max("Weighted Avg.".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "", "Precision", "Recall", "F1", "Support"
        );
        for label in Label::ALL {
            let c = self.scores(label);
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                label.as_str(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        let (p, r) = self.weighted_precision_recall();
        let support: u64 = self.per_class.iter().map(|c| c.support).sum();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "Weighted Avg.", p, r, self.weighted_f1, support
        );
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = Label::ALL
            .iter()
            .map(|l| {
                (
                    l.as_str().to_string(),
                    serde_json::to_value(self.scores(*l)).expect("plain struct"),
                )
            })
            .collect();
        let (p, r) = self.weighted_precision_recall();
        serde_json::json!({
            "labels": Label::ALL.iter().map(|l| l.as_str()).collect::<Vec<_>>(),
            "confusion": self.confusion,
            "per_class": per_class,
            "weighted_precision": p,
            "weighted_recall": r,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
        })
    }
}
