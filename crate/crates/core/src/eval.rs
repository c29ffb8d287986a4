//! Confusion matrices and support-weighted classification metrics.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::DamageLabel;

/// `C x C` counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Invalid("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::Invalid(format!(
                "{} predictions for {} truths",
                predictions.len(),
                truths.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&p, &t) in predictions.iter().zip(truths) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::Invalid(format!(
                "label pair ({truth}, {predicted}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum()
    }

    pub fn predicted(&self, k: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, k)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1. Empty denominators give 0.
pub fn per_class(m: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..m.classes())
        .map(|k| {
            let tp = m.get(k, k);
            let precision = ratio(tp, m.predicted(k));
            let recall = ratio(tp, m.support(k));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: m.support(k),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub config_hash: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall for each reported class, in class order.
    pub per_class_recall: Vec<f64>,
    pub support: Vec<u64>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

fn aggregate(m: &ConfusionMatrix, classes: &[usize]) -> Result<MetricsReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Invalid("cannot score an empty confusion matrix".into()));
    }
    let pc = per_class(m);
    let weight_total: u64 = classes.iter().map(|&k| pc[k].support).sum();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if weight_total == 0 {
            return 0.0;
        }
        classes.iter().map(|&k| pc[k].support as f64 * f(&pc[k])).sum::<f64>() / weight_total as f64
    };
    Ok(MetricsReport {
        model: String::new(),
        config_hash: String::new(),
        accuracy: m.trace() as f64 / total as f64,
        precision: weighted(|c| c.precision),
        recall: weighted(|c| c.recall),
        f1: weighted(|c| c.f1),
        per_class_recall: classes.iter().map(|&k| pc[k].recall).collect(),
        support: classes.iter().map(|&k| pc[k].support).collect(),
        confusion: m.rows(),
        alpha: None,
    })
}

/// Accuracy plus support-weighted precision, recall and F1 over all classes.
pub fn weighted_metrics(m: &ConfusionMatrix) -> Result<MetricsReport> {
    aggregate(m, &(0..m.classes()).collect::<Vec<_>>())
}

/// Four-class convention: accuracy counts every class, while the weighted
/// scores and per-class recall cover the damage classes only. Per-class
/// scores still see the full matrix, so a damage image predicted as
/// no-damage counts as a miss.
pub fn experiment2_metrics(m: &ConfusionMatrix) -> Result<MetricsReport> {
    if m.classes() != 4 {
        return Err(Error::Invalid(format!("expected a 4x4 matrix, got {0}x{0}", m.classes())));
    }
    aggregate(m, &DamageLabel::DAMAGE.map(|l| l.index()))
}

/// Metrics under the convention for `classes` (3: all classes, 4: damage only).
pub fn metrics_for(m: &ConfusionMatrix) -> Result<MetricsReport> {
    if m.classes() == 4 {
        experiment2_metrics(m)
    } else {
        weighted_metrics(m)
    }
}

pub fn format_row(r: &MetricsReport, name_width: usize) -> String {
    let mut s = format!(
        "{:<name_width$}  {:>5.2}%  {:.4}  {:.4}  {:.4}",
        r.model,
        r.accuracy * 100.0,
        r.precision,
        r.recall,
        r.f1
    );
    for rec in &r.per_class_recall {
        let _ = write!(s, "  {:>5.2}%", rec * 100.0);
    }
    s
}

/// Aligned plain-text table: model, accuracy, P, R, F1, per-class recall.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.model.len()).chain(["Model".len()]).max().unwrap_or(5);
    let classes = reports.iter().map(|r| r.per_class_recall.len()).max().unwrap_or(0);
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "Model", "Acc", "P", "R", "F1");
    for k in 0..classes {
        let _ = write!(out, "  {:>6}", format!("R[{k}]"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format_row(r, width));
        out.push('\n');
    }
    out
}

pub fn write_reports<W: Write>(mut w: W, reports: &[MetricsReport]) -> Result<()> {
    for r in reports {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<reports>", e))?;
    }
    Ok(())
}

pub fn read_reports<R: BufRead>(r: R) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<reports>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
