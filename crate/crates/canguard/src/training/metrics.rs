//! Evaluation metrics: confusion matrix and one-vs-rest
//! accuracy/precision/recall/F1 in macro and weighted variants.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::ClassLabel;
use crate::model::Model;
use crate::preprocess::WindowedDataset;

/// Per-class one-vs-rest metrics. `divide_by_zero` marks cells where a
/// denominator was zero and the value was defined as 0.
#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub divide_by_zero: bool,
}

/// Full evaluation report for a labeled set.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are truth, columns are predictions; row sums equal support.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

/// Counts `confusion[truth][pred]` over aligned label vectors.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return Err(Error::Data(format!(
            "confusion_matrix: {} truths vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Data(format!(
                "confusion_matrix: label {}/{} outside 0..{}",
                t, p, classes
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Derives the report from a confusion matrix. Macro averages run over the
/// classes present in the truth (support > 0); weighted averages are
/// support-weighted.
pub fn metrics_from_confusion(confusion: Vec<Vec<usize>>) -> MetricsReport {
    let classes = confusion.len();
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();

    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|r| r[c]).sum();
        let mut flag = false;
        let mut ratio = |num: usize, den: usize| {
            if den == 0 {
                flag = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            flag = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class: ClassLabel::from_index(c)
                .map(|l| l.as_str().to_string())
                .unwrap_or_else(|| format!("class_{c}")),
            precision,
            recall,
            f1,
            support,
            divide_by_zero: flag,
        });
    }

    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let n_present = present.len().max(1) as f64;
    let macro_of = |f: &dyn Fn(&ClassMetrics) -> f64| {
        present.iter().map(|m| f(m)).sum::<f64>() / n_present
    };
    let weighted_of = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            present
                .iter()
                .map(|m| f(m) * m.support as f64)
                .sum::<f64>()
                / total as f64
        }
    };

    MetricsReport {
        accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
        macro_precision: macro_of(&|m| m.precision),
        macro_recall: macro_of(&|m| m.recall),
        macro_f1: macro_of(&|m| m.f1),
        weighted_precision: weighted_of(&|m| m.precision),
        weighted_recall: weighted_of(&|m| m.recall),
        weighted_f1: weighted_of(&|m| m.f1),
        per_class,
        confusion,
        total,
    }
}

/// Runs the model over a labeled test set and reports metrics.
pub fn evaluate(model: &Model, test: &WindowedDataset) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Data("evaluate: empty test set".into()));
    }
    let pred = model.predict(&test.windows)?;
    let confusion = confusion_matrix(
        &test.label_indices(),
        &pred.argmax(),
        model.config.num_classes,
    )?;
    Ok(metrics_from_confusion(confusion))
}

/// Plain-text rendering of a report (headline metrics + per-class table).
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "accuracy {:.4} | weighted P {:.4} R {:.4} F1 {:.4} | macro P {:.4} R {:.4} F1 {:.4}\n",
        report.accuracy,
        report.weighted_precision,
        report.weighted_recall,
        report.weighted_f1,
        report.macro_precision,
        report.macro_recall,
        report.macro_f1,
    ));
    out.push_str(&format!(
        "{:<16} {:>9} {:>9} {:>9} {:>9}\n",
        "class", "precision", "recall", "f1", "support"
    ));
    for m in &report.per_class {
        out.push_str(&format!(
            "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>9}{}\n",
            m.class,
            m.precision,
            m.recall,
            m.f1,
            m.support,
            if m.divide_by_zero { " *" } else { "" }
        ));
    }
    out
}
