use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// `counts[i][j]`: samples of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneVsRest {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    /// One-vs-rest accuracy `(TP + TN) / total`.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    /// Overall accuracy `trace / total`.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let c = classes.len();
        if c == 0 {
            return Err(MetricsError::InvalidArgument("no classes".into()));
        }
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(MetricsError::InvalidArgument(format!("counts must be {c}×{c}")));
        }
        Ok(Self { classes, counts })
    }

    pub fn zeros(classes: Vec<String>) -> Self {
        let c = classes.len();
        Self {
            classes,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], classes: Vec<String>) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::LengthMismatch(truth.len(), pred.len()));
        }
        let mut cm = Self::zeros(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<(), MetricsError> {
        let c = self.classes.len();
        for label in [truth, pred] {
            if label >= c {
                return Err(MetricsError::LabelOutOfRange { label, classes: c });
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_total(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn one_vs_rest(&self, k: usize) -> OneVsRest {
        let tp = self.counts[k][k];
        let fn_ = self.row_total(k) - tp;
        let fp = self.col_total(k) - tp;
        OneVsRest {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fn_ - fp,
        }
    }

    /// Counts with row percentages, e.g. `665 (92.0%)`, one row per true class.
    pub fn render_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| format!("{v} ({:.1}%)", 100.0 * ratio(v, total)))
                    .collect()
            })
            .collect();
        let label_w = self.classes.iter().map(String::len).max().unwrap_or(0).max("True \\ Predicted".len());
        let col_w: Vec<usize> = (0..self.num_classes())
            .map(|j| cells.iter().map(|r| r[j].len()).max().unwrap_or(0).max(self.classes[j].len()))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "True \\ Predicted");
        for (j, name) in self.classes.iter().enumerate() {
            let _ = write!(out, "  {:>w$}", name, w = col_w[j]);
        }
        out.push('\n');
        for (i, row) in cells.iter().enumerate() {
            let _ = write!(out, "{:<label_w$}", self.classes[i]);
            for (j, cell) in row.iter().enumerate() {
                let _ = write!(out, "  {:>w$}", cell, w = col_w[j]);
            }
            out.push('\n');
        }
        out
    }
}

/// Precision, recall and F1 per class; zero denominators give 0.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    let total = cm.total();
    (0..cm.num_classes())
        .map(|k| {
            let o = cm.one_vs_rest(k);
            let precision = ratio(o.tp, o.tp + o.fp);
            let recall = ratio(o.tp, o.tp + o.fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                class: cm.classes[k].clone(),
                accuracy: ratio(o.tp + o.tn, total),
                precision,
                recall,
                f1,
                support: o.tp + o.fn_,
            }
        })
        .collect()
}

/// `trace / total`.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    match cm.total() {
        0 => Err(MetricsError::EmptyMatrix),
        t => Ok(cm.trace() as f64 / t as f64),
    }
}

/// Unweighted mean over classes.
pub fn macro_average(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::TooFewSamples { n: 0, min: 1 });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

impl MacroMetrics {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let pc = per_class_metrics(cm);
        let pick = |f: fn(&ClassMetrics) -> f64| macro_average(&pc.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            accuracy: overall_accuracy(cm)?,
            precision: pick(|m| m.precision)?,
            recall: pick(|m| m.recall)?,
            f1: pick(|m| m.f1)?,
        })
    }
}
