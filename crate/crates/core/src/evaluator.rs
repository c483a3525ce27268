//! Confusion matrices and the per-class precision / recall / F1 and macro-F1
//! metric suite.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_record_image, DatasetManifest, SplitRole};
use crate::error::{Error, Result};
use crate::labelspec::{ClassLabel, ScoringMethod};
use crate::trainer::{predict, TrainedModel};

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_order: Vec<ClassLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_order: Vec<ClassLabel>) -> Self {
        let n = class_order.len();
        ConfusionMatrix {
            class_order,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(class_order: Vec<ClassLabel>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = class_order.len();
        if n == 0 || counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Validation(format!(
                "confusion matrix must be {n}x{n} to match the class order"
            )));
        }
        Ok(ConfusionMatrix { class_order, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    /// Predicted as `i` but truly another class.
    pub fn false_positives(&self, i: usize) -> u64 {
        (0..self.counts.len()).filter(|&r| r != i).map(|r| self.counts[r][i]).sum()
    }

    /// Truly `i` but predicted as another class.
    pub fn false_negatives(&self, i: usize) -> u64 {
        (0..self.counts.len()).filter(|&c| c != i).map(|c| self.counts[i][c]).sum()
    }

    pub fn true_negatives(&self, i: usize) -> u64 {
        self.total() - self.true_positives(i) - self.false_positives(i) - self.false_negatives(i)
    }

    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64
    }
}

pub fn confusion_matrix<T: AsRef<str>, P: AsRef<str>>(
    truths: &[T],
    preds: &[P],
    class_order: &[ClassLabel],
) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(Error::Validation(format!(
            "{} truths but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let index = |label: &str| {
        class_order
            .iter()
            .position(|c| c.as_str() == label)
            .ok_or_else(|| Error::Validation(format!("label {label} not in class order")))
    };
    let mut cm = ConfusionMatrix::new(class_order.to_vec());
    for (t, p) in truths.iter().zip(preds) {
        let (i, j) = (index(t.as_ref())?, index(p.as_ref())?);
        cm.counts[i][j] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub samples: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * (precision * recall) / (precision + recall)
    }
}

/// Per-class precision, recall and F1. Any zero denominator yields 0 and a
/// warning naming the class.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> (Vec<ClassMetrics>, Vec<String>) {
    let mut warnings = Vec::new();
    let metrics = cm
        .class_order
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let tp = cm.true_positives(i);
            let precision = ratio(tp, tp + cm.false_positives(i)).unwrap_or_else(|| {
                warnings.push(format!("{class}: never predicted, precision set to 0"));
                0.0
            });
            let recall = ratio(tp, tp + cm.false_negatives(i)).unwrap_or_else(|| {
                warnings.push(format!("{class}: no true samples, recall set to 0"));
                0.0
            });
            if precision + recall == 0.0 {
                warnings.push(format!("{class}: precision + recall is 0, F1 set to 0"));
            }
            ClassMetrics {
                class: class.clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.support(i),
            }
        })
        .collect();
    (metrics, warnings)
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(f1s: &[f64]) -> Result<f64> {
    if f1s.is_empty() {
        return Err(Error::Validation("macro F1 of an empty list".into()));
    }
    Ok(f1s.iter().sum::<f64>() / f1s.len() as f64)
}

pub fn report_from_matrix(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let (per_class, warnings) = per_class_metrics(cm);
    let f1s: Vec<f64> = per_class.iter().map(|m| m.f1).collect();
    Ok(MetricsReport {
        macro_f1: macro_f1(&f1s)?,
        accuracy: cm.accuracy(),
        samples: cm.total(),
        per_class,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub method: ScoringMethod,
    pub backbone: String,
    pub report: MetricsReport,
    pub confusion_matrix: ConfusionMatrix,
}

/// Predicts every test record (no augmentation) and scores the predictions.
pub fn evaluate_model(model: &TrainedModel, manifest: &DatasetManifest) -> Result<Evaluation> {
    if !manifest.schema_refs.is_empty() && !manifest.schema_refs.iter().any(|s| s.method == model.method) {
        let declared: Vec<&str> = manifest.schema_refs.iter().map(|s| s.method.id()).collect();
        return Err(Error::Incompatible(format!(
            "model scores {} but manifest is labeled for {}",
            model.method,
            declared.join(", ")
        )));
    }
    let records = if manifest.split.is_some() {
        manifest.records_with_role(SplitRole::Test)
    } else {
        manifest.records.iter().filter(|r| !r.is_excluded()).collect()
    };
    if records.is_empty() {
        return Err(Error::NoData);
    }
    let pairs: Vec<(ClassLabel, ClassLabel)> = records
        .par_iter()
        .map(|r| {
            let truth = r.label(model.method).cloned().ok_or_else(|| {
                if r.labels.is_empty() {
                    Error::MissingLabel {
                        image_id: r.image_id.clone(),
                        method: model.method.id().to_string(),
                    }
                } else {
                    Error::Incompatible(format!(
                        "{} is labeled for another method than the model's {}",
                        r.image_id, model.method
                    ))
                }
            })?;
            let img = load_record_image(manifest, r)?;
            Ok((truth, predict(model, &img)?.predicted_label))
        })
        .collect::<Result<_>>()?;
    let (truths, preds): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let cm = confusion_matrix(&truths, &preds, &model.class_order)?;
    Ok(Evaluation {
        method: model.method,
        backbone: model.backbone.id().to_string(),
        report: report_from_matrix(&cm)?,
        confusion_matrix: cm,
    })
}

fn three_decimals(v: f64) -> String {
    let s = format!("{v:.3}");
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => s,
    }
}

impl MetricsReport {
    /// One-row table with a P and R column pair per class followed by mF1.
    pub fn to_table(&self, row_label: &str) -> String {
        let mut out = String::new();
        let mut header = format!("{:<18}", "");
        let mut sub = format!("{:<18}", "");
        for m in &self.per_class {
            let _ = write!(header, " {:^13}", m.class.as_str());
            let _ = write!(sub, " {:>6} {:>6}", "P", "R");
        }
        let _ = writeln!(out, "{header} {:>6}", "mF1");
        let _ = writeln!(out, "{sub}");
        let mut row = format!("{row_label:<18}");
        for m in &self.per_class {
            let _ = write!(row, " {:>6} {:>6}", three_decimals(m.precision), three_decimals(m.recall));
        }
        let _ = writeln!(out, "{row} {:>6}", three_decimals(self.macro_f1));
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}
