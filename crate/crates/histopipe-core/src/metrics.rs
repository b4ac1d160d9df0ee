//! Accuracy, confusion matrices and the cross-validation driver.

use std::path::Path;

use thiserror::Error;

use crate::extraction::kfold_assign;
use crate::imaging::{LabelClass, RasterImage};
use crate::io::FormatError;
use crate::manifest::SplitAssignment;
use crate::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{labels} labels vs {predictions} predictions")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("cross-validation needs at least one sample")]
    EmptyDataset,
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn from_pairs(
        labels: &[LabelClass],
        predictions: &[LabelClass],
    ) -> Result<ConfusionMatrix, MetricsError> {
        if labels.len() != predictions.len() {
            return Err(MetricsError::LengthMismatch {
                labels: labels.len(),
                predictions: predictions.len(),
            });
        }
        let mut counts = [[0u64; 4]; 4];
        for (t, p) in labels.iter().zip(predictions) {
            counts[t.code() as usize][p.code() as usize] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Row sums: how many samples of each true class were evaluated.
    pub fn per_class_totals(&self) -> [u64; 4] {
        let mut out = [0u64; 4];
        for (row, slot) in self.counts.iter().zip(out.iter_mut()) {
            *slot = row.iter().sum();
        }
        out
    }

    /// Diagonal over row sum; None for absent classes.
    pub fn per_class_recall(&self) -> [Option<f64>; 4] {
        let mut out = [None; 4];
        for c in 0..4 {
            let row: u64 = self.counts[c].iter().sum();
            if row > 0 {
                out[c] = Some(self.counts[c][c] as f64 / row as f64);
            }
        }
        out
    }

    /// Diagonal over column sum; None when a class was never predicted.
    pub fn per_class_precision(&self) -> [Option<f64>; 4] {
        let mut out = [None; 4];
        for c in 0..4 {
            let col: u64 = (0..4).map(|r| self.counts[r][c]).sum();
            if col > 0 {
                out[c] = Some(self.counts[c][c] as f64 / col as f64);
            }
        }
        out
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        let mut counts = self.counts;
        for r in 0..4 {
            for c in 0..4 {
                counts[r][c] += other.counts[r][c];
            }
        }
        ConfusionMatrix { counts }
    }

    pub fn to_text_block(&self) -> String {
        let mut out = String::from("confusion (rows true, cols predicted):\n");
        out.push_str("            normal    benign   in situ  invasive\n");
        for (c, row) in self.counts.iter().enumerate() {
            let name = LabelClass::from_code(c as u8).unwrap().name();
            out.push_str(&format!(
                "{name:>10} {:>9} {:>9} {:>9} {:>9}\n",
                row[0], row[1], row[2], row[3]
            ));
        }
        out
    }
}

/// One experiment row in the style of the accuracy tables: a
/// configuration label, what it was pre-trained on, how the data was
/// split, and the resulting accuracy (mean over folds when per-fold
/// accuracies exist).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub architecture: String,
    pub pretraining: String,
    pub splitting: String,
    pub accuracy: f64,
    pub per_fold: Option<Vec<f64>>,
}

impl ReportRow {
    pub fn max_fold(&self) -> Option<f64> {
        self.per_fold
            .as_ref()
            .and_then(|f| f.iter().cloned().reduce(f64::max))
    }
}

pub const REPORT_HEADER: &str = "HISTOPIPE-REPORT v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    /// Cross-validation rows must report the mean of their folds.
    pub fn check_consistency(&self) -> Result<(), String> {
        for row in &self.rows {
            if let Some(folds) = &row.per_fold {
                let mean: f64 = folds.iter().sum::<f64>() / folds.len() as f64;
                if (mean - row.accuracy).abs() > 1e-9 {
                    return Err(format!(
                        "row `{}` accuracy {} != fold mean {mean}",
                        row.architecture, row.accuracy
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "row: arch={}; pretraining={}; splitting={}; accuracy={}",
                row.architecture, row.pretraining, row.splitting, row.accuracy
            ));
            if let Some(folds) = &row.per_fold {
                let joined: Vec<String> = folds.iter().map(|f| f.to_string()).collect();
                out.push_str(&format!("; folds={}", joined.join(",")));
            }
            out.push('\n');
        }
        out
    }

    /// Aligned human-readable table mirroring the paper-style layout.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:<16} {:<28} {:>9}\n",
            "architecture", "pre-training on", "splitting", "accuracy"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<28} {:<16} {:<28} {:>8.2}%\n",
                row.architecture,
                row.pretraining,
                row.splitting,
                row.accuracy * 100.0
            ));
        }
        out
    }

    pub fn from_text(path: &Path, text: &str) -> Result<ExperimentReport, FormatError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("").trim();
        if header != REPORT_HEADER {
            return Err(FormatError::BadHeader {
                path: path.to_path_buf(),
                expected: REPORT_HEADER.to_string(),
                found: header.to_string(),
            });
        }
        let mut rows = Vec::new();
        for (i, raw) in lines.enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 2;
            let body = line
                .strip_prefix("row:")
                .ok_or_else(|| FormatError::record(path, lineno, "expected `row: ...`"))?;
            let mut architecture = None;
            let mut pretraining = None;
            let mut splitting = None;
            let mut accuracy = None;
            let mut per_fold = None;
            for field in body.split(';') {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| FormatError::record(path, lineno, "expected key=value"))?;
                let v = v.trim();
                match k.trim() {
                    "arch" => architecture = Some(v.to_string()),
                    "pretraining" => pretraining = Some(v.to_string()),
                    "splitting" => splitting = Some(v.to_string()),
                    "accuracy" => {
                        accuracy = Some(v.parse().map_err(|_| {
                            FormatError::record(path, lineno, format!("bad accuracy `{v}`"))
                        })?)
                    }
                    "folds" => {
                        per_fold = Some(
                            v.split(',')
                                .map(|f| {
                                    f.trim().parse().map_err(|_| {
                                        FormatError::record(path, lineno, format!("bad fold `{f}`"))
                                    })
                                })
                                .collect::<Result<Vec<f64>, _>>()?,
                        )
                    }
                    other => {
                        return Err(FormatError::record(
                            path,
                            lineno,
                            format!("unknown report key `{other}`"),
                        ))
                    }
                }
            }
            match (architecture, pretraining, splitting, accuracy) {
                (Some(architecture), Some(pretraining), Some(splitting), Some(accuracy)) => {
                    rows.push(ReportRow {
                        architecture,
                        pretraining,
                        splitting,
                        accuracy,
                        per_fold,
                    })
                }
                _ => return Err(FormatError::record(path, lineno, "row missing required fields")),
            }
        }
        Ok(ExperimentReport { rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        crate::io::write_text(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<ExperimentReport, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_text(path, &text)
    }
}

/// Result of one k-fold run: per-fold accuracy in fold order plus the
/// merged confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValResult {
    pub per_fold_accuracy: Vec<f64>,
    pub confusions: Vec<ConfusionMatrix>,
    pub degraded: bool,
}

impl CrossValResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.per_fold_accuracy.iter().sum::<f64>() / self.per_fold_accuracy.len() as f64
    }

    pub fn max_accuracy(&self) -> f64 {
        self.per_fold_accuracy.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn merged_confusion(&self) -> ConfusionMatrix {
        self.confusions
            .iter()
            .fold(ConfusionMatrix::default(), |acc, c| acc.merge(c))
    }

    pub fn to_report_row(&self, architecture: &str, pretraining: &str) -> ReportRow {
        ReportRow {
            architecture: architecture.to_string(),
            pretraining: pretraining.to_string(),
            splitting: format!("{}-fold cross-validation", self.per_fold_accuracy.len()),
            accuracy: self.mean_accuracy(),
            per_fold: Some(self.per_fold_accuracy.clone()),
        }
    }
}

/// Stratified k-fold cross-validation over a labeled set, generic in the
/// trainer so stub classifiers can exercise the harness. The trainer
/// gets the fold index and that fold's training subset and returns a
/// classifier for held-out patches; folds are evaluated in order.
pub fn run_cross_validation<T>(
    data: &[(RasterImage, LabelClass)],
    k: u32,
    seed: u64,
    mut trainer: T,
) -> Result<CrossValResult, Error>
where
    T: FnMut(u32, &[(RasterImage, LabelClass)]) -> Result<Box<dyn Fn(&RasterImage) -> LabelClass>, Error>,
{
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset.into());
    }
    let labels: Vec<LabelClass> = data.iter().map(|(_, l)| l).cloned().collect();
    let assignment = kfold_assign(&labels, k, seed)?;
    let SplitAssignment::KFold { fold_of, degraded, .. } = assignment else {
        unreachable!("kfold_assign returns kfold")
    };
    let mut per_fold_accuracy = Vec::with_capacity(k as usize);
    let mut confusions = Vec::with_capacity(k as usize);
    for fold in 0..k {
        let train_set: Vec<(RasterImage, LabelClass)> = data
            .iter()
            .zip(&fold_of)
            .filter(|(_, f)| **f != fold)
            .map(|(d, _)| d.clone())
            .collect();
        let val_set: Vec<&(RasterImage, LabelClass)> = data
            .iter()
            .zip(&fold_of)
            .filter(|(_, f)| **f == fold)
            .map(|(d, _)| d)
            .collect();
        let model = trainer(fold, &train_set)?;
        let truths: Vec<LabelClass> = val_set.iter().map(|(_, l)| *l).collect();
        let preds: Vec<LabelClass> = val_set.iter().map(|(p, _)| model(p)).collect();
        let confusion = ConfusionMatrix::from_pairs(&truths, &preds).map_err(Error::Metrics)?;
        per_fold_accuracy.push(confusion.accuracy());
        confusions.push(confusion);
    }
    Ok(CrossValResult {
        per_fold_accuracy,
        confusions,
        degraded,
    })
}
