//! Confusion matrix, the five derived classification metrics, and training-history CSV export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EpochRecord, TrainingHistory};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions ({predictions}) and truths ({truths}) differ in length")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("label {label} at position {index} is not 0 or 1")]
    InvalidLabel { index: usize, label: u8 },
    #[error("no samples to score")]
    Empty,
    #[error("training history is empty")]
    EmptyHistory,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

/// Binary confusion counts with class 1 (IDC-positive) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_matrix(predictions: &[u8], truths: &[u8]) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (index, (&p, &t)) in predictions.iter().zip(truths).enumerate() {
        for label in [p, t] {
            if label > 1 {
                return Err(MetricsError::InvalidLabel { index, label });
            }
        }
        match (p, t) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Metrics as fractions in `[0, 1]`. A metric whose denominator is zero is `None`
/// and listed in `undefined`; it is never reported as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let accuracy = ratio(cm.tp + cm.tn, cm.total());
    let sensitivity = ratio(cm.tp, cm.tp + cm.fn_);
    let specificity = ratio(cm.tn, cm.tn + cm.fp);
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let undefined = [
        ("accuracy", accuracy),
        ("sensitivity", sensitivity),
        ("specificity", specificity),
        ("precision", precision),
        ("f1", f1),
    ]
    .iter()
    .filter(|(_, v)| v.is_none())
    .map(|(n, _)| n.to_string())
    .collect();
    Ok(MetricsReport {
        confusion: *cm,
        accuracy,
        sensitivity,
        specificity,
        precision,
        f1,
        undefined,
    })
}

/// Formats a fraction as a percentage rounded half-up to two decimals, e.g. `93.65`.
pub fn percent(fraction: f64) -> String {
    let hundredths = (fraction * 10_000.0 + 0.5 + 1e-9).floor();
    format!("{:.2}", hundredths / 100.0)
}

impl MetricsReport {
    /// Five-line human-readable summary.
    pub fn summary(&self) -> String {
        let show = |v: Option<f64>| v.map(|x| format!("{}%", percent(x))).unwrap_or_else(|| "undefined".into());
        let mut s = String::new();
        let c = &self.confusion;
        writeln!(s, "confusion: TP {} FP {} FN {} TN {}", c.tp, c.fp, c.fn_, c.tn).unwrap();
        writeln!(s, "accuracy    {}", show(self.accuracy)).unwrap();
        writeln!(s, "sensitivity {}", show(self.sensitivity)).unwrap();
        writeln!(s, "specificity {}", show(self.specificity)).unwrap();
        writeln!(s, "precision   {}", show(self.precision)).unwrap();
        write!(s, "f1          {}", show(self.f1)).unwrap();
        s
    }
}

pub const HISTORY_HEADER: &str = "epoch,train_acc,train_loss,test_acc,test_loss";

pub fn history_csv(history: &TrainingHistory) -> Result<String, MetricsError> {
    if history.epochs.is_empty() {
        return Err(MetricsError::EmptyHistory);
    }
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for (i, e) in history.epochs.iter().enumerate() {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            i + 1,
            e.train_accuracy,
            e.train_loss,
            e.test_accuracy,
            e.test_loss
        )
        .unwrap();
    }
    Ok(s)
}

pub fn export_history(history: &TrainingHistory, path: &Path) -> Result<(), MetricsError> {
    let csv = history_csv(history)?;
    std::fs::write(path, csv).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a file written by [`export_history`]. The best-epoch index is recomputed
/// as the first epoch with maximal test accuracy.
pub fn read_history(path: &Path) -> Result<TrainingHistory, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, message: &str| MetricsError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut epochs = Vec::new();
    for (i, line) in lines.enumerate() {
        let v: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(i + 2, &e.to_string()))?;
        if v.len() != 4 {
            return Err(bad(i + 2, "expected 5 columns"));
        }
        epochs.push(EpochRecord {
            train_accuracy: v[0],
            train_loss: v[1],
            test_accuracy: v[2],
            test_loss: v[3],
        });
    }
    if epochs.is_empty() {
        return Err(MetricsError::EmptyHistory);
    }
    let best_epoch = epochs
        .iter()
        .enumerate()
        .fold(0, |best, (i, e)| if e.test_accuracy > epochs[best].test_accuracy { i } else { best });
    Ok(TrainingHistory { epochs, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion_matrix(&[1, 0, 1], &[1, 0, 1]).unwrap(), ConfusionMatrix::new(2, 0, 0, 1));
        let truths = [1, 0, 0, 1, 1];
        let flipped: Vec<u8> = truths.iter().map(|t| 1 - t).collect();
        assert_eq!(confusion_matrix(&flipped, &truths).unwrap(), ConfusionMatrix::new(0, 2, 3, 0));
        assert!(matches!(confusion_matrix(&[1], &[1, 0]), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(confusion_matrix(&[2], &[1]), Err(MetricsError::InvalidLabel { index: 0, label: 2 })));
    }

    #[test]
    fn confusion_matches_counting_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let p: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let t: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let mut counts = [[0u64; 2]; 2];
        for i in 0..1000 {
            counts[p[i] as usize][t[i] as usize] += 1;
        }
        let cm = confusion_matrix(&p, &t).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(counts[1][1], counts[1][0], counts[0][1], counts[0][0]));
        assert_eq!(cm.total(), 1000);
    }

    #[test]
    fn reported_confusion_matrix_reproduces_table_values() {
        let r = compute_metrics(&ConfusionMatrix::new(3286, 107, 351, 3474)).unwrap();
        let got: Vec<String> = [r.accuracy, r.sensitivity, r.specificity, r.precision, r.f1]
            .iter()
            .map(|v| percent(v.unwrap()))
            .collect();
        assert_eq!(got, ["93.65", "90.35", "97.01", "96.85", "93.49"]);
        // 2·tp / (2·tp + fp + fn) = 6572 / 7030
        assert!((r.f1.unwrap() - 6572.0 / 7030.0).abs() < 1e-15);
        assert!((r.f1.unwrap() - 0.93486).abs() < 1e-5);
    }

    #[test]
    fn symmetric_and_undefined_cases() {
        let r = compute_metrics(&ConfusionMatrix::new(1, 1, 1, 1)).unwrap();
        for v in [r.accuracy, r.sensitivity, r.specificity, r.precision, r.f1] {
            assert_eq!(v, Some(0.5));
        }
        let r = compute_metrics(&ConfusionMatrix::new(0, 3, 0, 5)).unwrap();
        assert_eq!(r.sensitivity, None);
        assert_eq!(r.precision, Some(0.0));
        assert_eq!(r.f1, None);
        assert_eq!(r.undefined, vec!["sensitivity", "f1"]);
        assert!(matches!(compute_metrics(&ConfusionMatrix::default()), Err(MetricsError::Empty)));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["sensitivity"].is_null());
        assert_eq!(json["confusion"]["fn"], 0);
    }

    #[test]
    fn percent_rounds_half_up() {
        assert_eq!(percent(0.12345), "12.35");
        assert_eq!(percent(0.5), "50.00");
        assert_eq!(percent(1.0), "100.00");
        assert_eq!(percent(0.0), "0.00");
    }

    proptest! {
        #[test]
        fn metric_invariants(tp in 1u64..5000, fp in 1u64..5000, fn_ in 1u64..5000, tn in 1u64..5000, k in 1u64..50) {
            let cm = ConfusionMatrix::new(tp, fp, fn_, tn);
            let r = compute_metrics(&cm).unwrap();
            for v in [r.accuracy, r.sensitivity, r.specificity, r.precision, r.f1] {
                let v = v.unwrap();
                prop_assert!(v > 0.0 && v < 1.0);
            }
            let swapped = compute_metrics(&ConfusionMatrix::new(tn, fn_, fp, tp)).unwrap();
            prop_assert!((r.accuracy.unwrap() - swapped.accuracy.unwrap()).abs() < 1e-12);
            let (p, s) = (r.precision.unwrap(), r.sensitivity.unwrap());
            prop_assert!((r.f1.unwrap() - 2.0 / (1.0 / p + 1.0 / s)).abs() < 1e-12);
            let scaled = compute_metrics(&ConfusionMatrix::new(tp * k, fp * k, fn_ * k, tn * k)).unwrap();
            for (a, b) in [(r.accuracy, scaled.accuracy), (r.sensitivity, scaled.sensitivity), (r.specificity, scaled.specificity), (r.precision, scaled.precision), (r.f1, scaled.f1)] {
                prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
            }
        }
    }

    fn history(n: usize) -> TrainingHistory {
        TrainingHistory {
            epochs: (0..n)
                .map(|i| EpochRecord {
                    train_accuracy: 0.5 + i as f64 * 0.1,
                    train_loss: 1.0 / (i as f64 + 1.0),
                    test_accuracy: 0.4 + i as f64 * 0.123456789,
                    test_loss: 0.7,
                })
                .collect(),
            best_epoch: n.saturating_sub(1),
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = history(2);
        export_history(&h, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.500000,1.000000,0.400000,0.700000");
        let back = read_history(&path).unwrap();
        assert_eq!(back.best_epoch, 1);
        for (a, b) in h.epochs.iter().zip(&back.epochs) {
            assert!((a.test_accuracy - b.test_accuracy).abs() < 1e-6);
            assert!((a.train_loss - b.train_loss).abs() < 1e-6);
        }
        assert!(matches!(export_history(&history(0), &path), Err(MetricsError::EmptyHistory)));
    }
}
