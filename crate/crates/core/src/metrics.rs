//! Frame-level transcription metrics.
//!
//! Counts are pooled over every key/frame cell. Accuracy is `TP / (TP + FP + FN)`.
//! Any ratio whose denominator is zero is reported as 0 and named in
//! [`MetricsReport::undefined`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::{binarize, PianoRoll, ProbRoll};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// Binarization threshold, when the report came from a probability roll.
    pub threshold: Option<f64>,
    /// Metrics whose denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl MetricsReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |num: u64, den: u64, name: &str| {
            if den == 0 {
                undefined.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp, "precision");
        let recall = ratio(tp, tp + fn_, "recall");
        let accuracy = ratio(tp, tp + fp + fn_, "accuracy");
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            undefined.push("f1".to_string());
            0.0
        };
        MetricsReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            accuracy,
            f1,
            threshold: None,
            undefined,
        }
    }
}

/// Pooled frame-level metrics of `pred` against `gt`.
pub fn frame_metrics(pred: &PianoRoll, gt: &PianoRoll) -> Result<MetricsReport> {
    if pred.data().dim() != gt.data().dim() {
        return Err(Error::domain(format!(
            "shape mismatch: prediction {:?} vs ground truth {:?}",
            pred.data().dim(),
            gt.data().dim()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_))
}

/// Binarizes `prob` at each threshold and scores it against `gt`.
pub fn evaluate_run(prob: &ProbRoll, gt: &PianoRoll, thresholds: &[f64]) -> Result<Vec<MetricsReport>> {
    thresholds
        .iter()
        .map(|&ts| {
            let mut report = frame_metrics(&binarize(prob, ts)?, gt)?;
            report.threshold = Some(ts);
            Ok(report)
        })
        .collect()
}

/// Renders labelled reports as a fixed-width table in percent.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>9} | {:>9} | {:>9} | {:>9}",
        "Model", "Precision", "Recall", "Accuracy", "F1-score"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 4 * 12));
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>9.1} | {:>9.1} | {:>9.1} | {:>9.1}",
            label,
            100.0 * r.precision,
            100.0 * r.recall,
            100.0 * r.accuracy,
            100.0 * r.f1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn roll(cells: &[(usize, usize)]) -> PianoRoll {
        let mut r = PianoRoll::zeros(88, 10);
        for &(k, t) in cells {
            r.set(k, t, true);
        }
        r
    }

    #[test]
    fn perfect_prediction() {
        let gt = roll(&[(3, 4), (50, 9)]);
        let r = frame_metrics(&gt, &gt).unwrap();
        assert_eq!((r.precision, r.recall, r.accuracy, r.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn two_one_one_counts() {
        let gt = roll(&[(0, 0), (0, 1), (0, 2)]);
        let pred = roll(&[(0, 0), (0, 1), (5, 5)]);
        let r = frame_metrics(&pred, &gt).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 1));
        assert_abs_diff_eq!(r.precision, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.recall, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.accuracy, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.f1, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_prediction_convention() {
        let gt = roll(&[(1, 1)]);
        let r = frame_metrics(&PianoRoll::zeros(88, 10), &gt).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(r.undefined.contains(&"precision".to_string()));
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            frame_metrics(&PianoRoll::zeros(88, 10), &PianoRoll::zeros(88, 11)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn evaluate_two_thresholds() {
        let gt = roll(&[(2, 2), (2, 3)]);
        let mut p = Array2::<f32>::zeros((88, 10));
        p[(2, 2)] = 0.45;
        p[(2, 3)] = 0.9;
        p[(7, 7)] = 0.42;
        let reports = evaluate_run(&ProbRoll::from_array(p).unwrap(), &gt, &[0.4, 0.5]).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].threshold, Some(0.4));
        assert_eq!((reports[0].tp, reports[0].fp, reports[0].fn_), (2, 1, 0));
        assert_eq!((reports[1].tp, reports[1].fp, reports[1].fn_), (1, 0, 1));
        assert!(reports[0].recall >= reports[1].recall);

        let exact = evaluate_run(&gt.to_prob(), &gt, &[0.1, 0.4, 0.5, 0.99]).unwrap();
        assert!(exact.iter().all(|r| r.f1 == 1.0));
    }

    #[test]
    fn report_json_uses_fn_key() {
        let json = serde_json::to_value(MetricsReport::from_counts(1, 2, 3)).unwrap();
        assert_eq!(json["fn"], 3);
    }
}
