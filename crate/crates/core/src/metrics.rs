//! Accuracy, run aggregation, ROC curves and AUC.

use std::fmt::Write as _;

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPrediction {
    /// Probability of the malignant class.
    pub score: f64,
    pub label: Label,
}

impl ScoredPrediction {
    pub fn new(score: f64, label: Label) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("ScoredPrediction", format!("score {score} outside [0, 1]")));
        }
        Ok(ScoredPrediction { score, label })
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Fraction of predictions where `score >= threshold` agrees with a
/// malignant label.
pub fn accuracy(preds: &[ScoredPrediction], threshold: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("accuracy", "no predictions"));
    }
    let correct = preds
        .iter()
        .filter(|p| (p.score >= threshold) == (p.label == Label::Malignant))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean and sample (n - 1) standard deviation.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(
            "aggregate_runs",
            format!("standard deviation needs at least 2 runs, got {}", values.len()),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` points from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
}

/// Sweeps thresholds over distinct scores in descending order. Equal scores
/// move the curve in a single step.
pub fn roc_curve(preds: &[ScoredPrediction]) -> Result<RocCurve> {
    let positives = preds.iter().filter(|p| p.label == Label::Malignant).count();
    let negatives = preds.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("roc_curve", "both classes must be present"));
    }
    let mut sorted: Vec<&ScoredPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].score;
        while i < sorted.len() && sorted[i].score == score {
            match sorted[i].label {
                Label::Malignant => tp += 1,
                Label::Benign => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    if points.last() != Some(&(1.0, 1.0)) {
        points.push((1.0, 1.0));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (fpr, tpr) in &curve.points {
        writeln!(s, "{fpr},{tpr}").expect("writing to String");
    }
    s
}
