//! Scores a toy prediction set and prints accuracy, the ROC curve and AUC.

use transfer_lab::data::Label;
use transfer_lab::metrics::{accuracy, aggregate_runs, auc, roc_csv, roc_curve, ScoredPrediction, DEFAULT_THRESHOLD};
use transfer_lab::Result;

fn main() -> Result<()> {
    let raw = [
        (0.95, Label::Malignant),
        (0.85, Label::Malignant),
        (0.80, Label::Benign),
        (0.70, Label::Malignant),
        (0.55, Label::Benign),
        (0.55, Label::Malignant),
        (0.30, Label::Benign),
        (0.10, Label::Benign),
    ];
    let preds = raw
        .iter()
        .map(|&(s, l)| ScoredPrediction::new(s, l))
        .collect::<Result<Vec<_>>>()?;
    println!("accuracy at {DEFAULT_THRESHOLD}: {:.3}", accuracy(&preds, DEFAULT_THRESHOLD)?);
    let curve = roc_curve(&preds)?;
    print!("{}", roc_csv(&curve));
    println!("AUC = {:.4}", auc(&curve));
    let (mean, std) = aggregate_runs(&[0.9583, 0.9750, 0.9667, 0.9833, 0.9500])?;
    println!("five runs: {:.2}% +/- {:.2}", 100.0 * mean, 100.0 * std);
    Ok(())
}
