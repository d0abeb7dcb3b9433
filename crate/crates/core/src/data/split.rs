use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::contours::Label;
use super::roi::RoiPatch;
use crate::error::{Error, Result};

/// Stratified split of sample indices: each class is shuffled with `seed`
/// and cut at `round(fraction * n)` (kept within `[1, n - 1]`). Both halves
/// are returned in ascending index order.
pub fn split_indices(labels: &[Label], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in [Label::Benign, Label::Malignant] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} samples; at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let cut = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        first.extend_from_slice(&idx[..cut]);
        second.extend_from_slice(&idx[cut..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

pub fn split_balanced(
    dataset: &[RoiPatch],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<RoiPatch>, Vec<RoiPatch>)> {
    let labels: Vec<Label> = dataset.iter().map(|p| p.label).collect();
    let (a, b) = split_indices(&labels, fraction, seed)?;
    Ok((
        a.into_iter().map(|i| dataset[i].clone()).collect(),
        b.into_iter().map(|i| dataset[i].clone()).collect(),
    ))
}
