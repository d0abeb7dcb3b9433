//! Ingestion, preprocessing and datasets.

mod augment;
mod contours;
mod manifest;
mod pgm;
mod roi;
mod split;
mod synth;

pub use augment::{augment, AugmentParams, AugmentTransform};
pub use contours::{parse_contours, parse_contours_within, write_contours, ContourAnnotation, Label};
pub use manifest::Manifest;
pub use pgm::{encode_pgm, parse_pgm, GrayImage};
pub use roi::{crop_roi, gcn, RoiPatch, GCN_EPSILON};
pub use split::{split_balanced, split_indices};
pub use synth::{synth_benchmark, synth_source, synth_target, DomainParams, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stacks patches into an `[N, 1, S, S]` input tensor and `[N, 2]` one-hot
/// labels.
pub fn to_batch<'a, I>(patches: I) -> Result<(Tensor, Tensor)>
where
    I: IntoIterator<Item = &'a RoiPatch>,
{
    let mut pixels = Vec::new();
    let mut onehot = Vec::new();
    let mut size = None;
    let mut n = 0;
    for p in patches {
        match size {
            None => size = Some(p.size),
            Some(s) if s != p.size => {
                return Err(Error::Data(format!("mixed patch sizes {s} and {}", p.size)))
            }
            _ => {}
        }
        pixels.extend_from_slice(&p.pixels);
        let mut row = [0.0; 2];
        row[p.label.class_index()] = 1.0;
        onehot.extend_from_slice(&row);
        n += 1;
    }
    let s = size.ok_or_else(|| Error::Data("empty batch".into()))?;
    Ok((Tensor::new(vec![n, 1, s, s], pixels)?, Tensor::new(vec![n, 2], onehot)?))
}
