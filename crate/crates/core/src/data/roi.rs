use super::contours::{ContourAnnotation, Label};
use super::pgm::GrayImage;
use crate::error::{Error, Result};

pub const GCN_EPSILON: f64 = 1e-8;

/// Square grayscale lesion patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPatch {
    pub size: usize,
    pub pixels: Vec<f64>,
    pub label: Label,
    pub source_id: String,
    pub normalized: bool,
}

impl RoiPatch {
    pub fn new(size: usize, pixels: Vec<f64>, label: Label, source_id: impl Into<String>) -> Result<Self> {
        if size == 0 || pixels.len() != size * size {
            return Err(Error::Data(format!(
                "patch of size {size} cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(RoiPatch {
            size,
            pixels,
            label,
            source_id: source_id.into(),
            normalized: false,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.size + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.pixels.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.pixels.len() as f64;
        var.sqrt()
    }
}

/// Crops an `S x S` patch centered on the contour's bounding-box center,
/// replicating edge pixels where the window leaves the image.
pub fn crop_roi(image: &GrayImage, annotation: &ContourAnnotation, size: usize) -> Result<RoiPatch> {
    if size == 0 {
        return Err(Error::Data("ROI size must be positive".into()));
    }
    let (x0, y0, x1, y1) = annotation.bounding_box();
    if annotation.contour.len() < 3 || x0 == x1 || y0 == y1 {
        return Err(Error::Data(format!(
            "degenerate contour for {}: bounding box ({x0},{y0})-({x1},{y1}) has zero area",
            annotation.image_id
        )));
    }
    let cx = ((x0 + x1) / 2) as isize;
    let cy = ((y0 + y1) / 2) as isize;
    let half = (size / 2) as isize;
    let (w, h) = (image.width as isize, image.height as isize);
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size as isize {
        let y = (cy - half + r).clamp(0, h - 1) as usize;
        for c in 0..size as isize {
            let x = (cx - half + c).clamp(0, w - 1) as usize;
            pixels.push(image.get(x, y));
        }
    }
    RoiPatch::new(size, pixels, annotation.label, annotation.image_id.clone())
}

/// Global contrast normalization: `(x - mean) / std` with the population
/// standard deviation. Patches with `std <= epsilon` map to zeros.
pub fn gcn(patch: &RoiPatch, epsilon: f64) -> RoiPatch {
    let mean = patch.mean();
    let std = patch.std();
    let mut out = patch.clone();
    for v in &mut out.pixels {
        *v = if std > epsilon { (*v - mean) / std } else { 0.0 };
    }
    out.normalized = true;
    out
}
