//! Random geometric augmentation: rotation about the patch center, then a
//! translation, then an optional horizontal flip. Resampling is bilinear with
//! edge replication.

use rand::Rng;

use super::roi::RoiPatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Maximum shift as a fraction of the patch size, per axis.
    pub max_shift_fraction: f64,
    /// Rotation angles are drawn from `[0, max_rotation_degrees]`.
    pub max_rotation_degrees: f64,
    pub horizontal_flip: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            max_shift_fraction: 0.25,
            max_rotation_degrees: 40.0,
            horizontal_flip: true,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams {
            max_shift_fraction: 0.0,
            max_rotation_degrees: 0.0,
            horizontal_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.max_shift_fraction) {
            return Err(Error::Data(format!(
                "shift fraction {} outside [0, 1)",
                self.max_shift_fraction
            )));
        }
        if !(self.max_rotation_degrees >= 0.0 && self.max_rotation_degrees.is_finite()) {
            return Err(Error::Data(format!(
                "rotation range {} must be non-negative",
                self.max_rotation_degrees
            )));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTransform {
    pub shift_x: f64,
    pub shift_y: f64,
    pub angle_degrees: f64,
    pub flip: bool,
}

impl AugmentTransform {
    pub fn identity() -> Self {
        AugmentTransform {
            shift_x: 0.0,
            shift_y: 0.0,
            angle_degrees: 0.0,
            flip: false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(params: &AugmentParams, size: usize, rng: &mut R) -> Self {
        let max_shift = params.max_shift_fraction * size as f64;
        let mut uniform = |hi: f64| if hi > 0.0 { rng.random::<f64>() * hi } else { 0.0 };
        let shift_x = uniform(2.0 * max_shift) - max_shift;
        let shift_y = uniform(2.0 * max_shift) - max_shift;
        let angle_degrees = uniform(params.max_rotation_degrees);
        let flip = params.horizontal_flip && rng.random::<bool>();
        AugmentTransform {
            shift_x,
            shift_y,
            angle_degrees,
            flip,
        }
    }

    pub fn apply(&self, patch: &RoiPatch) -> RoiPatch {
        let s = patch.size;
        let c = (s as f64 - 1.0) / 2.0;
        let (sin, cos) = self.angle_degrees.to_radians().sin_cos();
        let mut out = patch.clone();
        for oy in 0..s {
            for ox in 0..s {
                // invert flip, then shift, then rotation
                let fx = if self.flip { (s - 1 - ox) as f64 } else { ox as f64 };
                let dx = fx - self.shift_x - c;
                let dy = oy as f64 - self.shift_y - c;
                let sx = cos * dx + sin * dy + c;
                let sy = -sin * dx + cos * dy + c;
                out.pixels[oy * s + ox] = bilinear(patch, sx, sy);
            }
        }
        out
    }
}

/// Bilinear sample with coordinates clamped to the patch (edge replication).
fn bilinear(patch: &RoiPatch, x: f64, y: f64) -> f64 {
    let max = (patch.size - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(patch.size - 1);
    let y1 = (y0 + 1).min(patch.size - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let top = patch.get(x0, y0) * (1.0 - tx) + patch.get(x1, y0) * tx;
    let bottom = patch.get(x0, y1) * (1.0 - tx) + patch.get(x1, y1) * tx;
    top * (1.0 - ty) + bottom * ty
}

pub fn augment<R: Rng + ?Sized>(patch: &RoiPatch, params: &AugmentParams, rng: &mut R) -> RoiPatch {
    AugmentTransform::sample(params, patch.size, rng).apply(patch)
}
