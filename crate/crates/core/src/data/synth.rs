//! Synthetic source/target transfer benchmark.
//!
//! Each sample is a textured blob on a textured, noisy background. Benign
//! blobs have smooth, gently lobulated outlines; malignant blobs carry sharp
//! spicules along the outline. The source and target domains share this
//! generative family but differ in blob eccentricity, spicule shape, and
//! texture frequency, so features learned on the source transfer without
//! being identical.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::contours::Label;
use super::roi::{gcn, RoiPatch, GCN_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainParams {
    /// Background and interior texture frequency, in cycles per pixel.
    pub texture_freq: f64,
    /// Ratio of the blob's long to short axis.
    pub eccentricity: f64,
    /// Range of the number of spicules on malignant outlines.
    pub spicules: (u32, u32),
    /// Range of relative spicule length.
    pub spicule_amp: (f64, f64),
    /// Blob radius range as a fraction of the patch size.
    pub radius: (f64, f64),
    /// Contrast of the blob over the background.
    pub contrast: f64,
    /// Standard deviation of the additive blurred noise.
    pub noise: f64,
}

impl DomainParams {
    pub fn source() -> Self {
        DomainParams {
            texture_freq: 0.12,
            eccentricity: 1.0,
            spicules: (5, 9),
            spicule_amp: (0.35, 0.8),
            radius: (0.14, 0.22),
            contrast: 1.0,
            noise: 0.25,
        }
    }

    pub fn target() -> Self {
        DomainParams {
            texture_freq: 0.2,
            eccentricity: 1.5,
            spicules: (5, 9),
            spicule_amp: (0.45, 0.9),
            radius: (0.14, 0.21),
            contrast: 0.9,
            noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub patch_size: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub source: DomainParams,
    pub target: DomainParams,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            patch_size: 32,
            source_count: 5000,
            target_count: 600,
            source: DomainParams::source(),
            target: DomainParams::target(),
        }
    }
}

/// Generates the `(source, target)` datasets. Both are class-balanced
/// (alternating labels) and contrast-normalized.
pub fn synth_benchmark(spec: &SynthSpec, seed: u64) -> (Vec<RoiPatch>, Vec<RoiPatch>) {
    (synth_source(spec, seed), synth_target(spec, seed))
}

/// The source half of [`synth_benchmark`], drawn from its own stream.
pub fn synth_source(spec: &SynthSpec, seed: u64) -> Vec<RoiPatch> {
    let mut rng = stream(seed, 0);
    generate(&spec.source, spec.patch_size, spec.source_count, "src", &mut rng)
}

/// The target half of [`synth_benchmark`], drawn from its own stream.
pub fn synth_target(spec: &SynthSpec, seed: u64) -> Vec<RoiPatch> {
    let mut rng = stream(seed, 1);
    generate(&spec.target, spec.patch_size, spec.target_count, "tgt", &mut rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn generate(
    params: &DomainParams,
    size: usize,
    count: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Vec<RoiPatch> {
    (0..count)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
            let pixels = render(params, size, label, rng);
            let patch = RoiPatch::new(size, pixels, label, format!("{prefix}{i:05}"))
                .expect("rendered patch has size^2 pixels");
            gcn(&patch, GCN_EPSILON)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn render(p: &DomainParams, size: usize, label: Label, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let jitter = 0.08 * s;
    let cx = (s - 1.0) / 2.0 + uniform(rng, -jitter, jitter);
    let cy = (s - 1.0) / 2.0 + uniform(rng, -jitter, jitter);
    let r0 = s * uniform(rng, p.radius.0, p.radius.1);
    let orient = uniform(rng, 0.0, PI);
    let q = p.eccentricity.max(1.0).sqrt();
    let (a, b) = (r0 * q, r0 / q);

    // outline modulation: sharp spikes for malignant, gentle lobes for benign
    let (lobes, amp, sharp) = match label {
        Label::Malignant => (
            rng.random_range(p.spicules.0..=p.spicules.1) as f64,
            uniform(rng, p.spicule_amp.0, p.spicule_amp.1),
            4,
        ),
        Label::Benign => (rng.random_range(2..=3) as f64, uniform(rng, 0.0, 0.1), 1),
    };
    let phase = uniform(rng, 0.0, 2.0 * PI);

    let tex_angle = uniform(rng, 0.0, PI);
    let tex_phase = uniform(rng, 0.0, 2.0 * PI);
    let tex_freq = p.texture_freq * uniform(rng, 0.85, 1.15);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let ang = uniform(rng, 0.0, PI);
            let f = p.texture_freq * uniform(rng, 0.3, 0.6);
            (ang.cos() * f, ang.sin() * f, uniform(rng, 0.0, 2.0 * PI), uniform(rng, 0.04, 0.1))
        })
        .collect();
    let contrast = p.contrast * uniform(rng, 0.8, 1.2);
    let noise = smooth_noise(size, p.noise, rng);

    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let dx = xf - cx;
            let dy = yf - cy;
            let phi = dy.atan2(dx);
            let rel = phi - orient;
            let ell = a * b / ((b * rel.cos()).powi(2) + (a * rel.sin()).powi(2)).sqrt();
            let wave = 0.5 * (1.0 + (lobes * phi + phase).cos());
            let radius = ell * (1.0 + amp * wave.powi(sharp));
            let rho = (dx * dx + dy * dy).sqrt();
            let inside = 1.0 / (1.0 + ((rho - radius) / 1.0).exp());

            let t = 2.0 * PI * tex_freq * (xf * tex_angle.cos() + yf * tex_angle.sin()) + tex_phase;
            let interior = 1.0 + 0.3 * t.sin();
            let background: f64 = gratings
                .iter()
                .map(|(fx, fy, ph, amp)| amp * (2.0 * PI * (fx * xf + fy * yf) + ph).sin())
                .sum();
            out.push(contrast * inside * interior + background + noise[y * size + x]);
        }
    }
    out
}

/// White noise blurred by a Gaussian kernel of width `NOISE_BLUR` pixels and
/// rescaled to standard deviation `sigma`. Band-limited content keeps its
/// statistics under bilinear resampling.
fn smooth_noise(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const NOISE_BLUR: f64 = 1.2;
    let radius = 3isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * NOISE_BLUR * NOISE_BLUR)).exp())
        .collect();
    let white: Vec<f64> = (0..size * size)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                out[y * size + x] = kernel
                    .iter()
                    .zip(-radius..=radius)
                    .map(|(k, d)| {
                        let (sx, sy) = if horizontal {
                            (clamp(x as isize + d), y)
                        } else {
                            (x, clamp(y as isize + d))
                        };
                        k * src[sy * size + sx]
                    })
                    .sum();
            }
        }
        out
    };
    let field = blur(&blur(&white, true), false);
    let std = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    field.into_iter().map(|v| v / std * sigma).collect()
}
