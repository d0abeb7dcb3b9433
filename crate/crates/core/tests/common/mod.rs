//! Checks shared by the acceptance gate and the integration tests. Each
//! returns a short summary on success and a description of the first
//! violation on failure.

#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transfer_lab::data::{
    augment, encode_pgm, gcn, parse_contours, parse_pgm, synth_target, AugmentParams, AugmentTransform,
    GrayImage, Label, RoiPatch, SynthSpec, GCN_EPSILON,
};
use transfer_lab::finetune::{apply_policy, train, FreezePolicy, OptimizerKind, TrainingProtocol};
use transfer_lab::gradcheck::grad_check;
use transfer_lab::harness::{run_experiment, ExperimentConfig};
use transfer_lab::metrics::{auc, roc_curve, ScoredPrediction};
use transfer_lab::nn::{build_mini_inception, LayerKind, ModelConfig, Phase};
use transfer_lab::optim::{fted_lr_map, Decision, LRMap, LayerLRSchedule, SgdMomentum, TrainingMonitor};
use transfer_lab::nn::Parameter;
use transfer_lab::{GradientMap, NodeId, Tape, Tensor};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a node to a scalar through a fixed random weighting so every
/// output element carries a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: NodeId, weights: &Tensor) -> transfer_lab::Result<NodeId> {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;

struct GradTally {
    worst: f64,
    checks: usize,
}

impl GradTally {
    fn record(&mut self, layer: &str, instance: usize, what: &str, r: transfer_lab::Result<transfer_lab::gradcheck::GradCheckReport>) -> Result<(), String> {
        let r = r.map_err(|e| format!("{layer} #{instance} ({what}): {e}"))?;
        ensure(r.checked > 0, || format!("{layer} #{instance} ({what}): every coordinate excluded"))?;
        ensure(r.max_rel_error < GRAD_TOL, || {
            format!("{layer} #{instance} ({what}): max rel error {:.3e}", r.max_rel_error)
        })?;
        self.worst = self.worst.max(r.max_rel_error);
        self.checks += 1;
        Ok(())
    }
}

fn grad_conv(rng: &mut ChaCha8Rng, tally: &mut GradTally, i: usize) -> Result<(), String> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let f = rng.random_range(1..=3);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=k / 2);
    let h = rng.random_range(k.max(3)..=6);
    let x = random_tensor(rng, &[n, c, h, h], 1.0);
    let w = random_tensor(rng, &[f, c, k, k], 1.0);
    let b = random_tensor(rng, &[f], 1.0);
    let oh = (h + 2 * padding - k) / stride + 1;
    let out_w = random_tensor(rng, &[n, f, oh, oh], 1.0);
    let (w1, b1, o1) = (w.clone(), b.clone(), out_w.clone());
    tally.record("conv2d", i, "input", grad_check(
        move |t, xi| {
            let wn = t.leaf(w1.clone());
            let bn = t.leaf(b1.clone());
            let y = t.conv2d(xi, wn, Some(bn), stride, padding)?;
            weighted_sum(t, y, &o1)
        },
        &x,
        GRAD_EPS,
    ))?;
    let (x1, b1, o1) = (x.clone(), b.clone(), out_w.clone());
    tally.record("conv2d", i, "kernel", grad_check(
        move |t, wi| {
            let xn = t.leaf(x1.clone());
            let bn = t.leaf(b1.clone());
            let y = t.conv2d(xn, wi, Some(bn), stride, padding)?;
            weighted_sum(t, y, &o1)
        },
        &w,
        GRAD_EPS,
    ))?;
    tally.record("conv2d", i, "bias", grad_check(
        move |t, bi| {
            let xn = t.leaf(x.clone());
            let wn = t.leaf(w.clone());
            let y = t.conv2d(xn, wn, Some(bi), stride, padding)?;
            weighted_sum(t, y, &out_w)
        },
        &b,
        GRAD_EPS,
    ))
}

fn grad_dense(rng: &mut ChaCha8Rng, tally: &mut GradTally, i: usize) -> Result<(), String> {
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=6);
    let m = rng.random_range(1..=5);
    let x = random_tensor(rng, &[n, d], 1.0);
    let w = random_tensor(rng, &[d, m], 1.0);
    let b = random_tensor(rng, &[m], 1.0);
    let o = random_tensor(rng, &[n, m], 1.0);
    let (w1, b1, o1) = (w.clone(), b.clone(), o.clone());
    tally.record("dense", i, "input", grad_check(
        move |t, xi| {
            let (wn, bn) = (t.leaf(w1.clone()), t.leaf(b1.clone()));
            let y = t.dense(xi, wn, bn)?;
            weighted_sum(t, y, &o1)
        },
        &x,
        GRAD_EPS,
    ))?;
    let (x1, b1, o1) = (x.clone(), b.clone(), o.clone());
    tally.record("dense", i, "weight", grad_check(
        move |t, wi| {
            let (xn, bn) = (t.leaf(x1.clone()), t.leaf(b1.clone()));
            let y = t.dense(xn, wi, bn)?;
            weighted_sum(t, y, &o1)
        },
        &w,
        GRAD_EPS,
    ))?;
    tally.record("dense", i, "bias", grad_check(
        move |t, bi| {
            let (xn, wn) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let y = t.dense(xn, wn, bi)?;
            weighted_sum(t, y, &o)
        },
        &b,
        GRAD_EPS,
    ))
}

fn grad_batchnorm(rng: &mut ChaCha8Rng, tally: &mut GradTally, i: usize) -> Result<(), String> {
    let n = rng.random_range(2..=4);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(1..=3);
    let x = random_tensor(rng, &[n, c, h, h], 2.0);
    let gamma = random_tensor(rng, &[c], 1.5);
    let beta = random_tensor(rng, &[c], 1.0);
    let o = random_tensor(rng, &[n, c, h, h], 1.0);
    let (g1, b1, o1) = (gamma.clone(), beta.clone(), o.clone());
    tally.record("batchnorm-train", i, "input", grad_check(
        move |t, xi| {
            let (g, b) = (t.leaf(g1.clone()), t.leaf(b1.clone()));
            let (y, _) = t.batchnorm_train(xi, g, b, 1e-5)?;
            weighted_sum(t, y, &o1)
        },
        &x,
        GRAD_EPS,
    ))?;
    let (x1, b1, o1) = (x.clone(), beta.clone(), o.clone());
    tally.record("batchnorm-train", i, "gamma", grad_check(
        move |t, gi| {
            let (xn, b) = (t.leaf(x1.clone()), t.leaf(b1.clone()));
            let (y, _) = t.batchnorm_train(xn, gi, b, 1e-5)?;
            weighted_sum(t, y, &o1)
        },
        &gamma,
        GRAD_EPS,
    ))?;
    tally.record("batchnorm-train", i, "beta", grad_check(
        move |t, bi| {
            let (xn, g) = (t.leaf(x.clone()), t.leaf(gamma.clone()));
            let (y, _) = t.batchnorm_train(xn, g, bi, 1e-5)?;
            weighted_sum(t, y, &o)
        },
        &beta,
        GRAD_EPS,
    ))
}

fn grad_inception(rng: &mut ChaCha8Rng, tally: &mut GradTally, i: usize) -> Result<(), String> {
    let config = ModelConfig {
        input_size: 8,
        stem_channels: vec![2],
        stem_pools: 0,
        inception_blocks: 1,
        block_channels: 4,
        block_reduce: 2,
        head_hidden: 4,
        ..ModelConfig::default()
    };
    let mut model = build_mini_inception(&config, rng.random()).map_err(|e| e.to_string())?;
    for p in &mut model.params {
        if p.name.contains(".bn.") {
            let shape = p.value.shape().to_vec();
            p.value = random_tensor(rng, &shape, 1.0).map(|v| v + 1.5 * v.signum());
        }
    }
    let block = model
        .layers
        .iter()
        .find_map(|l| match &l.kind {
            LayerKind::InceptionBlock(b) => Some(b.clone()),
            _ => None,
        })
        .ok_or("model has no inception block")?;
    let n = 2;
    let h = rng.random_range(3..=4);
    let x = random_tensor(rng, &[n, 2, h, h], 1.0);
    let o = random_tensor(rng, &[n, block.out_channels(), h, h], 1.0);
    let record = |t: &mut Tape, params: &[Parameter], probe: Option<(usize, NodeId)>, xn: NodeId| {
        let nodes: Vec<NodeId> = params
            .iter()
            .enumerate()
            .map(|(j, p)| match probe {
                Some((pj, node)) if pj == j => node,
                _ => t.leaf(p.value.clone()),
            })
            .collect();
        block.record(t, &nodes, &model.bn, Phase::Train, xn).map(|r| r.0)
    };
    tally.record("inception block", i, "input", grad_check(
        |t, xi| {
            let y = record(t, &model.params, None, xi)?;
            weighted_sum(t, y, &o)
        },
        &x,
        GRAD_EPS,
    ))?;
    let weights: Vec<usize> = block
        .convs()
        .iter()
        .map(|c| c.weight)
        .collect();
    let pick = weights[rng.random_range(0..weights.len())];
    tally.record("inception block", i, &model.params[pick].name.clone(), grad_check(
        |t, wi| {
            let xn = t.leaf(x.clone());
            let y = record(t, &model.params, Some((pick, wi)), xn)?;
            weighted_sum(t, y, &o)
        },
        &model.params[pick].value,
        GRAD_EPS,
    ))
}

fn grad_softmax_ce(rng: &mut ChaCha8Rng, tally: &mut GradTally, i: usize) -> Result<(), String> {
    let n = rng.random_range(1..=5);
    let k = rng.random_range(2..=4);
    let logits = random_tensor(rng, &[n, k], 3.0);
    let mut onehot = vec![0.0; n * k];
    for r in 0..n {
        onehot[r * k + rng.random_range(0..k)] = 1.0;
    }
    let labels = Tensor::new(vec![n, k], onehot).unwrap();
    let l1 = labels.clone();
    tally.record("softmax-cross-entropy", i, "logits", grad_check(
        move |t, zi| t.softmax_cross_entropy(zi, &l1).map(|r| r.0),
        &logits,
        GRAD_EPS,
    ))?;
    let d = rng.random_range(1..=4);
    let x = random_tensor(rng, &[n, d], 1.0);
    let w = random_tensor(rng, &[d, k], 1.0);
    let b = random_tensor(rng, &[k], 0.5);
    tally.record("softmax-cross-entropy", i, "dense weight", grad_check(
        move |t, wi| {
            let (xn, bn) = (t.leaf(x.clone()), t.leaf(b.clone()));
            let z = t.dense(xn, wi, bn)?;
            t.softmax_cross_entropy(z, &labels).map(|r| r.0)
        },
        &w,
        GRAD_EPS,
    ))
}

/// Analytic against central-difference gradients for each layer type.
pub fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut tally = GradTally { worst: 0.0, checks: 0 };
    type Case = fn(&mut ChaCha8Rng, &mut GradTally, usize) -> Result<(), String>;
    let cases: [Case; 5] = [grad_conv, grad_dense, grad_batchnorm, grad_inception, grad_softmax_ce];
    for case in cases {
        for i in 0..GRAD_INSTANCES {
            case(&mut rng, &mut tally, i)?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} checks over 5 layer types x {GRAD_INSTANCES} instances, worst rel error {:.2e}, {secs:.1}s",
        tally.checks, tally.worst
    ))
}

/// Per-layer rates against the closed form over a 10-layer range.
pub fn fted_schedule() -> Check {
    let schedule = LayerLRSchedule::new(1e-3, -3.0);
    let depths: Vec<usize> = (0..10).collect();
    let max_depth = 9;
    let map = fted_lr_map(&schedule, &depths, max_depth).map_err(|e| e.to_string())?;
    for &l in &depths {
        let d = (max_depth - l) as f64 / max_depth as f64;
        let expected = 1e-3 * (-3.0 * d).exp();
        let got = map.rate(l).ok_or(format!("no rate for depth {l}"))?;
        ensure((got - expected).abs() <= 1e-12, || {
            format!("depth {l}: {got:e} vs closed form {expected:e}")
        })?;
    }
    let last = map.rate(max_depth).unwrap();
    ensure(last == 1e-3, || format!("output layer rate {last:e} is not exactly 1e-3"))?;
    let rates: Vec<f64> = map.iter().map(|(_, r)| r).collect();
    let max = rates.iter().cloned().fold(f64::MIN, f64::max);
    let min = rates.iter().cloned().fold(f64::MAX, f64::min);
    let ratio = max / min;
    ensure((ratio - 3f64.exp()).abs() <= 1e-12 * 3f64.exp(), || {
        format!("max/min ratio {ratio} vs e^3 {}", 3f64.exp())
    })?;
    Ok(format!("10 rates match, ratio {ratio:.15}"))
}

/// Scalar trajectories of the optimizer against a hand-written recurrence.
pub fn sgd_momentum_recurrence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for draw in 0..50 {
        let mu: f64 = rng.random_range(0.0..0.99);
        let lr: f64 = 10f64.powf(rng.random_range(-5.0..-1.0));
        let x0: f64 = rng.random_range(-2.0..2.0);
        let gs: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut params = vec![Parameter {
            name: "x".into(),
            value: Tensor::from_vec(vec![x0]),
            depth: 0,
        }];
        let mut opt = SgdMomentum::new(mu, &params).map_err(|e| e.to_string())?;
        let map = LRMap::uniform(lr, &[0]).unwrap();
        let (mut x, mut v) = (x0, 0.0);
        for (step, &g) in gs.iter().enumerate() {
            let mut grads = GradientMap::default();
            grads.insert(0, Tensor::from_vec(vec![g]));
            opt.step(&mut params, &grads, &map, &[true]).map_err(|e| e.to_string())?;
            v = mu * v - lr * g;
            x += v;
            let got = params[0].value.data()[0];
            let err = (got - x).abs();
            worst = worst.max(err);
            ensure(err <= 1e-12, || {
                format!("draw {draw} step {step}: {got} vs reference {x}")
            })?;
        }
    }
    Ok(format!("50 trajectories x 100 steps, worst abs error {worst:.1e}"))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        stem_channels: vec![4, 8],
        stem_pools: 2,
        inception_blocks: 3,
        block_channels: 8,
        block_reduce: 4,
        head_hidden: 8,
        ..ModelConfig::default()
    }
}

fn tiny_dataset(n: usize, seed: u64) -> Vec<RoiPatch> {
    let spec = SynthSpec {
        patch_size: 16,
        target_count: n,
        ..SynthSpec::default()
    };
    synth_target(&spec, seed)
}

/// Frozen parameters and frozen BN statistics survive training bit for bit;
/// trainable sets nest.
pub fn freeze_contract() -> Check {
    let model = build_mini_inception(&tiny_model_config(), 41).map_err(|e| e.to_string())?;
    let data = tiny_dataset(20, 42);
    let (train_set, val_set) = data.split_at(16);
    let schedule = LayerLRSchedule::new(1e-3, -3.0);
    let protocol = TrainingProtocol {
        epochs: 25,
        batch_size: 4,
        optimizer: OptimizerKind::SgdMomentum { mu: 0.9 },
        patience: 1000,
        plateau_patience: 1000,
        plateau_divisor: 10.0,
        augment: AugmentParams::default(),
    };
    let steps = protocol.epochs * train_set.len().div_ceil(protocol.batch_size);
    ensure(steps == 100, || format!("protocol gives {steps} steps"))?;
    let mut frozen_checked = 0;
    for policy in [FreezePolicy::FE, FreezePolicy::NFT(1), FreezePolicy::NFT(2)] {
        let plan = apply_policy(&model, policy, 1e-2, &schedule).map_err(|e| e.to_string())?;
        let out = train(model.clone(), &plan, train_set, val_set, &protocol, 7).map_err(|e| e.to_string())?;
        ensure(out.history.epochs.len() == protocol.epochs, || format!("{policy} stopped early"))?;
        let mut changed = 0;
        for (i, (before, after)) in model.params.iter().zip(&out.model.params).enumerate() {
            if plan.trainable[i] {
                changed += usize::from(!before.value.bit_eq(&after.value));
            } else {
                ensure(before.value.bit_eq(&after.value), || {
                    format!("{policy}: frozen parameter {} changed", before.name)
                })?;
                frozen_checked += 1;
            }
        }
        ensure(changed > 0, || format!("{policy}: no trainable parameter moved"))?;
        for (before, after) in model.bn.iter().zip(&out.model.bn) {
            if !plan.trainable[before.gamma] {
                let same = before.running_mean.iter().zip(&after.running_mean).all(|(a, b)| a.to_bits() == b.to_bits())
                    && before.running_var.iter().zip(&after.running_var).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || {
                    format!("{policy}: running stats of {} changed", model.params[before.gamma].name)
                })?;
            }
        }
    }
    let sets: Vec<Vec<bool>> = [
        FreezePolicy::FE,
        FreezePolicy::NFT(1),
        FreezePolicy::NFT(2),
        FreezePolicy::NFT(3),
        FreezePolicy::AllFT,
    ]
    .iter()
    .map(|&p| apply_policy(&model, p, 1e-2, &schedule).unwrap().trainable)
    .collect();
    for w in sets.windows(2) {
        let subset = w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b);
        ensure(subset, || "trainable sets do not nest".to_string())?;
    }
    for k in 0..3 {
        ensure(sets[k] != sets[k + 1], || format!("nesting step {k} is not strict"))?;
    }
    ensure(sets[3] == sets[4], || "3FT differs from AllFT".to_string())?;
    Ok(format!(
        "100 steps each under FE, 1FT, 2FT; {frozen_checked} frozen tensors unchanged; FE < 1FT < 2FT < 3FT = AllFT"
    ))
}

/// Normalized patches have zero mean and unit deviation.
pub fn gcn_moments() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let s = rng.random_range(2..=32);
        let offset = rng.random_range(-100.0..100.0);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let pixels = (0..s * s).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
        let p = RoiPatch::new(s, pixels, Label::Benign, "p").unwrap();
        let g = gcn(&p, GCN_EPSILON);
        let (m, sd) = (g.mean(), g.std());
        worst_mean = worst_mean.max(m.abs());
        worst_std = worst_std.max((sd - 1.0).abs());
        ensure(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9, || {
            format!("patch {i}: mean {m:e}, std {sd}")
        })?;
    }
    let flat = RoiPatch::new(8, vec![0.7; 64], Label::Malignant, "c").unwrap();
    ensure(gcn(&flat, GCN_EPSILON).pixels.iter().all(|&v| v == 0.0), || {
        "constant patch does not map to zeros".into()
    })?;
    Ok(format!("1000 patches, worst |mean| {worst_mean:.1e}, worst |std-1| {worst_std:.1e}"))
}

fn blob(size: usize) -> RoiPatch {
    let c = (size as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            pixels.push((-r2 / 2.0).exp());
        }
    }
    RoiPatch::new(size, pixels, Label::Benign, "blob").unwrap()
}

fn centroid(p: &RoiPatch) -> (f64, f64) {
    let (mut sx, mut sy, mut w) = (0.0, 0.0, 0.0);
    for y in 0..p.size {
        for x in 0..p.size {
            let v = p.get(x, y);
            sx += v * x as f64;
            sy += v * y as f64;
            w += v;
        }
    }
    (sx / w, sy / w)
}

/// Sampled transforms stay in range and move content by what they report.
pub fn augmentation_bounds() -> Check {
    const S: usize = 32;
    let params = AugmentParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let limit = 0.25 * S as f64;
    let base = blob(S);
    let (c0x, c0y) = centroid(&base);
    let mut flips = 0usize;
    let mut max_observed = 0.0f64;
    let n = 10_000;
    for i in 0..n {
        let t = AugmentTransform::sample(&params, S, &mut rng);
        ensure(t.shift_x.abs() <= limit && t.shift_y.abs() <= limit, || {
            format!("sample {i}: shift ({}, {}) beyond {limit}", t.shift_x, t.shift_y)
        })?;
        ensure((0.0..=40.0).contains(&t.angle_degrees), || {
            format!("sample {i}: rotation {} outside [0, 40]", t.angle_degrees)
        })?;
        flips += usize::from(t.flip);
        if i % 50 == 0 {
            let (cx, cy) = centroid(&t.apply(&base));
            let dx = if t.flip { c0x - cx } else { cx - c0x };
            let dy = cy - c0y;
            max_observed = max_observed.max(dx.abs()).max(dy.abs());
            ensure(dx.abs() <= limit + 0.05 && dy.abs() <= limit + 0.05, || {
                format!("sample {i}: observed shift ({dx:.3}, {dy:.3}) beyond {limit}")
            })?;
            ensure((dx - t.shift_x).abs() < 0.05 && (dy - t.shift_y).abs() < 0.05, || {
                format!(
                    "sample {i}: observed shift ({dx:.3}, {dy:.3}) vs sampled ({:.3}, {:.3})",
                    t.shift_x, t.shift_y
                )
            })?;
        }
    }
    let rate = flips as f64 / n as f64;
    let sigma = (0.25 / n as f64).sqrt();
    ensure((rate - 0.5).abs() <= 3.0 * sigma, || format!("flip rate {rate} beyond 3 sigma"))?;
    let none = AugmentParams::none();
    for _ in 0..100 {
        let pixels = (0..S * S).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = RoiPatch::new(S, pixels, Label::Malignant, "r").unwrap();
        let out = augment(&p, &none, &mut rng);
        let err = p.pixels.iter().zip(&out.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-12, || format!("null augmentation changed a pixel by {err:e}"))?;
    }
    Ok(format!(
        "10^4 samples in bounds, max observed shift {max_observed:.2} px (limit {limit}), flip rate {rate:.4}"
    ))
}

fn pair_count(preds: &[ScoredPrediction]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for a in preds.iter().filter(|p| p.label == Label::Malignant) {
        for b in preds.iter().filter(|p| p.label == Label::Benign) {
            pairs += 1.0;
            wins += if a.score > b.score {
                1.0
            } else if a.score == b.score {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Trapezoidal AUC against the pair-counting statistic, with ties.
pub fn auc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    let mut sets = 0;
    while sets < 200 {
        let n = rng.random_range(2..=500);
        let levels = rng.random_range(2..=50);
        let preds: Vec<ScoredPrediction> = (0..n)
            .map(|_| {
                let label = if rng.random::<bool>() { Label::Malignant } else { Label::Benign };
                let score = rng.random_range(0..levels) as f64 / (levels - 1) as f64;
                ScoredPrediction::new(score, label).unwrap()
            })
            .collect();
        if !preds.iter().any(|p| p.label == Label::Malignant) || !preds.iter().any(|p| p.label == Label::Benign) {
            continue;
        }
        let a = auc(&roc_curve(&preds).map_err(|e| e.to_string())?);
        let b = pair_count(&preds);
        worst = worst.max((a - b).abs());
        ensure((a - b).abs() <= 1e-12, || format!("set {sets} (n = {n}): trapezoid {a} vs pairs {b}"))?;
        sets += 1;
    }
    Ok(format!("200 sets, worst difference {worst:.1e}"))
}

/// Stop fires exactly `patience` epochs after the best; `p` plateaus leave a
/// scale of exactly `10^-p`.
pub fn early_stopping_and_plateau() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..100 {
        let best = rng.random_range(0..30);
        let mut monitor = TrainingMonitor::new(15, 5, 10.0).unwrap();
        let mut map = LRMap::uniform(1e-4, &[0]).unwrap();
        let mut loss = 10.0;
        let mut stopped = None;
        for epoch in 0..200 {
            let value = if epoch <= best {
                loss -= rng.random_range(0.01..1.0);
                loss
            } else {
                loss + rng.random_range(0.0..5.0)
            };
            if monitor.observe(value, &mut map) == Decision::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        ensure(stopped == Some(best + 15), || {
            format!("case {case}: best at epoch {best}, stop at {stopped:?}")
        })?;
    }
    for p in 0..=6 {
        let mut monitor = TrainingMonitor::new(1000, 5, 10.0).unwrap();
        let mut map = LRMap::uniform(1e-4, &[0]).unwrap();
        let mut loss = 100.0;
        for _ in 0..p {
            loss -= 1.0;
            monitor.observe(loss, &mut map);
            for _ in 0..5 {
                monitor.observe(loss, &mut map);
            }
        }
        let expected: f64 = format!("1e-{p}").parse().unwrap();
        ensure(monitor.plateaus == p as u32 && map.global_scale == expected, || {
            format!("{p} plateaus gave scale {:e} after {} divisions", map.global_scale, monitor.plateaus)
        })?;
    }
    Ok("100 loss sequences stop at best + 15; scales 10^0 .. 10^-6 exact".into())
}

pub fn ordering_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        runs: 5,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.apply_desk();
    c
}

/// The full variant matrix at desk scale, checked for the expected ordering.
pub fn transfer_ordering(out: &Path) -> Check {
    let start = Instant::now();
    let config = ordering_config(out);
    let table = run_experiment(&config).map_err(|e| e.to_string())?;
    ensure(table.failed_runs() == 0, || format!("{} runs failed", table.failed_runs()))?;
    let acc = |v: FreezePolicy| table.row(v).map(|r| r.mean_acc).unwrap_or(f64::NAN);
    let ri = acc(FreezePolicy::RI);
    let fe = acc(FreezePolicy::FE);
    let fted = acc(FreezePolicy::FTED);
    let best_nft = [1, 2, 3].map(|n| acc(FreezePolicy::NFT(n))).into_iter().fold(f64::MIN, f64::max);
    let best = table.rows.iter().map(|r| r.mean_acc).fold(f64::MIN, f64::max);
    let summary = table
        .rows
        .iter()
        .map(|r| format!("{} {:.2}", r.variant, r.mean_acc))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!("{summary}; {:.0}s", start.elapsed().as_secs_f64());
    ensure(fe >= ri + 5.0, || format!("FE does not beat RI by 5 points: {detail}"))?;
    ensure(best_nft >= fe, || format!("no nFT variant reaches FE: {detail}"))?;
    ensure(fted >= fe, || format!("FTED below FE: {detail}"))?;
    ensure(fted >= best - 2.0, || format!("FTED more than 2 points below the best: {detail}"))?;
    Ok(detail)
}

pub fn determinism_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        runs: 2,
        epochs: 2,
        batch_size: 16,
        seed: 11,
        variants: vec![FreezePolicy::RI, FreezePolicy::FE, FreezePolicy::NFT(2), FreezePolicy::FTED],
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.synth.source_count = 120;
    c.synth.target_count = 60;
    c.pretrain.epochs = 2;
    c
}

/// Every file a run writes, except wall-clock timing, compared byte for byte.
pub fn determinism(a: &Path, b: &Path) -> Check {
    for dir in [a, b] {
        run_experiment(&determinism_config(dir)).map_err(|e| e.to_string())?;
    }
    let mut compared = 0;
    let mut names: Vec<String> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names.iter().filter(|n| {
        n.as_str() == "results.csv" || n.ends_with(".ckpt") || n.starts_with("history_") || n.starts_with("scores_") || n.starts_with("roc_")
    }) {
        let x = fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs between runs"))?;
        compared += 1;
    }
    ensure(names.iter().any(|n| n == "results.csv"), || "results.csv missing".into())?;
    Ok(format!("{compared} files byte-identical across two runs"))
}

/// PGM encode/decode identity and line-accurate contour errors.
pub fn parser_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    for i in 0..50 {
        let w = rng.random_range(1..=64);
        let h = rng.random_range(1..=64);
        let pixels = (0..w * h).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect();
        let img = GrayImage::new(w, h, pixels).unwrap();
        let bytes = encode_pgm(&img);
        let back = parse_pgm(&bytes).map_err(|e| format!("image {i}: {e}"))?;
        ensure(back == img, || format!("image {i} ({w}x{h}) did not round-trip"))?;
        ensure(encode_pgm(&back) == bytes, || format!("image {i}: re-encoding differs"))?;
    }
    let good = "a,benign,0:0;4:0;2:3";
    let malformed = [
        "b,malignant",
        "c,unknown,0:0;1:1;2:2",
        "d,benign,0:0;1-1;2:2",
        "e,benign,0:0;1:1",
        ",benign,0:0;1:1;2:2",
        "f,benign,0:0;x:1;2:2",
    ];
    for (k, bad) in malformed.iter().enumerate() {
        let line = 2 + k % 3 + 1;
        let mut rows = vec!["image_id,label,points".to_string()];
        while rows.len() < line - 1 {
            rows.push(format!("{good}{}", rows.len()));
        }
        rows.push(bad.to_string());
        rows.push(good.to_string());
        let text = rows.join("\n");
        match parse_contours(&text) {
            Err(transfer_lab::Error::Csv { line: got, .. }) => {
                ensure(got == line, || format!("{bad:?} reported at line {got}, expected {line}"))?
            }
            other => return Err(format!("{bad:?} was not rejected: {other:?}")),
        }
    }
    match parse_contours("id,label,pts\n") {
        Err(transfer_lab::Error::Csv { line: 1, .. }) => {}
        other => return Err(format!("bad header not rejected at line 1: {other:?}")),
    }
    Ok("50 PGM round trips; 7 malformed contour inputs rejected at the right line".into())
}
