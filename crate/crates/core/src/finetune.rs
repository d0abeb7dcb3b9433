//! Freeze policies, weight transfer and the training loop.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{augment, to_batch, AugmentParams, Label, RoiPatch};
use crate::error::{Error, Result};
use crate::metrics::ScoredPrediction;
use crate::nn::{BnMode, LayerKind, Model, Phase};
use crate::optim::{fted_lr_map, Adam, Decision, LRMap, LayerLRSchedule, SgdMomentum, TrainingMonitor};
use crate::tensor::Tensor;

/// Which layers train, and with what rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FreezePolicy {
    /// Random initialization; no transfer, everything trains.
    RI,
    /// Feature extraction; only the head trains.
    FE,
    /// The last `n` Inception blocks plus the head train.
    NFT(usize),
    AllFT,
    /// All layers train with the exponentially decaying per-layer map.
    FTED,
}

impl FreezePolicy {
    /// The seven variants of the standard experiment matrix.
    pub const MATRIX: [FreezePolicy; 7] = [
        FreezePolicy::RI,
        FreezePolicy::FE,
        FreezePolicy::NFT(1),
        FreezePolicy::NFT(2),
        FreezePolicy::NFT(3),
        FreezePolicy::AllFT,
        FreezePolicy::FTED,
    ];

    pub fn uses_transfer(self) -> bool {
        self != FreezePolicy::RI
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezePolicy::RI => f.write_str("RI"),
            FreezePolicy::FE => f.write_str("FE"),
            FreezePolicy::NFT(n) => write!(f, "{n}FT"),
            FreezePolicy::AllFT => f.write_str("AllFT"),
            FreezePolicy::FTED => f.write_str("FTED"),
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let parsed = match t.to_ascii_uppercase().as_str() {
            "RI" => Some(FreezePolicy::RI),
            "FE" => Some(FreezePolicy::FE),
            "ALLFT" => Some(FreezePolicy::AllFT),
            "FTED" => Some(FreezePolicy::FTED),
            u => u
                .strip_suffix("FT")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .map(FreezePolicy::NFT),
        };
        parsed.ok_or_else(|| Error::Config(format!("unknown variant {t:?}")))
    }
}

/// Per-parameter trainable flags, per-BN-layer modes and the rate map.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainablePlan {
    pub policy: FreezePolicy,
    pub trainable: Vec<bool>,
    pub bn_modes: Vec<BnMode>,
    pub lr_map: LRMap,
}

impl TrainablePlan {
    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.trainable.len()).filter(|&i| self.trainable[i]).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

/// Builds the plan for `policy`. FTED takes its map from `schedule`; every
/// other policy uses `base_lr` for all layers.
pub fn apply_policy(
    model: &Model,
    policy: FreezePolicy,
    base_lr: f64,
    schedule: &LayerLRSchedule,
) -> Result<TrainablePlan> {
    let depths = model.depths();
    let blocks = model.block_boundaries.len();
    let first_trainable = match policy {
        FreezePolicy::RI | FreezePolicy::AllFT | FreezePolicy::FTED => 0,
        FreezePolicy::FE => model.head_start,
        FreezePolicy::NFT(n) if n == 0 || n > blocks => {
            return Err(Error::Config(format!(
                "{policy} needs 1..={blocks} blocks, model has {blocks}"
            )))
        }
        FreezePolicy::NFT(n) if n == blocks => 0,
        FreezePolicy::NFT(n) => model.block_boundaries[blocks - n - 1] + 1,
    };
    let trainable: Vec<bool> = model.params.iter().map(|p| p.depth >= first_trainable).collect();
    let bn_modes = model
        .bn
        .iter()
        .map(|bn| if trainable[bn.gamma] { BnMode::Train } else { BnMode::Infer })
        .collect();
    let lr_map = match policy {
        FreezePolicy::FTED => fted_lr_map(schedule, &depths, model.max_depth())?,
        _ => LRMap::uniform(base_lr, &depths)?,
    };
    Ok(TrainablePlan {
        policy,
        trainable,
        bn_modes,
        lr_map,
    })
}

/// Copies every pre-head parameter and batch-norm running statistic from
/// `source` into `target`. The head of `target` is kept as initialized.
pub fn transfer_weights(source: &Model, target: &Model) -> Result<Model> {
    let pre_head = |m: &Model| -> Vec<usize> {
        let end = m
            .layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Flatten))
            .unwrap_or(m.layers.len());
        (0..end).collect()
    };
    let (src_layers, dst_layers) = (pre_head(source), pre_head(target));
    for i in 0..src_layers.len().max(dst_layers.len()) {
        let (s, d) = (source.layers.get(i), target.layers.get(i));
        let fail = |layer: &str, detail: String| {
            Err(Error::Transfer {
                layer: layer.to_string(),
                detail,
            })
        };
        match (s.filter(|_| i < src_layers.len()), d.filter(|_| i < dst_layers.len())) {
            (Some(s), None) => return fail(&s.name, "missing in target".into()),
            (None, Some(d)) => return fail(&d.name, "missing in source".into()),
            (Some(s), Some(d)) => {
                if s.name != d.name || s.kind.name() != d.kind.name() || s.depth_index != d.depth_index {
                    return fail(
                        &s.name,
                        format!(
                            "source {} {} at depth {} vs target {} {} at depth {}",
                            s.name,
                            s.kind.name(),
                            s.depth_index,
                            d.name,
                            d.kind.name(),
                            d.depth_index
                        ),
                    );
                }
            }
            (None, None) => unreachable!("index below the longer manifest"),
        }
    }
    let mut out = target.clone();
    for (i, p) in source.params.iter().enumerate().filter(|(_, p)| p.depth < source.head_start) {
        let Some(q) = out.params.get_mut(i) else {
            return Err(Error::Transfer {
                layer: p.name.clone(),
                detail: "missing in target".into(),
            });
        };
        if q.name != p.name || q.value.shape() != p.value.shape() || q.depth != p.depth {
            return Err(Error::Transfer {
                layer: p.name.clone(),
                detail: format!(
                    "source shape {:?} at depth {} vs target {} {:?} at depth {}",
                    p.value.shape(),
                    p.depth,
                    q.name,
                    q.value.shape(),
                    q.depth
                ),
            });
        }
        q.value = p.value.clone();
    }
    if source.bn.len() != out.bn.len() {
        return Err(Error::Transfer {
            layer: "batch norm".into(),
            detail: format!("{} vs {} layers", source.bn.len(), out.bn.len()),
        });
    }
    for (dst, src) in out.bn.iter_mut().zip(&source.bn) {
        dst.running_mean = src.running_mean.clone();
        dst.running_var = src.running_var.clone();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum { mu: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingProtocol {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub patience: usize,
    pub plateau_patience: usize,
    pub plateau_divisor: f64,
    pub augment: AugmentParams,
}

impl Default for TrainingProtocol {
    fn default() -> Self {
        TrainingProtocol {
            epochs: 90,
            batch_size: 128,
            optimizer: OptimizerKind::SgdMomentum { mu: 0.9 },
            patience: 15,
            plateau_patience: 5,
            plateau_divisor: 10.0,
            augment: AugmentParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Plateau scale in force during the epoch.
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochHistory {
    pub epochs: Vec<EpochRecord>,
}

impl EpochHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,train_acc,val_acc,lr_scale\n");
        for r in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.lr_scale
            )
            .expect("writing to String");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: EpochHistory,
    pub stopped_early: bool,
}

enum Optimizer {
    Adam(Adam),
    Sgd(SgdMomentum),
}

/// Trains `model` under `plan`. Each epoch reshuffles and re-augments the
/// training set; the validation set is never augmented. Deterministic for a
/// given `seed`.
pub fn train(
    mut model: Model,
    plan: &TrainablePlan,
    train_set: &[RoiPatch],
    val_set: &[RoiPatch],
    protocol: &TrainingProtocol,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    if protocol.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if plan.trainable.len() != model.params.len() || plan.bn_modes.len() != model.bn.len() {
        return Err(Error::invalid("train", "plan does not match the model"));
    }
    protocol.augment.validate()?;
    for (bn, mode) in model.bn.iter_mut().zip(&plan.bn_modes) {
        bn.mode = *mode;
    }
    let mut lr_map = plan.lr_map.clone();
    let mut monitor = TrainingMonitor::new(
        protocol.patience,
        protocol.plateau_patience,
        protocol.plateau_divisor,
    )?;
    let mut optimizer = match protocol.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(&model.params)),
        OptimizerKind::SgdMomentum { mu } => Optimizer::Sgd(SgdMomentum::new(mu, &model.params)?),
    };
    let any_trainable = plan.trainable.iter().any(|&t| t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = EpochHistory::default();
    let mut stopped_early = false;

    for epoch in 1..=protocol.epochs {
        order.shuffle(&mut rng);
        let lr_scale = lr_map.global_scale;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(protocol.batch_size).enumerate() {
            let batch: Vec<RoiPatch> = chunk
                .iter()
                .map(|&i| augment(&train_set[i], &protocol.augment, &mut rng))
                .collect();
            let (x, y) = to_batch(&batch)?;
            let mut tape = Tape::new();
            let pass = model.forward_masked(&mut tape, &x, Phase::Train, &mut rng, &plan.trainable)?;
            let (loss, probs) = tape.softmax_cross_entropy(pass.logits, &y)?;
            let loss_value = tape.value(loss)?.data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("training loss {loss_value}"),
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            correct += count_correct(&probs, &batch);
            if any_trainable {
                let grads = tape.backward(loss)?;
                match &mut optimizer {
                    Optimizer::Adam(adam) => {
                        let lr = lr_map.rate(0).unwrap_or(0.0) * lr_map.global_scale;
                        adam.step(&mut model.params, &grads, lr, &plan.trainable)?
                    }
                    Optimizer::Sgd(sgd) => sgd.step(&mut model.params, &grads, &lr_map, &plan.trainable)?,
                }
            }
            model.apply_bn_updates(&pass.bn_updates);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let train_acc = correct as f64 / train_set.len() as f64;
        let (val_loss, val_acc) = evaluate_loss(&model, val_set, protocol.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                detail: format!("validation loss {val_loss}"),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
            lr_scale,
        });
        if monitor.observe(val_loss, &mut lr_map) == Decision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        stopped_early,
    })
}

fn count_correct(probs: &Tensor, batch: &[RoiPatch]) -> usize {
    probs
        .data()
        .chunks(2)
        .zip(batch)
        .filter(|(p, patch)| (p[1] >= 0.5) == (patch.label == Label::Malignant))
        .count()
}

/// Malignant-class probabilities in evaluation mode.
pub fn predict_scores(model: &Model, set: &[RoiPatch], chunk: usize) -> Result<Vec<ScoredPrediction>> {
    let mut out = Vec::with_capacity(set.len());
    for part in set.chunks(chunk.max(1)) {
        let (x, _) = to_batch(part)?;
        let probs = model.predict(&x)?;
        for (p, patch) in probs.data().chunks(2).zip(part) {
            out.push(ScoredPrediction::new(p[1].clamp(0.0, 1.0), patch.label)?);
        }
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy in evaluation mode.
pub fn evaluate_loss(model: &Model, set: &[RoiPatch], chunk: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for part in set.chunks(chunk.max(1)) {
        let (x, _) = to_batch(part)?;
        let probs = model.predict(&x)?;
        for (p, patch) in probs.data().chunks(2).zip(part) {
            let k = patch.label.class_index();
            loss -= p[k].max(f64::MIN_POSITIVE).ln();
        }
        correct += count_correct(&probs, part);
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}
