use rand::{Rng, SeedableRng};

use crate::autodiff::{BatchStats, NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with the depth index used by freeze policies and
/// the per-layer learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running statistics of one batch-norm layer. `gamma` and `beta` live in the
/// model's parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    pub fn new(gamma: ParamId, beta: ParamId, channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running <- momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = stats.count as f64 / (stats.count as f64 - 1.0);
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b * correction;
        }
    }
}

/// Per-forward bookkeeping: tape nodes of every parameter, the batch-norm
/// states, and batch statistics to fold into running averages afterwards.
pub(crate) struct ForwardCtx<'a, R: Rng + ?Sized> {
    pub params: &'a [NodeId],
    pub bn: &'a [BatchNormState],
    pub phase: Phase,
    pub rng: &'a mut R,
    pub bn_updates: Vec<(usize, BatchStats)>,
}

/// Convolution (no bias) followed by batch normalization and relu.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBn {
    pub(crate) fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx<'_, R>,
        x: NodeId,
    ) -> Result<NodeId> {
        let y = tape.conv2d(x, ctx.params[self.weight], None, self.stride, self.padding)?;
        let state = &ctx.bn[self.bn];
        let gamma = ctx.params[state.gamma];
        let beta = ctx.params[state.beta];
        let y = if ctx.phase == Phase::Train && state.mode == BnMode::Train {
            let (y, stats) = tape.batchnorm_train(y, gamma, beta, state.eps)?;
            ctx.bn_updates.push((self.bn, stats));
            y
        } else {
            tape.batchnorm_infer(
                y,
                gamma,
                beta,
                &state.running_mean,
                &state.running_var,
                state.eps,
            )?
        };
        tape.relu(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub relu: bool,
}

/// Four parallel pathways concatenated along channels: 1x1; 1x1 -> 3x3;
/// 1x1 -> 5x5; 3x3 max-pool -> 1x1. Spatial size is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct InceptionBlock {
    pub branch1: ConvBn,
    pub branch3: [ConvBn; 2],
    pub branch5: [ConvBn; 2],
    pub pool_proj: ConvBn,
}

impl InceptionBlock {
    pub fn out_channels(&self) -> usize {
        self.branch1.out_channels
            + self.branch3[1].out_channels
            + self.branch5[1].out_channels
            + self.pool_proj.out_channels
    }

    pub fn convs(&self) -> [&ConvBn; 6] {
        [
            &self.branch1,
            &self.branch3[0],
            &self.branch3[1],
            &self.branch5[0],
            &self.branch5[1],
            &self.pool_proj,
        ]
    }

    /// Records the block on `tape` with `params[i]` standing for parameter
    /// `i`. Returns the output and the batch statistics of train-mode BN
    /// layers.
    pub fn record(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        bn: &[BatchNormState],
        phase: Phase,
        x: NodeId,
    ) -> Result<(NodeId, Vec<(usize, BatchStats)>)> {
        // Blocks contain no dropout, so the rng is never drawn from.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            params,
            bn,
            phase,
            rng: &mut rng,
            bn_updates: Vec::new(),
        };
        let y = self.forward(tape, &mut ctx, x)?;
        Ok((y, ctx.bn_updates))
    }

    pub(crate) fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx<'_, R>,
        x: NodeId,
    ) -> Result<NodeId> {
        let p1 = self.branch1.forward(tape, ctx, x)?;
        let p3 = self.branch3[0].forward(tape, ctx, x)?;
        let p3 = self.branch3[1].forward(tape, ctx, p3)?;
        let p5 = self.branch5[0].forward(tape, ctx, x)?;
        let p5 = self.branch5[1].forward(tape, ctx, p5)?;
        let pp = tape.maxpool2d_padded(x, 3, 1, 1)?;
        let pp = self.pool_proj.forward(tape, ctx, pp)?;
        tape.concat_channels(&[p1, p3, p5, pp])
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum LayerKind {
    ConvBn(ConvBn),
    Dense(DenseLayer),
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Dropout { rate: f64 },
    Flatten,
    InceptionBlock(InceptionBlock),
    SoftmaxHead,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::ConvBn(_) => "conv_bn",
            LayerKind::Dense(_) => "dense",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::InceptionBlock(_) => "inception",
            LayerKind::SoftmaxHead => "softmax",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::ConvBn(_) | LayerKind::Dense(_) | LayerKind::InceptionBlock(_)
        )
    }
}

/// One entry of the model's layer list. Parameterized layers carry the depth
/// of their last parameter; the others inherit the preceding layer's depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub depth_index: usize,
}

/// Inverted dropout: in training, zero each element with probability `rate`
/// and scale survivors by `1 / (1 - rate)`; identity at evaluation.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: NodeId,
    rate: f64,
    rng: &mut R,
    phase: Phase,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if phase == Phase::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let n = tape.value(x)?.len();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    tape.mask_mul(x, mask)
}

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
