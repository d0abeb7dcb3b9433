use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    dropout, he_uniform, BatchNormState, ConvBn, DenseLayer, ForwardCtx, InceptionBlock, Layer,
    LayerKind, Parameter, Phase,
};
use crate::autodiff::{BatchStats, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Shape of a mini-Inception network: a ConvBN stem with interleaved 2x2
/// pooling, a stack of Inception blocks, then
/// `Flatten -> Dense -> Dropout -> Dense -> Softmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each stem ConvBN layer (3x3, same padding).
    pub stem_channels: Vec<usize>,
    /// Pooling layers placed after the first `stem_pools` stem convolutions.
    pub stem_pools: usize,
    pub pool_kind: PoolKind,
    pub inception_blocks: usize,
    /// Output channels of each block, split evenly over the four pathways.
    pub block_channels: usize,
    /// Width of the 1x1 reductions ahead of the 3x3 and 5x5 convolutions.
    pub block_reduce: usize,
    pub head_hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            in_channels: 1,
            stem_channels: vec![8, 16, 16],
            stem_pools: 2,
            pool_kind: PoolKind::Max,
            inception_blocks: 3,
            block_channels: 16,
            block_reduce: 8,
            head_hidden: 64,
            classes: 2,
            dropout: 0.5,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub params: Vec<Parameter>,
    pub bn: Vec<BatchNormState>,
    /// Last depth index of each Inception block.
    pub block_boundaries: Vec<usize>,
    /// Depth index of the first classifier-head parameter.
    pub head_start: usize,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Activations entering the classifier head.
    pub features: NodeId,
    pub bn_updates: Vec<(usize, BatchStats)>,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    params: Vec<Parameter>,
    bn: Vec<BatchNormState>,
    depth: usize,
    momentum: f64,
    eps: f64,
}

impl Builder<'_> {
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> ConvBn {
        let w = he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, self.rng);
        let weight = self.push(format!("{name}.conv.weight"), w);
        self.depth += 1;
        let gamma = self.push(format!("{name}.bn.gamma"), Tensor::ones(&[cout]));
        let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        self.depth += 1;
        self.bn.push(BatchNormState::new(gamma, beta, cout, self.momentum, self.eps));
        ConvBn {
            weight,
            bn: self.bn.len() - 1,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, relu: bool) -> DenseLayer {
        let w = he_uniform(&[din, dout], din, self.rng);
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[dout]));
        self.depth += 1;
        DenseLayer { weight, bias, relu }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter {
            name,
            value,
            depth: self.depth,
        });
        self.params.len() - 1
    }

    fn last_depth(&self) -> usize {
        self.depth - 1
    }
}

/// Builds a freshly initialized model (He-uniform weights, gamma 1, beta 0,
/// zero biases).
pub fn build_mini_inception(config: &ModelConfig, seed: u64) -> Result<Model> {
    validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        params: Vec::new(),
        bn: Vec::new(),
        depth: 0,
        momentum: config.bn_momentum,
        eps: config.bn_eps,
    };
    let mut layers = Vec::new();
    let mut channels = config.in_channels;
    let mut size = config.input_size;

    for (i, &cout) in config.stem_channels.iter().enumerate() {
        let name = format!("stem{}", i + 1);
        let conv = b.conv_bn(&name, channels, cout, 3);
        channels = cout;
        layers.push(Layer {
            name,
            kind: LayerKind::ConvBn(conv),
            depth_index: b.last_depth(),
        });
        if i < config.stem_pools {
            let kind = match config.pool_kind {
                PoolKind::Max => LayerKind::MaxPool {
                    window: 2,
                    stride: 2,
                },
                PoolKind::Avg => LayerKind::AvgPool {
                    window: 2,
                    stride: 2,
                },
            };
            layers.push(Layer {
                name: format!("pool{}", i + 1),
                kind,
                depth_index: b.last_depth(),
            });
            size /= 2;
        }
    }

    let mut block_boundaries = Vec::new();
    let path = config.block_channels / 4;
    for i in 0..config.inception_blocks {
        let name = format!("block{}", i + 1);
        let r = config.block_reduce;
        let block = InceptionBlock {
            branch1: b.conv_bn(&format!("{name}.b1"), channels, path, 1),
            branch3: [
                b.conv_bn(&format!("{name}.b3_reduce"), channels, r, 1),
                b.conv_bn(&format!("{name}.b3"), r, path, 3),
            ],
            branch5: [
                b.conv_bn(&format!("{name}.b5_reduce"), channels, r, 1),
                b.conv_bn(&format!("{name}.b5"), r, path, 5),
            ],
            pool_proj: b.conv_bn(&format!("{name}.pool_proj"), channels, path, 1),
        };
        channels = block.out_channels();
        block_boundaries.push(b.last_depth());
        layers.push(Layer {
            name,
            kind: LayerKind::InceptionBlock(block),
            depth_index: b.last_depth(),
        });
    }

    let feature_width = channels * size * size;
    let head_start = b.depth;
    layers.push(Layer {
        name: "flatten".into(),
        kind: LayerKind::Flatten,
        depth_index: b.last_depth(),
    });
    let fc1 = b.dense("fc1", feature_width, config.head_hidden, true);
    layers.push(Layer {
        name: "fc1".into(),
        kind: LayerKind::Dense(fc1),
        depth_index: b.last_depth(),
    });
    layers.push(Layer {
        name: "dropout".into(),
        kind: LayerKind::Dropout {
            rate: config.dropout,
        },
        depth_index: b.last_depth(),
    });
    let fc2 = b.dense("fc2", config.head_hidden, config.classes, false);
    layers.push(Layer {
        name: "fc2".into(),
        kind: LayerKind::Dense(fc2),
        depth_index: b.last_depth(),
    });
    layers.push(Layer {
        name: "softmax".into(),
        kind: LayerKind::SoftmaxHead,
        depth_index: b.last_depth(),
    });

    let Builder { params, bn, .. } = b;
    Ok(Model {
        config: config.clone(),
        layers,
        params,
        bn,
        block_boundaries,
        head_start,
    })
}

fn validate(config: &ModelConfig) -> Result<()> {
    let fail = |stage: &str, detail: String| {
        Err(Error::Build {
            stage: stage.to_string(),
            detail,
        })
    };
    if config.input_size == 0 || config.in_channels == 0 {
        return fail("input", "input size and channels must be positive".into());
    }
    if config.stem_channels.is_empty() || config.stem_channels.contains(&0) {
        return fail("stem", "need at least one stem convolution with positive width".into());
    }
    if config.stem_pools > config.stem_channels.len() {
        return fail(
            "stem",
            format!(
                "{} pooling layers but only {} stem convolutions",
                config.stem_pools,
                config.stem_channels.len()
            ),
        );
    }
    let mut size = config.input_size;
    for i in 0..config.stem_pools {
        if size < 2 {
            return fail(
                &format!("stem pool {}", i + 1),
                format!("spatial size {size} is smaller than the 2x2 pooling window"),
            );
        }
        size /= 2;
    }
    if config.inception_blocks > 0 {
        if config.block_channels == 0 || !config.block_channels.is_multiple_of(4) {
            return fail(
                "inception block 1",
                format!(
                    "channel budget {} is not divisible over 4 pathways",
                    config.block_channels
                ),
            );
        }
        if config.block_reduce == 0 {
            return fail("inception block 1", "reduction width must be positive".into());
        }
    }
    if config.head_hidden == 0 || config.classes < 2 {
        return fail("head", "need a positive hidden width and at least 2 classes".into());
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return fail("head", format!("dropout rate {} outside [0, 1)", config.dropout));
    }
    Ok(())
}

impl Model {
    /// Largest depth index (the output layer).
    pub fn max_depth(&self) -> usize {
        self.params.iter().map(|p| p.depth).max().unwrap_or(0)
    }

    /// Sorted distinct depth indices of all parameters.
    pub fn depths(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.params.iter().map(|p| p.depth).collect();
        d.dedup();
        d
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn is_head_param(&self, id: usize) -> bool {
        self.params[id].depth >= self.head_start
    }

    /// Runs the network on an `[N, C, S, S]` batch, recording on `tape`.
    ///
    /// In [`Phase::Train`], batch-norm layers in train mode normalize with
    /// batch statistics (returned in `bn_updates`, not applied) and dropout is
    /// active. In [`Phase::Eval`] the pass is a pure function of the inputs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        phase: Phase,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.forward_inner(tape, input, phase, rng, None)
    }

    /// Like [`Model::forward`], but parameters whose `trainable` entry is
    /// false are recorded as constants, so `backward` skips them and any
    /// subgraph that depends on nothing else.
    pub fn forward_masked<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        phase: Phase,
        rng: &mut R,
        trainable: &[bool],
    ) -> Result<ForwardPass> {
        if trainable.len() != self.params.len() {
            return Err(Error::invalid(
                "model forward",
                format!("{} mask entries for {} parameters", trainable.len(), self.params.len()),
            ));
        }
        self.forward_inner(tape, input, phase, rng, Some(trainable))
    }

    fn forward_inner<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        phase: Phase,
        rng: &mut R,
        trainable: Option<&[bool]>,
    ) -> Result<ForwardPass> {
        let (_, c, h, w) = input.dims4("model forward")?;
        let s = self.config.input_size;
        if (c, h, w) != (self.config.in_channels, s, s) {
            return Err(Error::shape(
                "model forward",
                format!(
                    "expected [N,{},{s},{s}], got {:?}",
                    self.config.in_channels,
                    input.shape()
                ),
            ));
        }
        let nodes: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| match trainable {
                Some(mask) if !mask[i] => tape.leaf(p.value.clone()),
                _ => tape.param(i, p.value.clone()),
            })
            .collect();
        let mut ctx = ForwardCtx {
            params: &nodes,
            bn: &self.bn,
            phase,
            rng,
            bn_updates: Vec::new(),
        };
        let mut x = tape.leaf(input.clone());
        let mut features = x;
        for layer in &self.layers {
            x = match &layer.kind {
                LayerKind::ConvBn(conv) => conv.forward(tape, &mut ctx, x)?,
                LayerKind::InceptionBlock(block) => block.forward(tape, &mut ctx, x)?,
                LayerKind::MaxPool { window, stride } => tape.maxpool2d(x, *window, *stride)?,
                LayerKind::AvgPool { window, stride } => tape.avgpool2d(x, *window, *stride)?,
                LayerKind::Flatten => {
                    features = x;
                    tape.flatten(x)?
                }
                LayerKind::Dense(d) => {
                    let y = tape.dense(x, ctx.params[d.weight], ctx.params[d.bias])?;
                    if d.relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                LayerKind::Dropout { rate } => dropout(tape, x, *rate, ctx.rng, ctx.phase)?,
                LayerKind::SoftmaxHead => x,
            };
        }
        Ok(ForwardPass {
            logits: x,
            features,
            bn_updates: ctx.bn_updates,
        })
    }

    /// Folds batch statistics from a training forward pass into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        for (idx, stats) in updates {
            self.bn[*idx].update(stats);
        }
    }

    /// Class probabilities in evaluation mode.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        // Eval never draws from the rng.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, input, Phase::Eval, &mut rng)?;
        let logits = tape.value(pass.logits)?;
        let (n, k) = logits.dims2("predict")?;
        Tensor::new(vec![n, k], crate::autodiff::softmax_rows(logits.data(), n, k))
    }

    /// Pre-head activations in evaluation mode.
    pub fn features(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, input, Phase::Eval, &mut rng)?;
        Ok(tape.value(pass.features)?.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_structure() {
        let m = build_mini_inception(&ModelConfig::default(), 0).unwrap();
        let depths = m.depths();
        assert_eq!(depths, (0..=m.max_depth()).collect::<Vec<_>>());
        // 3 stem ConvBN (2 each), 3 blocks x 6 ConvBN (2 each), 2 dense
        assert_eq!(m.max_depth() + 1, 3 * 2 + 3 * 6 * 2 + 2);
        assert_eq!(m.block_boundaries.len(), 3);
        assert!(m.block_boundaries.windows(2).all(|w| w[0] < w[1]));
        assert!(m.head_start > *m.block_boundaries.last().unwrap());
        assert!(matches!(m.layers.last().unwrap().kind, LayerKind::SoftmaxHead));
        let softmax_count = m
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::SoftmaxHead))
            .count();
        assert_eq!(softmax_count, 1);

        let param_layers: Vec<usize> = m
            .layers
            .iter()
            .filter(|l| l.kind.is_parameterized())
            .map(|l| l.depth_index)
            .collect();
        assert!(param_layers.windows(2).all(|w| w[0] < w[1]));
        assert!(m.layers.windows(2).all(|w| w[0].depth_index <= w[1].depth_index));

        let mut names: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
        names.sort();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());

        // Flatten width matches fc1 input: 16 channels at 8x8
        let fc1 = m.param_index("fc1.weight").unwrap();
        assert_eq!(m.params[fc1].value.shape(), &[16 * 8 * 8, 64]);
    }

    #[test]
    fn zero_input_gives_uniform_probabilities() {
        let m = build_mini_inception(&ModelConfig::default(), 3).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(&[4, 1, 32, 32]);
        let pass = m.forward(&mut tape, &x, Phase::Train, &mut rng).unwrap();
        let labels = Tensor::new(vec![4, 2], [1.0, 0.0].repeat(4)).unwrap();
        let (_, p) = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn plain_cnn_without_blocks() {
        let cfg = ModelConfig {
            inception_blocks: 0,
            ..ModelConfig::default()
        };
        let m = build_mini_inception(&cfg, 0).unwrap();
        // 3 stem convs + 2 pools + flatten, fc1, dropout, fc2, softmax
        assert_eq!(m.layers.len(), 3 + 2 + 5);
        assert!(m.block_boundaries.is_empty());
        let p = m.predict(&Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
    }

    #[test]
    fn input_too_small_names_stage() {
        let cfg = ModelConfig {
            input_size: 3,
            ..ModelConfig::default()
        };
        let err = build_mini_inception(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("stem pool 2"), "{err}");
    }

    #[test]
    fn channel_budget_must_split_four_ways() {
        let cfg = ModelConfig {
            block_channels: 18,
            ..ModelConfig::default()
        };
        let err = build_mini_inception(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = build_mini_inception(&ModelConfig::default(), 11).unwrap();
        let data: Vec<f64> = (0..2 * 32 * 32).map(|v| (v as f64 * 0.013).sin()).collect();
        let x = Tensor::new(vec![2, 1, 32, 32], data).unwrap();
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert!(a.bit_eq(&b));
    }
}
