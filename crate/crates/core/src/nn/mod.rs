//! Layers, the mini-Inception model and checkpoints.
//!
//! Every parameter carries a depth index. Depths count parameterized layers
//! from the input: a ConvBN unit takes two (convolution, then batch norm) and
//! each dense layer one. Inside an Inception block the pathways are numbered
//! in order: 1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool projection.

mod checkpoint;
mod layers;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{
    dropout, he_uniform, BatchNormState, BnMode, ConvBn, DenseLayer, InceptionBlock, Layer,
    LayerKind, Parameter, Phase,
};
pub use model::{build_mini_inception, ForwardPass, Model, ModelConfig, PoolKind};
