//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value together with whatever it needs to run its
//! backward rule, so node ids are topologically ordered by construction.
//! [`Tape::backward`] walks the nodes once in reverse and returns the
//! gradients of every registered parameter leaf.
//!
//! Conventions: convolution is cross-correlation (no kernel flip), the relu
//! subgradient at zero is 0, and max pooling routes its gradient to the first
//! row-major maximum of each window.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::Tensor;

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter leaf.
pub type ParamId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    MaskMul {
        input: NodeId,
        mask: Vec<f64>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        /// Column matrices for every sample; empty for pointwise convolutions.
        cols: Vec<f64>,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: NodeId,
        geom: PoolGeom,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics were used, so the input gradient includes the
        /// mean/variance terms.
        batch_stats: bool,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
        channels: Vec<usize>,
    },
    SoftmaxXent {
        logits: NodeId,
        probs: Tensor,
        labels: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::Reshape(a) => vec![*a],
            Op::MaskMul { input, .. } | Op::MaxPool { input, .. } | Op::AvgPool { input, .. } => {
                vec![*input]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::ConcatChannels { inputs, .. } => inputs.clone(),
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Gradients of the loss with respect to each parameter leaf.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.node(id)?.value)
    }

    /// Records a constant.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        self.push(value, Op::Param(id))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a)?.shape(), self.value(b)?.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a)?.map(|v| v * factor);
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a)?.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a)?.map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a)?.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Collapses `[N, ...]` into `[N, rest]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a)?.shape().to_vec();
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(a, vec![n, rest])
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask_mul(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let v = self.value(a)?;
        if mask.len() != v.len() {
            return Err(Error::shape(
                "mask_mul",
                format!("mask has {} elements, input {}", mask.len(), v.len()),
            ));
        }
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MaskMul { input: a, mask }))
    }

    /// 2-D cross-correlation of `[N,C,H,W]` with kernels `[F,C,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let x = self.value(input)?;
        let k = self.value(kernel)?;
        let (n, c, h, w) = x.dims4(OP)?;
        let (f, kc, kh, kw) = k.dims4(OP)?;
        if kc != c {
            return Err(Error::shape(
                OP,
                format!("input has C={c} channels but kernels expect C={kc}"),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                OP,
                format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        if let Some(b) = bias {
            let bs = self.value(b)?.shape();
            if bs != [f] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {bs:?} does not match F={f}"),
                ));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let rows = geom.col_rows();
        let ohw = geom.out_len();
        let in_len = c * h * w;
        let mut out = vec![0.0; n * f * ohw];
        let mut cols = Vec::new();
        if !geom.is_pointwise() {
            cols = vec![0.0; n * rows * ohw];
        }
        for s in 0..n {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let col: &[f64] = if geom.is_pointwise() {
                xs
            } else {
                let col = &mut cols[s * rows * ohw..(s + 1) * rows * ohw];
                kernels::im2col(xs, &geom, col);
                col
            };
            let os = &mut out[s * f * ohw..(s + 1) * f * ohw];
            kernels::gemm(f, rows, ohw, 1.0, k.data(), false, col, false, 0.0, os);
        }
        if let Some(b) = bias {
            let bv = self.value(b)?.data();
            for s in 0..n {
                for (fi, &bf) in bv.iter().enumerate() {
                    let start = (s * f + fi) * ohw;
                    for o in &mut out[start..start + ohw] {
                        *o += bf;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.maxpool2d_padded(input, window, stride, 0)
    }

    /// Max pooling where padded positions are ignored rather than treated as zeros.
    pub fn maxpool2d_padded(
        &mut self,
        input: NodeId,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let x = self.value(input)?;
        let geom = pool_geom("maxpool2d", x, window, stride, padding)?;
        let (out, argmax) = kernels::maxpool_forward(x.data(), &geom);
        let value = Tensor::new(vec![geom.n, geom.c, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    pub fn avgpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let x = self.value(input)?;
        let geom = pool_geom("avgpool2d", x, window, stride, 0)?;
        let out = kernels::avgpool_forward(x.data(), &geom);
        let value = Tensor::new(vec![geom.n, geom.c, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::AvgPool { input, geom }))
    }

    /// Affine map `[N,D] x [D,M] + [M]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        const OP: &str = "dense";
        let x = self.value(input)?;
        let wt = self.value(weight)?;
        let b = self.value(bias)?;
        let (n, d) = x.dims2(OP)?;
        let (wd, m) = wt.dims2(OP)?;
        if wd != d {
            return Err(Error::shape(
                OP,
                format!("input width D={d} but weight expects D={wd}"),
            ));
        }
        if b.shape() != [m] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} does not match M={m}", b.shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        kernels::gemm(n, d, m, 1.0, x.data(), false, wt.data(), false, 1.0, &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    fn check_bn(&self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        const OP: &str = "batchnorm";
        let (n, c, h, w) = self.value(input)?.dims4(OP)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id)?.shape();
            if s != [c] {
                return Err(Error::shape(
                    OP,
                    format!("{name} shape {s:?} does not match C={c}"),
                ));
            }
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization using the statistics of this batch. Returns the
    /// output node and the batch statistics so the caller can update running
    /// averages.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let (n, c, hw) = self.check_bn(input, gamma, beta)?;
        let count = n * hw;
        if count < 2 {
            return Err(Error::invalid(
                "batchnorm",
                format!("train mode needs N*H*W >= 2 per channel, got {count}"),
            ));
        }
        let x = self.value(input)?.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for smp in 0..n {
                let off = (smp * c + ch) * hw;
                s += x[off..off + hw].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut ss = 0.0;
            for smp in 0..n {
                let off = (smp * c + ch) * hw;
                ss += x[off..off + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let node = self.bn_apply(input, gamma, beta, &mean, inv_std, true)?;
        Ok((node, BatchStats { mean, var, count }))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (_, c, _) = self.check_bn(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "running statistics have {}/{} channels, input C={c}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(input, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<NodeId> {
        let xv = self.value(input)?;
        let (n, c, h, w) = xv.dims4("batchnorm")?;
        let hw = h * w;
        let x = xv.data();
        let g = self.value(gamma)?.data();
        let b = self.value(beta)?.data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        const OP: &str = "concat_channels";
        if inputs.is_empty() {
            return Err(Error::invalid(OP, "no inputs"));
        }
        let (n, _, h, w) = self.value(inputs[0])?.dims4(OP)?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (ni, ci, hi, wi) = self.value(id)?.dims4(OP)?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::shape(
                    OP,
                    format!("[N,H,W] = [{ni},{hi},{wi}] differs from [{n},{h},{w}]"),
                ));
            }
            channels.push(ci);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for smp in 0..n {
            for (&id, &ci) in inputs.iter().zip(&channels) {
                let d = self.value(id)?.data();
                out.extend_from_slice(&d[smp * ci * hw..(smp + 1) * ci * hw]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.push(
            value,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
                channels,
            },
        ))
    }

    /// Row-wise softmax followed by mean cross-entropy against one-hot labels.
    /// Returns the scalar loss node and the probabilities.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &Tensor,
    ) -> Result<(NodeId, Tensor)> {
        const OP: &str = "softmax_cross_entropy";
        let lv = self.value(logits)?;
        let (n, k) = lv.dims2(OP)?;
        if k < 2 {
            return Err(Error::shape(OP, format!("need at least 2 classes, got {k}")));
        }
        if labels.shape() != [n, k] {
            return Err(Error::shape(
                OP,
                format!("labels {:?} vs logits [{n},{k}]", labels.shape()),
            ));
        }
        for (row, chunk) in labels.data().chunks(k).enumerate() {
            let ones = chunk.iter().filter(|&&v| v == 1.0).count();
            let zeros = chunk.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::invalid(OP, format!("label row {row} is not one-hot")));
            }
        }
        let probs = softmax_rows(lv.data(), n, k);
        let mut loss = 0.0;
        for (row, chunk) in lv.data().chunks(k).enumerate() {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + chunk.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let target = labels.data()[row * k..(row + 1) * k]
                .iter()
                .position(|&v| v == 1.0)
                .expect("validated one-hot");
            loss += lse - chunk[target];
        }
        loss /= n as f64;
        let probs = Tensor::new(vec![n, k], probs)?;
        let node = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs: probs.clone(),
                labels: labels.clone(),
            },
        );
        Ok((node, probs))
    }

    /// Gradients of the scalar at `loss` with respect to every parameter leaf.
    /// Parameters that do not influence the loss receive zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = self.value(loss)?;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut out = GradientMap::default();
        // nodes with no parameter upstream are skipped
        let mut needs = vec![false; loss.0 + 1];
        for idx in 0..=loss.0 {
            needs[idx] = match &self.nodes[idx].op {
                Op::Param(_) => true,
                op => op.inputs().iter().any(|i| needs[i.0]),
            };
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !needs[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => match out.grads.get_mut(pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.grads.insert(*pid, g);
                    }
                },
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = zip_map(&g, vb, |x, y| x * y);
                    let gb = zip_map(&g, va, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|v| v * f)),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, s));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let gx = zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(shape)?);
                }
                Op::MaskMul { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                    accumulate(&mut grads, *input, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let (gx, gk, gb) =
                        self.conv_backward(&g, *input, *kernel, geom, cols, needs[input.0])?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *input, gx);
                    }
                    accumulate(&mut grads, *kernel, gk);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let mut dx = vec![0.0; self.nodes[input.0].value.len()];
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        dx[src] += gv;
                    }
                    accumulate(&mut grads, *input, Tensor::new(shape, dx)?);
                }
                Op::AvgPool { input, geom } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let dx = kernels::avgpool_backward(g.data(), geom);
                    accumulate(&mut grads, *input, Tensor::new(shape, dx)?);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let (n, d) = x.dims2("dense")?;
                    let m = w.shape()[1];
                    let mut gx = vec![0.0; n * d];
                    kernels::gemm(n, m, d, 1.0, g.data(), false, w.data(), true, 0.0, &mut gx);
                    let mut gw = vec![0.0; d * m];
                    kernels::gemm(d, n, m, 1.0, x.data(), true, g.data(), false, 0.0, &mut gw);
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::new(vec![n, d], gx)?);
                    accumulate(&mut grads, *weight, Tensor::new(vec![d, m], gw)?);
                    accumulate(&mut grads, *bias, Tensor::new(vec![m], gb)?);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (gx, gg, gbeta) = self.bn_backward(
                        &g,
                        *input,
                        *gamma,
                        xhat,
                        inv_std,
                        *batch_stats,
                    )?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::ConcatChannels { inputs, channels } => {
                    let (n, total, h, w) = g.dims4("concat_channels")?;
                    let hw = h * w;
                    let mut offset = 0;
                    for (&id, &ci) in inputs.iter().zip(channels) {
                        let mut part = Vec::with_capacity(n * ci * hw);
                        for smp in 0..n {
                            let start = (smp * total + offset) * hw;
                            part.extend_from_slice(&g.data()[start..start + ci * hw]);
                        }
                        accumulate(&mut grads, id, Tensor::new(vec![n, ci, h, w], part)?);
                        offset += ci;
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    labels,
                } => {
                    let n = probs.shape()[0] as f64;
                    let s = g.data()[0] / n;
                    let data = probs
                        .data()
                        .iter()
                        .zip(labels.data())
                        .map(|(p, y)| (p - y) * s)
                        .collect();
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::new(probs.shape().to_vec(), data)?,
                    );
                }
            }
        }

        for node in &self.nodes {
            if let Op::Param(pid) = node.op {
                out.grads
                    .entry(pid)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn conv_backward(
        &self,
        g: &Tensor,
        input: NodeId,
        kernel: NodeId,
        geom: &ConvGeom,
        cols: &[f64],
        input_grad: bool,
    ) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let n = x.shape()[0];
        let f = k.shape()[0];
        let rows = geom.col_rows();
        let ohw = geom.out_len();
        let in_len = geom.c * geom.h * geom.w;
        let mut gx = vec![0.0; x.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gb = vec![0.0; f];
        let mut dcol = vec![0.0; rows * ohw];
        for s in 0..n {
            let gs = &g.data()[s * f * ohw..(s + 1) * f * ohw];
            let col = if geom.is_pointwise() {
                &x.data()[s * in_len..(s + 1) * in_len]
            } else {
                &cols[s * rows * ohw..(s + 1) * rows * ohw]
            };
            kernels::gemm(f, ohw, rows, 1.0, gs, false, col, true, 1.0, &mut gk);
            for (fi, acc) in gb.iter_mut().enumerate() {
                *acc += gs[fi * ohw..(fi + 1) * ohw].iter().sum::<f64>();
            }
            if !input_grad {
                continue;
            }
            let gxs = &mut gx[s * in_len..(s + 1) * in_len];
            if geom.is_pointwise() {
                kernels::gemm(rows, f, ohw, 1.0, k.data(), true, gs, false, 0.0, gxs);
            } else {
                kernels::gemm(rows, f, ohw, 1.0, k.data(), true, gs, false, 0.0, &mut dcol);
                kernels::col2im(&dcol, geom, gxs);
            }
        }
        let gx = if input_grad {
            Some(Tensor::new(x.shape().to_vec(), gx)?)
        } else {
            None
        };
        Ok((
            gx,
            Tensor::new(k.shape().to_vec(), gk)?,
            Tensor::new(vec![f], gb)?,
        ))
    }

    fn bn_backward(
        &self,
        g: &Tensor,
        input: NodeId,
        gamma: NodeId,
        xhat: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let x = &self.nodes[input.0].value;
        let gam = self.nodes[gamma.0].value.data();
        let (n, c, h, w) = x.dims4("batchnorm")?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let dy = g.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] += dy[i] * xhat[i];
                    dbeta[ch] += dy[i];
                }
            }
        }
        let mut dx = vec![0.0; x.len()];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * hw;
                let scale = gam[ch] * inv_std[ch];
                for i in off..off + hw {
                    dx[i] = if batch_stats {
                        scale * (dy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                    } else {
                        scale * dy[i]
                    };
                }
            }
        }
        Ok((
            Tensor::new(vec![n, c, h, w], dx)?,
            Tensor::new(vec![c], dgamma)?,
            Tensor::new(vec![c], dbeta)?,
        ))
    }
}

fn pool_geom(
    op: &'static str,
    x: &Tensor,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<PoolGeom> {
    let (n, c, h, w) = x.dims4(op)?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid(op, "window and stride must be positive"));
    }
    if pad >= window {
        return Err(Error::invalid(op, "padding must be smaller than the window"));
    }
    if window > h + 2 * pad || window > w + 2 * pad {
        return Err(Error::shape(
            op,
            format!("window {window} larger than spatial dims {h}x{w} (padding {pad})"),
        ));
    }
    Ok(PoolGeom {
        n,
        c,
        h,
        w,
        window,
        stride,
        pad,
        oh: (h + 2 * pad - window) / stride + 1,
        ow: (w + 2 * pad - window) / stride + 1,
    })
}

/// Numerically stable row-wise softmax of an `n x k` matrix.
pub fn softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for row in logits.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
