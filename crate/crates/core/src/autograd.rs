//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records operations in the order they are applied, so node ids
//! are a topological order by construction. [`Graph::backward`] walks the
//! tape in exact reverse and returns gradients for every leaf that was marked
//! as requiring one. Parameters can be borrowed into the graph, which lets
//! many graphs share one frozen network concurrently.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        // im2col buffers, only kept when the kernels need a gradient
        cols: Option<Vec<f32>>,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Flatten(NodeId),
    UnitPool(NodeId),
    ChannelMask {
        input: NodeId,
        keep: Vec<f32>,
    },
    WeightedSum {
        input: NodeId,
        coeffs: Vec<f64>,
    },
    Sum(NodeId),
    Scale {
        input: NodeId,
        factor: f32,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    // 64-bit value of scalar reductions
    exact: Option<f64>,
}

/// A recorded computation. Nodes are appended in evaluation order.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to the graph's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` when the leaf was detached.
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an owned leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, Cow::Owned(value), requires_grad, None)
    }

    /// Adds a borrowed leaf tensor, typically a network parameter.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, Cow::Borrowed(value), requires_grad, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a scalar node, using the 64-bit accumulator when the node is
    /// a reduction.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.exact.unwrap_or(node.value.data()[0] as f64)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(
        &mut self,
        op: Op,
        value: Cow<'a, Tensor>,
        requires_grad: bool,
        exact: Option<f64>,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            exact,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    /// `out[b,o] = sum_i input[b,i] * weight[i,o] + bias[o]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::Shape(format!(
                "dense expects input [B,I], weight [I,O], bias [O]; got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (batch, inputs) = (x.shape()[0], x.shape()[1]);
        let outputs = w.shape()[1];
        if w.shape()[0] != inputs || b.shape()[0] != outputs {
            return Err(Error::Shape(format!(
                "dense: input {:?} weight {:?} bias {:?} do not conform",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0f32; batch * outputs];
        gemm(
            batch,
            inputs,
            outputs,
            x.data(),
            false,
            w.data(),
            false,
            &mut out,
            0.0,
        );
        for row in out.chunks_exact_mut(outputs) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![batch, outputs], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            Cow::Owned(value),
            rg,
            None,
        ))
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, k, b) = (self.value(input), self.value(kernels), self.value(bias));
        if x.rank() != 4 || k.rank() != 4 || b.rank() != 1 {
            return Err(Error::Shape(format!(
                "conv2d expects input [B,C,H,W], kernels [K,C,3,3], bias [K]; got {:?}, {:?}, {:?}",
                x.shape(),
                k.shape(),
                b.shape()
            )));
        }
        let [batch, channels, height, width] =
            [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let out_ch = k.shape()[0];
        if k.shape()[1] != channels {
            return Err(Error::Shape(format!(
                "conv2d: input has {channels} channels, kernels expect {}",
                k.shape()[1]
            )));
        }
        if k.shape()[2] != 3 || k.shape()[3] != 3 {
            return Err(Error::Shape(format!(
                "conv2d: kernels must be 3x3, got {:?}",
                k.shape()
            )));
        }
        if b.shape()[0] != out_ch {
            return Err(Error::Shape(format!(
                "conv2d: {out_ch} kernels but bias of length {}",
                b.shape()[0]
            )));
        }
        if height < 3 || width < 3 {
            return Err(Error::Shape(format!(
                "conv2d: spatial size {height}x{width} is below 3x3"
            )));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
        };
        let keep_cols = self.nodes[kernels.0].requires_grad;
        let col_len = channels * 9 * height * width;
        let plane = height * width;
        let mut cols_all = if keep_cols {
            vec![0.0f32; batch * col_len]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols {
            Vec::new()
        } else {
            vec![0.0f32; col_len]
        };
        let mut out = vec![0.0f32; batch * out_ch * plane];
        let in_stride = channels * plane;
        for s in 0..batch {
            let cols = if keep_cols {
                &mut cols_all[s * col_len..(s + 1) * col_len]
            } else {
                &mut scratch[..]
            };
            im2col(&x.data()[s * in_stride..(s + 1) * in_stride], geom, cols);
            let dst = &mut out[s * out_ch * plane..(s + 1) * out_ch * plane];
            gemm(
                out_ch,
                channels * 9,
                plane,
                k.data(),
                false,
                cols,
                false,
                dst,
                0.0,
            );
            for (row, bv) in dst.chunks_exact_mut(plane).zip(b.data()) {
                for v in row {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(vec![batch, out_ch, height, width], out)?;
        let rg = self.any_grad(&[input, kernels, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                cols: keep_cols.then_some(cols_all),
            },
            Cow::Owned(value),
            rg,
            None,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(Op::Relu(input), Cow::Owned(value), rg, None)
    }

    /// 2x2 max pooling with stride 2. Ties go to the first maximal element.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::Shape(format!(
                "max_pool2 expects [B,C,H,W], got {:?}",
                x.shape()
            )));
        }
        let [batch, channels, height, width] =
            [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool2 needs even spatial dims, got {height}x{width}"
            )));
        }
        let (oh, ow) = (height / 2, width / 2);
        let mut out = Vec::with_capacity(batch * channels * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        let src = x.data();
        for bc in 0..batch * channels {
            let base = bc * height * width;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * width + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * width + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![batch, channels, oh, ow], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(Op::MaxPool2 { input, argmax }, Cow::Owned(value), rg, None))
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let batch = x.shape()[0];
        let rest = x.len() / batch;
        let value = x.clone().reshape(vec![batch, rest]).expect("same size");
        let rg = self.any_grad(&[input]);
        self.push(Op::Flatten(input), Cow::Owned(value), rg, None)
    }

    /// Per-unit scalar activation: spatial mean for `[B,K,H,W]`, identity for
    /// `[B,K]`.
    pub fn unit_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let value = match x.rank() {
            2 => x.clone(),
            4 => {
                let (batch, units) = (x.shape()[0], x.shape()[1]);
                let plane = x.shape()[2] * x.shape()[3];
                let data = x
                    .data()
                    .chunks_exact(plane)
                    .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
                    .collect();
                Tensor::new(vec![batch, units], data)?
            }
            _ => {
                return Err(Error::Shape(format!(
                    "unit_pool expects [B,K] or [B,K,H,W], got {:?}",
                    x.shape()
                )))
            }
        };
        let rg = self.any_grad(&[input]);
        Ok(self.push(Op::UnitPool(input), Cow::Owned(value), rg, None))
    }

    /// Multiplies unit (channel) `k` of a `[B,K,..]` tensor by `keep[k]`.
    pub fn channel_mask(&mut self, input: NodeId, keep: Vec<f32>) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() < 2 || x.shape()[1] != keep.len() {
            return Err(Error::Shape(format!(
                "channel_mask of length {} for tensor {:?}",
                keep.len(),
                x.shape()
            )));
        }
        let inner: usize = x.shape()[2..].iter().product();
        let mut data = x.data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(inner).enumerate() {
            let m = keep[i % keep.len()];
            for v in chunk {
                *v *= m;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(Op::ChannelMask { input, keep }, Cow::Owned(value), rg, None))
    }

    /// Scalar `sum_b sum_k coeffs[k] * input[b,k]`.
    pub fn weighted_sum(&mut self, input: NodeId, coeffs: Vec<f64>) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 2 || x.shape()[1] != coeffs.len() {
            return Err(Error::Shape(format!(
                "weighted_sum with {} coefficients for tensor {:?}",
                coeffs.len(),
                x.shape()
            )));
        }
        let total: f64 = x
            .data()
            .chunks_exact(coeffs.len())
            .flat_map(|row| row.iter().zip(&coeffs).map(|(&v, &c)| v as f64 * c))
            .sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Op::WeightedSum { input, coeffs },
            Cow::Owned(Tensor::scalar(total as f32)),
            rg,
            Some(total),
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[input]);
        self.push(
            Op::Sum(input),
            Cow::Owned(Tensor::scalar(total as f32)),
            rg,
            Some(total),
        )
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let exact = self.nodes[input.0].exact.map(|e| e * factor as f64);
        let rg = self.any_grad(&[input]);
        self.push(Op::Scale { input, factor }, Cow::Owned(value), rg, exact)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, evaluated in
    /// 64-bit with max subtraction.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "softmax_xent: logits {:?} with {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let classes = z.shape()[1];
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0f64;
        for (index, (row, &label)) in z.data().chunks_exact(classes).zip(labels).enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    classes,
                });
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            total += max + denom.ln() - row[label] as f64;
            probs.extend(exps.iter().map(|e| e / denom));
        }
        let loss = total / labels.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Cow::Owned(Tensor::scalar(loss as f32)),
            rg,
            Some(loss),
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::InvalidArgument(format!("unknown node {}", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (batch, inputs) = (x.shape()[0], x.shape()[1]);
                    let outputs = w.shape()[1];
                    if self.requires_grad(*input) {
                        let dst = self.slot(&mut grads, *input);
                        gemm(batch, outputs, inputs, &g, false, w.data(), true, dst, 1.0);
                    }
                    if self.requires_grad(*weight) {
                        let dst = self.slot(&mut grads, *weight);
                        gemm(inputs, batch, outputs, x.data(), true, &g, false, dst, 1.0);
                    }
                    if self.requires_grad(*bias) {
                        let dst = self.slot(&mut grads, *bias);
                        for row in g.chunks_exact(outputs) {
                            for (d, v) in dst.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    cols,
                } => {
                    let x = self.value(*input);
                    let k = self.value(*kernels);
                    let [batch, channels, height, width] =
                        [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                    let out_ch = k.shape()[0];
                    let plane = height * width;
                    let col_len = channels * 9 * plane;
                    let geom = ConvGeom {
                        channels,
                        height,
                        width,
                    };
                    if let (true, Some(cols)) = (self.requires_grad(*kernels), cols) {
                        let dst = self.slot(&mut grads, *kernels);
                        for s in 0..batch {
                            gemm(
                                out_ch,
                                plane,
                                channels * 9,
                                &g[s * out_ch * plane..(s + 1) * out_ch * plane],
                                false,
                                &cols[s * col_len..(s + 1) * col_len],
                                true,
                                dst,
                                1.0,
                            );
                        }
                    }
                    if self.requires_grad(*bias) {
                        let dst = self.slot(&mut grads, *bias);
                        for (i, row) in g.chunks_exact(plane).enumerate() {
                            dst[i % out_ch] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
                        }
                    }
                    if self.requires_grad(*input) {
                        let mut dcols = vec![0.0f32; col_len];
                        let in_stride = channels * plane;
                        let dst = self.slot(&mut grads, *input);
                        for s in 0..batch {
                            gemm(
                                channels * 9,
                                out_ch,
                                plane,
                                k.data(),
                                true,
                                &g[s * out_ch * plane..(s + 1) * out_ch * plane],
                                false,
                                &mut dcols,
                                0.0,
                            );
                            col2im(&dcols, geom, &mut dst[s * in_stride..(s + 1) * in_stride]);
                        }
                    }
                }
                Op::Relu(input) => {
                    if self.requires_grad(*input) {
                        let out = node.value.data();
                        let dst = self.slot(&mut grads, *input);
                        for ((d, &gv), &o) in dst.iter_mut().zip(&g).zip(out) {
                            if o > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    if self.requires_grad(*input) {
                        let dst = self.slot(&mut grads, *input);
                        for (&idx, &gv) in argmax.iter().zip(&g) {
                            dst[idx as usize] += gv;
                        }
                    }
                }
                Op::Flatten(input) => {
                    if self.requires_grad(*input) {
                        let dst = self.slot(&mut grads, *input);
                        for (d, gv) in dst.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::UnitPool(input) => {
                    if self.requires_grad(*input) {
                        let x_shape = self.value(*input).shape().to_vec();
                        let dst = self.slot(&mut grads, *input);
                        if x_shape.len() == 2 {
                            for (d, gv) in dst.iter_mut().zip(&g) {
                                *d += gv;
                            }
                        } else {
                            let plane = x_shape[2] * x_shape[3];
                            let inv = 1.0 / plane as f32;
                            for (chunk, &gv) in dst.chunks_exact_mut(plane).zip(&g) {
                                let share = gv * inv;
                                for d in chunk {
                                    *d += share;
                                }
                            }
                        }
                    }
                }
                Op::ChannelMask { input, keep } => {
                    if self.requires_grad(*input) {
                        let shape = self.value(*input).shape().to_vec();
                        let inner: usize = shape[2..].iter().product();
                        let dst = self.slot(&mut grads, *input);
                        for (i, (dchunk, gchunk)) in dst
                            .chunks_exact_mut(inner)
                            .zip(g.chunks_exact(inner))
                            .enumerate()
                        {
                            let m = keep[i % keep.len()];
                            for (d, gv) in dchunk.iter_mut().zip(gchunk) {
                                *d += gv * m;
                            }
                        }
                    }
                }
                Op::WeightedSum { input, coeffs } => {
                    if self.requires_grad(*input) {
                        let upstream = g[0] as f64;
                        let dst = self.slot(&mut grads, *input);
                        for row in dst.chunks_exact_mut(coeffs.len()) {
                            for (d, c) in row.iter_mut().zip(coeffs) {
                                *d += (upstream * c) as f32;
                            }
                        }
                    }
                }
                Op::Sum(input) => {
                    if self.requires_grad(*input) {
                        let upstream = g[0];
                        let dst = self.slot(&mut grads, *input);
                        for d in dst {
                            *d += upstream;
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if self.requires_grad(*input) {
                        let dst = self.slot(&mut grads, *input);
                        for (d, gv) in dst.iter_mut().zip(&g) {
                            *d += gv * factor;
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    if self.requires_grad(*logits) {
                        let classes = self.value(*logits).shape()[1];
                        let scale = g[0] as f64 / labels.len() as f64;
                        let dst = self.slot(&mut grads, *logits);
                        for (b, &label) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let target = if c == label { 1.0 } else { 0.0 };
                                dst[b * classes + c] +=
                                    ((probs[b * classes + c] - target) * scale) as f32;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], id: NodeId) -> &'g mut [f32] {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
}

/// Unfolds one `[C,H,W]` sample into `[C*9, H*W]` patch columns.
fn im2col(src: &[f32], geom: ConvGeom, cols: &mut [f32]) {
    let ConvGeom {
        channels,
        height,
        width,
    } = geom;
    let plane = height * width;
    for c in 0..channels {
        let channel = &src[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * plane..][..plane];
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * width..(y + 1) * width];
                    if sy < 0 || sy >= height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &channel[sy as usize * width..(sy as usize + 1) * width];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src_row[..width - 1]);
                        }
                        1 => dst.copy_from_slice(src_row),
                        _ => {
                            dst[..width - 1].copy_from_slice(&src_row[1..]);
                            dst[width - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `dst`.
fn col2im(cols: &[f32], geom: ConvGeom, dst: &mut [f32]) {
    let ConvGeom {
        channels,
        height,
        width,
    } = geom;
    let plane = height * width;
    for c in 0..channels {
        let channel = &mut dst[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * plane..][..plane];
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let src = &row[y * width..(y + 1) * width];
                    let out = &mut channel[sy as usize * width..(sy as usize + 1) * width];
                    match kx {
                        0 => {
                            for (o, v) in out[..width - 1].iter_mut().zip(&src[1..]) {
                                *o += v;
                            }
                        }
                        1 => {
                            for (o, v) in out.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        _ => {
                            for (o, v) in out[1..].iter_mut().zip(&src[..width - 1]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major operands. `a` is `m x k`
/// (stored `k x m` when `a_t`), `b` is `k x n` (stored `n x k` when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]), false);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.leaf(t(&[3, 3], &eye), false);
        let b = g.leaf(Tensor::zeros(&[3]), false);
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn dense_hand_arithmetic() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = g.leaf(t(&[2, 1], &[3.0, 4.0]), false);
        let b = g.leaf(t(&[1], &[5.0]), false);
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[16.0]);
    }

    #[test]
    fn dense_input_gradient_with_identity_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[0.3, -0.7, 2.0, 1.0]), true);
        let w = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.dense(x, w, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn dense_rejects_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3]), false);
        let w = g.leaf(Tensor::zeros(&[2, 4]), false);
        let b = g.leaf(Tensor::zeros(&[4]), false);
        let err = g.dense(x, w, b).unwrap_err();
        assert!(err.to_string().contains("[1, 3]"), "{err}");
    }

    #[test]
    fn conv_delta_kernel_sums_channels() {
        let input: Vec<f32> = (0..2 * 16).map(|i| i as f32 * 0.25 - 3.0).collect();
        let mut kernel = vec![0.0f32; 2 * 9];
        kernel[4] = 1.0;
        kernel[9 + 4] = 1.0;
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 4, 4], &input), false);
        let k = g.leaf(t(&[1, 2, 3, 3], &kernel), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv2d(x, k, b).unwrap();
        let expected: Vec<f32> = (0..16).map(|i| input[i] + input[16 + i]).collect();
        assert_eq!(g.value(y).data(), &expected[..]);
    }

    #[test]
    fn conv_ones_hand_oracle() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3, 5, 4], 0.7), false);
        let k = g.leaf(Tensor::zeros(&[2, 3, 3, 3]), false);
        let b = g.leaf(t(&[2], &[1.5, -0.25]), false);
        let y = g.conv2d(x, k, b).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 2, 5, 4]);
        for (i, chunk) in v.data().chunks(20).enumerate() {
            let beta = if i % 2 == 0 { 1.5 } else { -0.25 };
            assert!(chunk.iter().all(|&c| c == beta));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let k = g.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        assert!(matches!(g.conv2d(x, k, b), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]), true);
        let y = g.relu(x);
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[0.1, 3.0, 7.5, 1e-3]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn softmax_xent_uniform_and_stable() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[1, 10]), false);
        let l = g.softmax_xent(z, &[3]).unwrap();
        assert!((g.scalar(l) - 10f64.ln()).abs() < 1e-12);

        let z = g.leaf(t(&[1, 2], &[1000.0, 0.0]), true);
        let l = g.softmax_xent(z, &[0]).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(z).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_xent_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(
            g.softmax_xent(z, &[0, 3]),
            Err(Error::LabelOutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(
            t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 2.0, 3.0, 0.0, 2.0, 1.0]),
            true,
        );
        let p = g.max_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 2.0]);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(x).unwrap(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn unit_pool_is_spatial_mean() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 2.0]), false);
        let p = g.unit_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0]);
    }
}
