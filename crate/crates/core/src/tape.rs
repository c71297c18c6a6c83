//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; node inputs
//! always point at earlier indices, so the insertion order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep. The
//! tape is meant to live for exactly one training step: bind parameters as
//! gradient leaves, build the loss, call `backward`, read gradients out,
//! drop the tape.
//!
//! Repeated `backward` calls accumulate into node gradients (each sweep
//! propagates through private scratch buffers before being added), matching
//! the usual accumulate-until-reset contract.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, usage_err, validation_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, f64),
    /// `[m,k] @ [k,n] -> [m,n]`
    Matmul(NodeId, NodeId),
    /// `[m,n] + [n]` with the row broadcast over `m`.
    AddRow(NodeId, NodeId),
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        input: NodeId,
        /// Flat input index of the (first) maximum for every output element.
        argmax: Vec<usize>,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    Dropout {
        input: NodeId,
        /// Per-element factor: either `0` or `1/(1-rate)`.
        mask: Vec<f64>,
    },
    /// Columns `[start, start+len)` of a 2-D tensor.
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    /// Time step `index` of a `[batch, channels, time]` tensor.
    SliceTime {
        input: NodeId,
        index: usize,
    },
    Reshape(NodeId),
    /// Linear interpolation of each row of a `[batch, d]` tensor to `out_len`.
    UpsampleLinear(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    WeightedCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    BceLoss {
        probs: NodeId,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Probabilities fed to the BCE loss are clamped this far away from {0, 1}.
pub const BCE_CLAMP: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Insert a tensor as a graph input. Gradients are collected for it only
    /// when `requires_grad` is true.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite tensor entered the tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Elementwise and linear algebra ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data: Vec<f64> = va.iter().zip(vb.iter()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        let req = self.requires(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("mul: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data: Vec<f64> = va.iter().zip(vb.iter()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        let req = self.requires(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), req))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.iter().map(|x| x * s).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let req = self.requires(&[a]);
        self.push(value, Op::MulScalar(a, s), req)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            return Err(shape_err!(
                "matmul wants 2-D operands, got {:?} @ {:?}",
                va.shape(),
                vb.shape()
            ));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dims: {k} vs {k2}"));
        }
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let crow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let req = self.requires(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), req))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (vm, vr) = (self.value(m), self.value(row));
        let (&[rows, cols], &[len]) = (vm.shape(), vr.shape()) else {
            return Err(shape_err!(
                "add_row wants [m,n] + [n], got {:?} + {:?}",
                vm.shape(),
                vr.shape()
            ));
        };
        if cols != len {
            return Err(shape_err!("add_row width {cols} vs row {len}"));
        }
        let mut data = vm.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vr.data()[c];
            }
        }
        let value = Tensor::new(&[rows, cols], data)?;
        let req = self.requires(&[m, row]);
        Ok(self.push(value, Op::AddRow(m, row), req))
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    /// 1-D cross-correlation: `[batch, in_c, len] * [out_c, in_c, k] + [out_c]`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (vi, vk, vb) = (self.value(input), self.value(kernel), self.value(bias));
        let (&[batch, in_c, len], &[out_c, kin_c, k], &[blen]) =
            (vi.shape(), vk.shape(), vb.shape())
        else {
            return Err(shape_err!(
                "conv1d wants [b,c,l] input, [o,c,k] kernel, [o] bias; got {:?}, {:?}, {:?}",
                vi.shape(),
                vk.shape(),
                vb.shape()
            ));
        };
        if in_c != kin_c {
            return Err(shape_err!("conv1d channels: input {in_c} vs kernel {kin_c}"));
        }
        if blen != out_c {
            return Err(shape_err!("conv1d bias {blen} vs {out_c} filters"));
        }
        if stride == 0 {
            return Err(validation_err!("conv1d stride must be positive"));
        }
        if len + 2 * padding < k {
            return Err(shape_err!(
                "conv1d: padded length {} shorter than kernel {k}",
                len + 2 * padding
            ));
        }
        let out_len = (len + 2 * padding - k) / stride + 1;
        let (di, dk, db) = (vi.data(), vk.data(), vb.data());
        let mut out = vec![0.0; batch * out_c * out_len];
        for b in 0..batch {
            for o in 0..out_c {
                let orow = &mut out[(b * out_c + o) * out_len..(b * out_c + o + 1) * out_len];
                for v in orow.iter_mut() {
                    *v = db[o];
                }
                for c in 0..in_c {
                    let xrow = &di[(b * in_c + c) * len..(b * in_c + c + 1) * len];
                    let krow = &dk[(o * in_c + c) * k..(o * in_c + c + 1) * k];
                    for j in 0..out_len {
                        let mut acc = 0.0;
                        let base = j * stride;
                        for t in 0..k {
                            let src = base + t;
                            if src >= padding && src - padding < len {
                                acc += krow[t] * xrow[src - padding];
                            }
                        }
                        orow[j] += acc;
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, out_c, out_len], out)?;
        let req = self.requires(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            req,
        ))
    }

    /// Max pooling over the last axis. Gradient flows to the first maximal
    /// element of each window.
    pub fn maxpool1d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let vi = self.value(input);
        let shape = vi.shape().to_vec();
        let Some(&len) = shape.last() else {
            return Err(shape_err!("maxpool1d on a scalar"));
        };
        if window == 0 || stride == 0 {
            return Err(validation_err!("maxpool1d window/stride must be positive"));
        }
        if window > len {
            return Err(shape_err!("maxpool1d window {window} > length {len}"));
        }
        let out_len = (len - window) / stride + 1;
        let lanes = vi.numel() / len;
        let data = vi.data();
        let mut out = vec![0.0; lanes * out_len];
        let mut argmax = vec![0usize; lanes * out_len];
        for lane in 0..lanes {
            let row = &data[lane * len..(lane + 1) * len];
            for j in 0..out_len {
                let base = j * stride;
                let mut best = row[base];
                let mut best_at = base;
                for t in 1..window {
                    if row[base + t] > best {
                        best = row[base + t];
                        best_at = base + t;
                    }
                }
                out[lane * out_len + j] = best;
                argmax[lane * out_len + j] = lane * len + best_at;
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(&out_shape, out)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::MaxPool1d { input, argmax }, req))
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(validation_err!("leaky_relu slope {slope} outside (0,1)"));
        }
        let vi = self.value(input);
        let data: Vec<f64> = vi.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let value = Tensor::new(vi.shape(), data)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::LeakyRelu { input, slope }, req))
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let vi = self.value(input);
        let data: Vec<f64> = vi.iter().map(|&x| math::tanh(x)).collect();
        let value = Tensor::new(vi.shape(), data).expect("same shape");
        let req = self.requires(&[input]);
        self.push(value, Op::Tanh(input), req)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let vi = self.value(input);
        let data: Vec<f64> = vi.iter().map(|&x| math::sigmoid(x)).collect();
        let value = Tensor::new(vi.shape(), data).expect("same shape");
        let req = self.requires(&[input]);
        self.push(value, Op::Sigmoid(input), req)
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let vi = self.value(input);
        let shape = vi.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} for shape {:?}", shape));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = vi.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * lane + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..lane {
                    m = m.max(src[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..lane {
                    let e = math::exp(src[at(j)] - m);
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..lane {
                    out[at(j)] /= denom;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::Softmax { input, axis }, req))
    }

    /// Inverted dropout. Inference mode (or rate 0) returns the input node
    /// unchanged, so that path is bit-identical to the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(validation_err!("dropout rate {rate} outside [0,1)"));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let vi = self.value(input);
        let mask: Vec<f64> = (0..vi.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = vi.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(vi.shape(), data)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, req))
    }

    // ── Shape plumbing ──────────────────────────────────────────────────

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vi = self.value(input);
        let &[rows, cols] = vi.shape() else {
            return Err(shape_err!("slice_cols wants 2-D, got {:?}", vi.shape()));
        };
        if start + len > cols {
            return Err(shape_err!("slice_cols {start}+{len} > {cols}"));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vi.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(&[rows, len], data)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::SliceCols { input, start, len }, req))
    }

    /// `[batch, channels, time]` at one time index -> `[batch, channels]`.
    pub fn slice_time(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let vi = self.value(input);
        let &[batch, channels, time] = vi.shape() else {
            return Err(shape_err!("slice_time wants 3-D, got {:?}", vi.shape()));
        };
        if index >= time {
            return Err(shape_err!("slice_time index {index} >= {time}"));
        }
        let mut data = Vec::with_capacity(batch * channels);
        for b in 0..batch {
            for c in 0..channels {
                data.push(vi.data()[(b * channels + c) * time + index]);
            }
        }
        let value = Tensor::new(&[batch, channels], data)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::SliceTime { input, index }, req))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::Reshape(input), req))
    }

    /// Stretch each row of a `[batch, d]` tensor to `out_len` samples by
    /// linear interpolation.
    pub fn upsample_linear(&mut self, input: NodeId, out_len: usize) -> Result<NodeId> {
        let vi = self.value(input);
        let &[batch, d] = vi.shape() else {
            return Err(shape_err!("upsample_linear wants 2-D, got {:?}", vi.shape()));
        };
        if d == 0 || out_len == 0 {
            return Err(shape_err!("upsample_linear with empty extent"));
        }
        let mut data = Vec::with_capacity(batch * out_len);
        for b in 0..batch {
            let row = &vi.data()[b * d..(b + 1) * d];
            for j in 0..out_len {
                let (lo, hi, w) = lerp_coords(d, out_len, j);
                data.push((1.0 - w) * row[lo] + w * row[hi]);
            }
        }
        let value = Tensor::new(&[batch, out_len], data)?;
        let req = self.requires(&[input]);
        Ok(self.push(value, Op::UpsampleLinear(input), req))
    }

    // ── Reductions and losses ───────────────────────────────────────────

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.value(input).iter().sum();
        let req = self.requires(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), req)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let vi = self.value(input);
        let total: f64 = vi.iter().sum();
        let n = vi.numel().max(1) as f64;
        let req = self.requires(&[input]);
        self.push(Tensor::scalar(total / n), Op::Mean(input), req)
    }

    /// Mean over the batch of `w[y] * (-log softmax(logits)[y])`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let &[batch, classes] = vl.shape() else {
            return Err(shape_err!(
                "weighted_cross_entropy wants [batch, classes], got {:?}",
                vl.shape()
            ));
        };
        if labels.len() != batch {
            return Err(shape_err!("{} labels for batch {batch}", labels.len()));
        }
        if weights.len() != classes {
            return Err(shape_err!("{} weights for {classes} classes", weights.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(validation_err!("label {bad} out of range 0..{classes}"));
        }
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &vl.data()[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = math::ln(row.iter().map(|&v| math::exp(v - m)).sum::<f64>());
            total += weights[y] * (lse - (row[y] - m));
        }
        let value = Tensor::scalar(total / batch as f64);
        let req = self.requires(&[logits]);
        Ok(self.push(
            value,
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            req,
        ))
    }

    /// Mean of `-[t·log p + (1-t)·log(1-p)]` with `p` clamped away from {0,1}.
    pub fn bce_loss(&mut self, probs: NodeId, targets: &Tensor) -> Result<NodeId> {
        let vp = self.value(probs);
        if vp.shape() != targets.shape() {
            return Err(shape_err!(
                "bce_loss: probs {:?} vs targets {:?}",
                vp.shape(),
                targets.shape()
            ));
        }
        let n = vp.numel().max(1) as f64;
        let mut total = 0.0;
        for (&p, &t) in vp.iter().zip(targets.iter()) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= t * math::ln(p) + (1.0 - t) * math::ln(1.0 - p);
        }
        let value = Tensor::scalar(total / n);
        let req = self.requires(&[probs]);
        Ok(self.push(
            value,
            Op::BceLoss {
                probs,
                targets: targets.data().to_vec(),
            },
            req,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every reachable node
    /// with `requires_grad` are accumulated (repeat calls add up).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(usage_err!(
                "backward on non-scalar of shape {:?}",
                self.shape(loss)
            ));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = scratch[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut scratch);
            // Keep the node's own contribution for the final accumulate.
            scratch[id] = Some(gout);
        }

        for (node, got) in self.nodes.iter_mut().zip(scratch.into_iter()) {
            if let (true, Some(g)) = (node.requires_grad, got) {
                let grad = node
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.value.numel()]);
                for (dst, src) in grad.iter_mut().zip(g.iter()) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, gout: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        // Accumulate `add` into the scratch gradient of `target`, skipping
        // nodes that cannot receive gradients.
        macro_rules! sink {
            ($target:expr, $add:expr) => {{
                let t: NodeId = $target;
                if self.nodes[t.0].requires_grad {
                    let buf = scratch[t.0]
                        .get_or_insert_with(|| vec![0.0; self.nodes[t.0].value.numel()]);
                    $add(buf);
                }
            }};
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink!(*a, |buf: &mut Vec<f64>| add_into(buf, gout));
                sink!(*b, |buf: &mut Vec<f64>| add_into(buf, gout));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                sink!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * vb[i];
                    }
                });
                sink!(*b, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * va[i];
                    }
                });
            }
            Op::MulScalar(a, s) => {
                sink!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * s;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (da, db) = (va.data(), vb.data());
                sink!(*a, |buf: &mut Vec<f64>| {
                    // dA = G @ B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i * n + j] * db[p * n + j];
                            }
                            buf[i * k + p] += acc;
                        }
                    }
                });
                sink!(*b, |buf: &mut Vec<f64>| {
                    // dB = A^T @ G
                    for i in 0..m {
                        for p in 0..k {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[p * n + j] += aip * gout[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::AddRow(mt, row) => {
                let cols = self.nodes[row.0].value.numel();
                sink!(*mt, |buf: &mut Vec<f64>| add_into(buf, gout));
                sink!(*row, |buf: &mut Vec<f64>| {
                    for (i, g) in gout.iter().enumerate() {
                        buf[i % cols] += g;
                    }
                });
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let vi = &self.nodes[input.0].value;
                let vk = &self.nodes[kernel.0].value;
                let (batch, in_c, len) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                let (out_c, k) = (vk.shape()[0], vk.shape()[2]);
                let out_len = node.value.shape()[2];
                let (di, dk) = (vi.data(), vk.data());
                sink!(*bias, |buf: &mut Vec<f64>| {
                    for b in 0..batch {
                        for o in 0..out_c {
                            let g = &gout[(b * out_c + o) * out_len..(b * out_c + o + 1) * out_len];
                            buf[o] += g.iter().sum::<f64>();
                        }
                    }
                });
                sink!(*kernel, |buf: &mut Vec<f64>| {
                    for b in 0..batch {
                        for o in 0..out_c {
                            let g = &gout[(b * out_c + o) * out_len..(b * out_c + o + 1) * out_len];
                            for c in 0..in_c {
                                let xrow = &di[(b * in_c + c) * len..(b * in_c + c + 1) * len];
                                let krow = &mut buf[(o * in_c + c) * k..(o * in_c + c + 1) * k];
                                for j in 0..out_len {
                                    let base = j * stride;
                                    for t in 0..k {
                                        let src = base + t;
                                        if src >= *padding && src - padding < len {
                                            krow[t] += g[j] * xrow[src - padding];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                sink!(*input, |buf: &mut Vec<f64>| {
                    for b in 0..batch {
                        for o in 0..out_c {
                            let g = &gout[(b * out_c + o) * out_len..(b * out_c + o + 1) * out_len];
                            for c in 0..in_c {
                                let krow = &dk[(o * in_c + c) * k..(o * in_c + c + 1) * k];
                                let xg = &mut buf[(b * in_c + c) * len..(b * in_c + c + 1) * len];
                                for j in 0..out_len {
                                    let base = j * stride;
                                    for t in 0..k {
                                        let src = base + t;
                                        if src >= *padding && src - padding < len {
                                            xg[src - padding] += g[j] * krow[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool1d { input, argmax } => {
                sink!(*input, |buf: &mut Vec<f64>| {
                    for (g, &src) in gout.iter().zip(argmax.iter()) {
                        buf[src] += g;
                    }
                });
            }
            Op::LeakyRelu { input, slope } => {
                let vi = self.nodes[input.0].value.data();
                sink!(*input, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * if vi[i] > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::Tanh(input) => {
                let y = node.value.data();
                sink!(*input, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                sink!(*input, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let lane = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                sink!(*input, |buf: &mut Vec<f64>| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * lane + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..lane {
                                dot += gout[at(j)] * y[at(j)];
                            }
                            for j in 0..lane {
                                buf[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                sink!(*input, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * mask[i];
                    }
                });
            }
            Op::SliceCols { input, start, len } => {
                let cols = self.nodes[input.0].value.shape()[1];
                let rows = self.nodes[input.0].value.shape()[0];
                sink!(*input, |buf: &mut Vec<f64>| {
                    for r in 0..rows {
                        for c in 0..*len {
                            buf[r * cols + start + c] += gout[r * len + c];
                        }
                    }
                });
            }
            Op::SliceTime { input, index } => {
                let vi = &self.nodes[input.0].value;
                let (batch, channels, time) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                sink!(*input, |buf: &mut Vec<f64>| {
                    for b in 0..batch {
                        for c in 0..channels {
                            buf[(b * channels + c) * time + index] += gout[b * channels + c];
                        }
                    }
                });
            }
            Op::Reshape(input) => {
                sink!(*input, |buf: &mut Vec<f64>| add_into(buf, gout));
            }
            Op::UpsampleLinear(input) => {
                let vi = &self.nodes[input.0].value;
                let (batch, d) = (vi.shape()[0], vi.shape()[1]);
                let out_len = node.value.shape()[1];
                sink!(*input, |buf: &mut Vec<f64>| {
                    for b in 0..batch {
                        for j in 0..out_len {
                            let (lo, hi, w) = lerp_coords(d, out_len, j);
                            let g = gout[b * out_len + j];
                            buf[b * d + lo] += (1.0 - w) * g;
                            buf[b * d + hi] += w * g;
                        }
                    }
                });
            }
            Op::Sum(input) => {
                sink!(*input, |buf: &mut Vec<f64>| {
                    for v in buf.iter_mut() {
                        *v += gout[0];
                    }
                });
            }
            Op::Mean(input) => {
                let n = self.nodes[input.0].value.numel().max(1) as f64;
                sink!(*input, |buf: &mut Vec<f64>| {
                    for v in buf.iter_mut() {
                        *v += gout[0] / n;
                    }
                });
            }
            Op::WeightedCrossEntropy {
                logits,
                labels,
                weights,
            } => {
                let vl = &self.nodes[logits.0].value;
                let (batch, classes) = (vl.shape()[0], vl.shape()[1]);
                let dl = vl.data();
                sink!(*logits, |buf: &mut Vec<f64>| {
                    for (b, &y) in labels.iter().enumerate() {
                        let row = &dl[b * classes..(b + 1) * classes];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| math::exp(v - m)).sum();
                        let scale = gout[0] * weights[y] / batch as f64;
                        for j in 0..classes {
                            let p = math::exp(row[j] - m) / denom;
                            let delta = if j == y { 1.0 } else { 0.0 };
                            buf[b * classes + j] += scale * (p - delta);
                        }
                    }
                });
            }
            Op::BceLoss { probs, targets } => {
                let vp = self.nodes[probs.0].value.data();
                let n = vp.len().max(1) as f64;
                sink!(*probs, |buf: &mut Vec<f64>| {
                    for i in 0..buf.len() {
                        let p = vp[i];
                        // Zero gradient where the clamp is active.
                        if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                            buf[i] += gout[0] * (p - targets[i]) / (p * (1.0 - p)) / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// Interpolation coordinates mapping output index `j` of `out_len` back onto
/// a source row of `d` samples: `(lo, hi, weight-on-hi)`.
fn lerp_coords(d: usize, out_len: usize, j: usize) -> (usize, usize, f64) {
    if d == 1 || out_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = j as f64 * (d - 1) as f64 / (out_len - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(d - 1);
    (lo, hi, pos - lo as f64)
}
