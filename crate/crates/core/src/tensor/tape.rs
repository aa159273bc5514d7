//! Wengert tape: operations recorded during the forward pass are replayed in
//! reverse to produce gradients.
//!
//! Leaves enter via [`Tape::var`] (gradient wanted) or [`Tape::constant`].
//! A node propagates gradient into an input only when that input's subgraph
//! contains a `var`, so e.g. gate-only training never pays for weight
//! gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{conv2d_backward, conv2d_im2col, matmul_a_bt, matmul_at_b, matmul_raw};
use super::Tensor;
use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

const BCE_CLAMP: f64 = 1e-7;

/// Rectifier backward-pass convention. Forward is identical under all rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardRule {
    /// g * 1[x > 0]
    Standard,
    /// g * 1[g > 0]
    Deconv,
    /// g * 1[g > 0] * 1[x > 0]
    Guided,
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Abs(usize),
    Matmul(usize, usize),
    BiasAdd(usize, usize),
    ChannelMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2x2 {
        x: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Mean(usize),
    Sum(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    Column {
        x: usize,
        col: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    BceWithLogits {
        student: usize,
        teacher_probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive operations for one differentiable computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Leaf whose gradient will be computed.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf treated as a constant; backward skips its subtree.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        assert_eq!(id.tape, self.id, "node from a different tape");
        &self.nodes[id.index].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite tensor produced by {op:?}");
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn fetch(&self, id: NodeId) -> Result<&Node> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::DetachedNode);
        }
        Ok(&self.nodes[id.index])
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<NodeId> {
        let (na, nb) = (self.fetch(a)?, self.fetch(b)?);
        if na.value.shape() != nb.value.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let data = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(na.value.shape(), data)?;
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(value, rg, op(a.index, b.index)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let na = self.fetch(a)?;
        let value = na.value.map(|v| v * factor);
        let rg = na.requires_grad;
        Ok(self.push(value, rg, Op::Scale(a.index, factor)))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.fetch(a)?;
        let value = na.value.map(f64::abs);
        let rg = na.requires_grad;
        Ok(self.push(value, rg, Op::Abs(a.index)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.fetch(a)?;
        let value = na.value.map(|v| v.max(0.0));
        let rg = na.requires_grad;
        Ok(self.push(value, rg, Op::Relu(a.index)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.fetch(a)?;
        let value = na.value.map(sigmoid);
        let rg = na.requires_grad;
        Ok(self.push(value, rg, Op::Sigmoid(a.index)))
    }

    /// Row-wise softmax over a [n, k] tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.fetch(a)?;
        let (n, k) = na.value.dims2()?;
        let mut data = na.value.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_row(row);
        }
        let value = Tensor::from_vec(&[n, k], data)?;
        let rg = na.requires_grad;
        Ok(self.push(value, rg, Op::Softmax(a.index)))
    }

    /// Full reduction to a scalar (shape [1]).
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.fetch(a)?;
        let s: f64 = na.value.data().iter().sum();
        let rg = na.requires_grad;
        Ok(self.push(Tensor::scalar_value(s), rg, Op::Sum(a.index)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.fetch(a)?;
        if na.value.numel() == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: na.value.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let s: f64 = na.value.data().iter().sum::<f64>() / na.value.numel() as f64;
        let rg = na.requires_grad;
        Ok(self.push(Tensor::scalar_value(s), rg, Op::Mean(a.index)))
    }

    /// [m, k] x [k, n] -> [m, n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (self.fetch(a)?, self.fetch(b)?);
        let (m, ka) = na.value.dims2()?;
        let (kb, n) = nb.value.dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let data = matmul_raw(na.value.data(), nb.value.data(), m, ka, n);
        let value = Tensor::from_vec(&[m, n], data)?;
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(value, rg, Op::Matmul(a.index, b.index)))
    }

    /// Adds a bias vector along the channel axis of a [n,c,h,w] tensor or
    /// the feature axis of a [n,f] tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (nx, nb) = (self.fetch(x)?, self.fetch(bias)?);
        let blen = nb.value.numel();
        let ok = match nx.value.shape() {
            [_, c, _, _] => *c == blen,
            [_, f] => *f == blen,
            _ => false,
        };
        if !ok || nb.value.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: nx.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let value = apply_channelwise(&nx.value, nb.value.data(), |v, b| v + b);
        let rg = nx.requires_grad || nb.requires_grad;
        Ok(self.push(value, rg, Op::BiasAdd(x.index, bias.index)))
    }

    /// Multiplies each channel (4d) or feature (2d) by a gate value.
    pub fn channel_mul(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (nx, ng) = (self.fetch(x)?, self.fetch(gate)?);
        let glen = ng.value.numel();
        let ok = match nx.value.shape() {
            [_, c, _, _] => *c == glen,
            [_, f] => *f == glen,
            _ => false,
        };
        if !ok || ng.value.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "channel_mul",
                lhs: nx.value.shape().to_vec(),
                rhs: ng.value.shape().to_vec(),
            });
        }
        let value = apply_channelwise(&nx.value, ng.value.data(), |v, g| v * g);
        let rg = nx.requires_grad || ng.requires_grad;
        Ok(self.push(value, rg, Op::ChannelMul(x.index, gate.index)))
    }

    /// 2d convolution, input [n,c,h,w], weight [k,c,kh,kw]. Stride and
    /// padding are validated as attributes (stride >= 1, pad >= 0).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: i64, pad: i64) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::AttrOutOfRange {
                op: "conv2d",
                attr: "stride",
                value: stride,
            });
        }
        if pad < 0 {
            return Err(Error::AttrOutOfRange {
                op: "conv2d",
                attr: "padding",
                value: pad,
            });
        }
        let (stride, pad) = (stride as usize, pad as usize);
        let (nx, nw) = (self.fetch(x)?, self.fetch(w)?);
        let (_, c, h, wd) = nx.value.dims4().map_err(|_| Error::ShapeMismatch {
            op: "conv2d",
            lhs: nx.value.shape().to_vec(),
            rhs: nw.value.shape().to_vec(),
        })?;
        let (_, ck, kh, kw) = nw.value.dims4().map_err(|_| Error::ShapeMismatch {
            op: "conv2d",
            lhs: nx.value.shape().to_vec(),
            rhs: nw.value.shape().to_vec(),
        })?;
        if ck != c || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: nx.value.shape().to_vec(),
                rhs: nw.value.shape().to_vec(),
            });
        }
        let value = conv2d_im2col(&nx.value, &nw.value, stride, pad);
        let rg = nx.requires_grad || nw.requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x: x.index,
                w: w.index,
                stride,
                pad,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let nx = self.fetch(x)?;
        let (n, c, h, w) = nx.value.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool2x2",
                shape: nx.value.shape().to_vec(),
                reason: "spatial dims must be even".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = nx.value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &xd[nc * h * w..(nc + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (oi * 2 + di) * w + (oj * 2 + dj);
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(nc * oh + oi) * ow + oj] = best;
                    argmax[(nc * oh + oi) * ow + oj] = nc * h * w + best_idx;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = nx.requires_grad;
        Ok(self.push(value, rg, Op::MaxPool2x2 { x: x.index, argmax }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let nx = self.fetch(x)?;
        let value = nx.value.reshaped(shape)?;
        let rg = nx.requires_grad;
        Ok(self.push(value, rg, Op::Reshape(x.index)))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidParam("concat of zero tensors".into()));
        }
        let first = self.fetch(inputs[0])?.value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::AttrOutOfRange {
                op: "concat",
                attr: "axis",
                value: axis as i64,
            });
        }
        let mut axis_total = 0;
        let mut rg = false;
        for &id in inputs {
            let node = self.fetch(id)?;
            let s = node.value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
            rg |= node.requires_grad;
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let t = &self.nodes[id.index].value;
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                inputs: inputs.iter().map(|id| id.index).collect(),
                axis,
            },
        ))
    }

    /// Select one column of a [n, k] tensor, yielding shape [n].
    pub fn column(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let nx = self.fetch(x)?;
        let (n, k) = nx.value.dims2()?;
        if col >= k {
            return Err(Error::AttrOutOfRange {
                op: "column",
                attr: "col",
                value: col as i64,
            });
        }
        let data: Vec<f64> = (0..n).map(|i| nx.value.data()[i * k + col]).collect();
        let value = Tensor::from_vec(&[n], data)?;
        let rg = nx.requires_grad;
        Ok(self.push(value, rg, Op::Column { x: x.index, col }))
    }

    /// Mean softmax cross-entropy over a batch of logits [n, k].
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let nl = self.fetch(logits)?;
        let (n, k) = nl.value.dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: nl.value.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= k {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: k,
                });
            }
        }
        let mut loss = 0.0;
        for (row, &y) in nl.value.data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= n as f64;
        let rg = nl.requires_grad;
        Ok(self.push(
            Tensor::scalar_value(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean binary cross entropy between fixed teacher probabilities and
    /// sigmoid(student logits), probabilities clamped to [1e-7, 1-1e-7].
    pub fn bce_with_logits(&mut self, student: NodeId, teacher_probs: &[f64]) -> Result<NodeId> {
        let ns = self.fetch(student)?;
        if ns.value.shape().len() != 1 || ns.value.numel() != teacher_probs.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: ns.value.shape().to_vec(),
                rhs: vec![teacher_probs.len()],
            });
        }
        let n = teacher_probs.len();
        let mut loss = 0.0;
        for (&s, &a) in ns.value.data().iter().zip(teacher_probs) {
            loss += bce(a, sigmoid(s));
        }
        loss /= n as f64;
        let rg = ns.requires_grad;
        Ok(self.push(
            Tensor::scalar_value(loss),
            rg,
            Op::BceWithLogits {
                student: student.index,
                teacher_probs: teacher_probs.to_vec(),
            },
        ))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_with_rule(loss, BackwardRule::Standard)
    }

    /// Reverse sweep from a scalar loss. The rule applies to every rectifier
    /// node on the tape for this pass.
    pub fn backward_with_rule(&self, loss: NodeId, rule: BackwardRule) -> Result<Gradients> {
        let loss_node = self.fetch(loss)?;
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::filled(loss_node.value.shape(), 1.0));
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, rule, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, contribution: Tensor) {
        match &mut grads[idx] {
            Some(t) => {
                debug_assert_eq!(t.shape(), contribution.shape());
                for (d, s) in t.data_mut().iter_mut().zip(contribution.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, rule: BackwardRule, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = &self.nodes[*b].value;
                    self.acc(grads, *a, zip_tensor(g, vb, |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    let va = &self.nodes[*a].value;
                    self.acc(grads, *b, zip_tensor(g, va, |gv, av| gv * av));
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    let f = *f;
                    self.acc(grads, *a, g.map(|v| v * f));
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let va = &self.nodes[*a].value;
                    self.acc(
                        grads,
                        *a,
                        zip_tensor(g, va, |gv, av| {
                            if av > 0.0 {
                                gv
                            } else if av < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        }),
                    );
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let va = &self.nodes[*a].value;
                    let passed = zip_tensor(g, va, |gv, av| match rule {
                        BackwardRule::Standard => {
                            if av > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                        BackwardRule::Deconv => {
                            if gv > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                        BackwardRule::Guided => {
                            if gv > 0.0 && av > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                    });
                    self.acc(grads, *a, passed);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    self.acc(grads, *a, zip_tensor(g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let (n, k) = y.dims2().unwrap();
                    let mut dx = vec![0.0; n * k];
                    for r in 0..n {
                        let yr = &y.data()[r * k..(r + 1) * k];
                        let gr = &g.data()[r * k..(r + 1) * k];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..k {
                            dx[r * k + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(grads, *a, Tensor::from_vec(&[n, k], dx).unwrap());
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let va = &self.nodes[*a].value;
                    let gs = g.data()[0] / va.numel() as f64;
                    self.acc(grads, *a, Tensor::filled(va.shape(), gs));
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let va = &self.nodes[*a].value;
                    self.acc(grads, *a, Tensor::filled(va.shape(), g.data()[0]));
                }
            }
            Op::Matmul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (m, k) = va.dims2().unwrap();
                let (_, n) = vb.dims2().unwrap();
                if self.needs(*a) {
                    let da = matmul_a_bt(g.data(), vb.data(), m, n, k);
                    self.acc(grads, *a, Tensor::from_vec(&[m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let db = matmul_at_b(va.data(), g.data(), m, k, n);
                    self.acc(grads, *b, Tensor::from_vec(&[k, n], db).unwrap());
                }
            }
            Op::BiasAdd(x, b) => {
                if self.needs(*x) {
                    self.acc(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let blen = self.nodes[*b].value.numel();
                    self.acc(grads, *b, reduce_channelwise(g, blen));
                }
            }
            Op::ChannelMul(x, gate) => {
                let vgate = &self.nodes[*gate].value;
                let vx = &self.nodes[*x].value;
                if self.needs(*x) {
                    self.acc(
                        grads,
                        *x,
                        apply_channelwise(g, vgate.data(), |gv, gate| gv * gate),
                    );
                }
                if self.needs(*gate) {
                    let prod = zip_tensor(g, vx, |gv, xv| gv * xv);
                    self.acc(grads, *gate, reduce_channelwise(&prod, vgate.numel()));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let vx = &self.nodes[*x].value;
                let vw = &self.nodes[*w].value;
                let (dx, dw) = conv2d_backward(
                    vx,
                    vw,
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let mut dx = vec![0.0; vx.numel()];
                    for (out_idx, &in_idx) in argmax.iter().enumerate() {
                        dx[in_idx] += g.data()[out_idx];
                    }
                    self.acc(grads, *x, Tensor::from_vec(vx.shape(), dx).unwrap());
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    self.acc(grads, *x, g.reshaped(vx.shape()).unwrap());
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let mut offset = 0;
                for &inp in inputs {
                    let t = &self.nodes[inp].value;
                    let block = t.shape()[*axis] * inner;
                    if self.needs(inp) {
                        let total_block = out_shape[*axis] * inner;
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let start = o * total_block + offset;
                            d.extend_from_slice(&g.data()[start..start + block]);
                        }
                        self.acc(grads, inp, Tensor::from_vec(t.shape(), d).unwrap());
                    }
                    offset += block;
                }
            }
            Op::Column { x, col } => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let (n, k) = vx.dims2().unwrap();
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        dx[i * k + col] = g.data()[i];
                    }
                    self.acc(grads, *x, Tensor::from_vec(&[n, k], dx).unwrap());
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let vl = &self.nodes[*logits].value;
                    let (n, k) = vl.dims2().unwrap();
                    let gs = g.data()[0] / n as f64;
                    let mut dx = vec![0.0; n * k];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &vl.data()[r * k..(r + 1) * k];
                        let mut probs = row.to_vec();
                        softmax_row(&mut probs);
                        for j in 0..k {
                            let delta = if j == y { 1.0 } else { 0.0 };
                            dx[r * k + j] = gs * (probs[j] - delta);
                        }
                    }
                    self.acc(grads, *logits, Tensor::from_vec(&[n, k], dx).unwrap());
                }
            }
            Op::BceWithLogits {
                student,
                teacher_probs,
            } => {
                if self.needs(*student) {
                    let vs = &self.nodes[*student].value;
                    let n = teacher_probs.len();
                    let gs = g.data()[0] / n as f64;
                    let dx: Vec<f64> = vs
                        .data()
                        .iter()
                        .zip(teacher_probs)
                        .map(|(&s, &a)| {
                            let b = sigmoid(s);
                            // clamp active => flat region, zero gradient
                            if b <= BCE_CLAMP || b >= 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                gs * (b - a.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))
                            }
                        })
                        .collect();
                    self.acc(grads, *student, Tensor::from_vec(vs.shape(), dx).unwrap());
                }
            }
        }
    }
}

/// Gradient map produced by one backward pass.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node; `None` when the node
    /// does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        assert_eq!(id.tape, self.tape, "node from a different tape");
        self.grads[id.index].as_ref()
    }

    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy with both probabilities clamped to [1e-7, 1-1e-7].
pub fn bce(a: f64, b: f64) -> f64 {
    let a = a.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let b = b.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -a * b.ln() - (1.0 - a) * (1.0 - b).ln()
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn zip_tensor(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// Applies `f(value, per_channel)` where the channel axis is dim 1 for 4d
/// tensors and dim 1 for 2d tensors.
fn apply_channelwise(x: &Tensor, per_channel: &[f64], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = x.data().to_vec();
    match x.shape() {
        [n, c, h, w] => {
            let plane = h * w;
            for ni in 0..*n {
                for ci in 0..*c {
                    let base = (ni * c + ci) * plane;
                    let pc = per_channel[ci];
                    for v in &mut out[base..base + plane] {
                        *v = f(*v, pc);
                    }
                }
            }
        }
        [n, feat] => {
            for ni in 0..*n {
                for (ci, v) in out[ni * feat..(ni + 1) * feat].iter_mut().enumerate() {
                    *v = f(*v, per_channel[ci]);
                }
            }
        }
        _ => unreachable!("channelwise ops validate rank"),
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

/// Sums over all axes except the channel/feature axis.
fn reduce_channelwise(g: &Tensor, channels: usize) -> Tensor {
    let mut out = vec![0.0; channels];
    match g.shape() {
        [n, c, h, w] => {
            debug_assert_eq!(*c, channels);
            let plane = h * w;
            for ni in 0..*n {
                for ci in 0..*c {
                    let base = (ni * c + ci) * plane;
                    out[ci] += g.data()[base..base + plane].iter().sum::<f64>();
                }
            }
        }
        [n, feat] => {
            debug_assert_eq!(*feat, channels);
            for ni in 0..*n {
                for ci in 0..*feat {
                    out[ci] += g.data()[ni * feat + ci];
                }
            }
        }
        _ => unreachable!(),
    }
    Tensor::from_vec(&[channels], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_and_sigmoid_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // d/dx sum(x * x) = 2x
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn rectifier_rules_at_negative_input() {
        // x = -1, incoming gradient 5: standard -> 0, deconv -> 5, guided -> 0.
        let run = |rule| {
            let mut tape = Tape::new();
            let x = tape.var(Tensor::from_vec(&[1], vec![-1.0]).unwrap());
            let y = tape.relu(x).unwrap();
            let s = tape.scale(y, 5.0).unwrap();
            let loss = tape.sum(s).unwrap();
            let grads = tape.backward_with_rule(loss, rule).unwrap();
            grads.get_or_zeros(x, &[1]).data()[0]
        };
        assert_eq!(run(BackwardRule::Standard), 0.0);
        assert_eq!(run(BackwardRule::Deconv), 5.0);
        assert_eq!(run(BackwardRule::Guided), 0.0);
    }

    #[test]
    fn rules_agree_on_positive_region() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[3], vec![0.5, 1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let gs = tape.backward_with_rule(loss, BackwardRule::Standard).unwrap();
        let gd = tape.backward_with_rule(loss, BackwardRule::Deconv).unwrap();
        let gg = tape.backward_with_rule(loss, BackwardRule::Guided).unwrap();
        assert_eq!(gs.get(x).unwrap().data(), gd.get(x).unwrap().data());
        assert_eq!(gs.get(x).unwrap().data(), gg.get(x).unwrap().data());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detached_node_rejected() {
        let mut other = Tape::new();
        let foreign = other.var(Tensor::scalar_value(1.0));
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar_value(2.0));
        assert!(matches!(tape.add(x, foreign), Err(Error::DetachedNode)));
        assert!(matches!(
            tape.backward(foreign),
            Err(Error::DetachedNode)
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[3, 3]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv_attr_validation() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.var(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, 0, 0),
            Err(Error::AttrOutOfRange { attr: "stride", .. })
        ));
        assert!(matches!(
            tape.conv2d(x, w, 1, -1),
            Err(Error::AttrOutOfRange { attr: "padding", .. })
        ));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.var(
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap(),
        );
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.var(Tensor::zeros(&[4, 10]));
        let loss = tape
            .softmax_cross_entropy(logits, &[0, 3, 5, 9])
            .unwrap();
        let v = tape.value(loss).scalar().unwrap();
        assert!((v - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_hand_values() {
        // BCE(0.8, 0.6) = -0.8 ln 0.6 - 0.2 ln 0.4
        let expected = -0.8 * 0.6f64.ln() - 0.2 * 0.4f64.ln();
        assert!((bce(0.8, 0.6) - expected).abs() < 1e-12);
        assert!((expected - 0.5920).abs() < 1e-4);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.var(Tensor::from_vec(&[3], vec![3.0, 4.0, 5.0]).unwrap());
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = tape.constant(Tensor::from_vec(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let prod = tape.mul(cat, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 8)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[2, 4], vals).unwrap());
            let s = tape.softmax(x).unwrap();
            for row in tape.value(s).data().chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn sigmoid_stays_in_open_unit_interval(vals in proptest::collection::vec(-36.0f64..36.0, 16)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[16], vals).unwrap());
            let s = tape.sigmoid(x).unwrap();
            for &v in tape.value(s).data() {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }
    }
}
