//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op in execution order, so node indices are
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep. Parameters enter the tape through [`Tape::param`], which reads
//! from a [`ParamStore`]; backward writes `dloss/dparam` back into the
//! store's gradient slots.

mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{conv_output_size, ConvParams, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    FlattenHeads {
        inputs: Vec<Var>,
        boxes_per_cell: usize,
        width: usize,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
        end: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
    },
    Add(Var, Var),
    Scale(Var, T),
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Concat(_) => "concat_channels",
            Op::FlattenHeads { .. } => "flatten_heads",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Relu(x) | Op::Scale(x, _) => vec![*x],
            Op::MaxPool { input, .. }
            | Op::SelectRows { input, .. }
            | Op::SliceCols { input, .. }
            | Op::WeightedSum { input, .. } => vec![*input],
            Op::Concat(xs) | Op::FlattenHeads { inputs: xs, .. } => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::Add(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Computation record for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
            check_finite: false,
        }
    }

    /// When enabled, every op fails with [`Error::NonFinite`] as soon as it
    /// produces a NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_vars.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward's loss with respect to `v`, if `v` was
    /// reachable from it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Number of convolution nodes that read the given weight parameter.
    pub fn conv_invocations(&self, weight: ParamId) -> usize {
        let Some(&w) = self.param_vars.get(&weight) else {
            return 0;
        };
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Conv2d { weight, .. } if weight == w))
            .count()
    }

    /// Conv nodes as `(weight param, input shape, output shape)`.
    pub fn conv_nodes(&self) -> Vec<(ParamId, Vec<usize>, Vec<usize>)> {
        let by_var: HashMap<Var, ParamId> = self.param_vars.iter().map(|(p, v)| (*v, *p)).collect();
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Conv2d { input, weight, .. } => Some((
                    *by_var.get(&weight)?,
                    self.value(input).shape().to_vec(),
                    n.value.shape().to_vec(),
                )),
                _ => None,
            })
            .collect()
    }

    /// Which side of every non-smooth point the current values sit on: ReLU
    /// input signs, max-pool argmaxes and smooth-L1 branch. Two forward
    /// passes with equal patterns lie on the same linear piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|v| (*v > T::zero()) as usize)),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                Op::SelectRows { rows, .. } => out.extend_from_slice(rows),
                Op::SmoothL1 { pred, target } => out.extend(
                    self.value(*pred)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(p, t)| ((*p - *t).abs() < T::one()) as usize),
                ),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records (once per tape) the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d_with(&mut self, input: Var, conv: &ConvParams, store: &ParamStore<T>) -> Result<Var> {
        let w = self.param(store, conv.weight);
        let b = self.param(store, conv.bias);
        self.conv2d(input, w, b, conv.stride, conv.padding)
    }

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, k, k]` plus bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (b, c, h, wd) = x.dims4()?;
        let (co, ci, kh, kw) = w.dims4()?;
        if kh != kw || (kh != 1 && kh != 3) {
            return Err(Error::UnsupportedKernel(kh, kw));
        }
        if ci != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![co],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(wd, kw, stride, padding),
        ) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d spatial",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        };
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
            out_h: oh,
            out_w: ow,
        };
        let data = kernels::conv_forward(x.data(), b, &geom, w.data(), self.value(bias).data(), co);
        let out = Tensor::new(vec![b, co, oh, ow], data)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Relu(input))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if window == 0 || stride == 0 {
            return Err(Error::Config("pooling window and stride must be positive".into()));
        }
        if window > h || window > w {
            return Err(Error::WindowTooLarge {
                window,
                height: h,
                width: w,
            });
        }
        let (data, argmax, oh, ow) = kernels::max_pool_forward(x.data(), b * c, h, w, window, stride);
        let out = Tensor::new(vec![b, c, oh, ow], data)?;
        self.push(out, Op::MaxPool { input, argmax })
    }

    /// Channel-axis concatenation in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Config("concat of zero tensors".into()));
        };
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for (i, &v) in inputs.iter().enumerate() {
            let t = self.value(v);
            match t.dims4() {
                Ok((bb, c, hh, ww)) if bb == b && hh == h && ww == w => total += c,
                _ => {
                    return Err(Error::ConcatMismatch {
                        index: i,
                        found: t.shape().to_vec(),
                        expected: vec![b, h, w],
                    })
                }
            }
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![b, total, h, w], data)?;
        self.push(out, Op::Concat(inputs.to_vec()))
    }

    /// Rearranges per-tap prediction maps `[B, k*width, m, n]` into one
    /// `[B * D, width]` matrix, `D = sum(k * m * n)`. Row
    /// `b * D + offset_tap + (y * n + x) * k + a` holds channels
    /// `a * width .. (a + 1) * width` at cell `(y, x)` of image `b`.
    pub fn flatten_heads(&mut self, inputs: &[Var], boxes_per_cell: usize, width: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Config("flatten of zero heads".into()));
        };
        let batch = self.value(first).dims4()?.0;
        let mut per_image = 0;
        for &v in inputs {
            let (b, c, m, n) = self.value(v).dims4()?;
            if b != batch || c != boxes_per_cell * width {
                return Err(Error::ShapeMismatch {
                    op: "flatten_heads",
                    lhs: self.shape(v).to_vec(),
                    rhs: vec![batch, boxes_per_cell * width],
                });
            }
            per_image += boxes_per_cell * m * n;
        }
        let mut data = vec![T::zero(); batch * per_image * width];
        let mut offset = 0;
        for &v in inputs {
            let t = self.value(v);
            let (_, c, m, n) = t.dims4()?;
            let src = t.data();
            for b in 0..batch {
                for ch in 0..c {
                    let (a, j) = (ch / width, ch % width);
                    let plane = &src[(b * c + ch) * m * n..(b * c + ch + 1) * m * n];
                    for (cell, &val) in plane.iter().enumerate() {
                        let row = b * per_image + offset + cell * boxes_per_cell + a;
                        data[row * width + j] = val;
                    }
                }
            }
            offset += boxes_per_cell * m * n;
        }
        let out = Tensor::new(vec![batch * per_image, width], data)?;
        self.push(
            out,
            Op::FlattenHeads {
                inputs: inputs.to_vec(),
                boxes_per_cell,
                width,
            },
        )
    }

    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let [r, w] = *x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![0, 0],
            });
        };
        if rows.is_empty() {
            return Err(Error::Config("select_rows needs at least one row".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            if i >= r {
                return Err(Error::ShapeMismatch {
                    op: "select_rows index",
                    lhs: x.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
        }
        let out = Tensor::new(vec![rows.len(), w], data)?;
        self.push(
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(input);
        let [r, w] = *x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, end],
            });
        };
        if start >= end || end > w {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let data = x.data().chunks_exact(w).flat_map(|row| &row[start..end]).copied().collect();
        let out = Tensor::new(vec![r, end - start], data)?;
        self.push(out, Op::SliceCols { input, start, end })
    }

    /// Negative log-softmax of each row's target class, reduced by `reduction`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let x = self.value(logits);
        let [n, c] = *x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        };
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange { target: t, classes: c });
        }
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (i, row) in x.data().chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * c..(i + 1) * c];
            let mut z = T::zero();
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            total += z.ln() + max - row[targets[i]];
        }
        let scale = match reduction {
            Reduction::Mean => T::one() / lit(n as f64),
            Reduction::Sum => T::one(),
        };
        let out = Tensor::scalar(total * scale);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        )
    }

    /// Sum over elements of `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let half = lit::<T>(0.5);
        let total = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < T::one() {
                    half * d * d
                } else {
                    d - half
                }
            })
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Scale(input, factor))
    }

    /// `sum_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: x.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let total = x.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let ones = vec![T::one(); self.value(input).numel()];
        self.weighted_sum(input, &ones)
    }

    /// Reverse sweep from a scalar `loss`. Every parameter in `store` gets a
    /// gradient (zeros when unreachable); per-node gradients stay readable
    /// through [`Tape::grad`] until the tape is reset.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        store.zero_grads();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let t = store.get_mut(*id);
                    if let Some(acc) = t.grad_mut() {
                        acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d);
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (b, c, h, wd) = x.dims4()?;
                    let (co, _, k, _) = w.dims4()?;
                    let (_, _, oh, ow) = node.value.dims4()?;
                    let geom = ConvGeom {
                        channels: c,
                        height: h,
                        width: wd,
                        kernel: k,
                        stride: *stride,
                        padding: *padding,
                        out_h: oh,
                        out_w: ow,
                    };
                    let d = kernels::conv_backward(x.data(), b, &geom, w.data(), co, &g);
                    accumulate(&mut grads, *input, d.input);
                    accumulate(&mut grads, *weight, d.weight);
                    accumulate(&mut grads, *bias, d.bias);
                }
                Op::Relu(x) => {
                    let xs = self.value(*x).data();
                    let d = g
                        .iter()
                        .zip(xs)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::MaxPool { input, argmax } => {
                    let mut d = vec![T::zero(); self.value(*input).numel()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        d[idx] += gv;
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::Concat(inputs) => {
                    let (b, total, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &v in inputs {
                        let c = self.shape(v)[1];
                        let mut d = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            let start = (bi * total + offset) * hw;
                            d.extend_from_slice(&g[start..start + c * hw]);
                        }
                        accumulate(&mut grads, v, d);
                        offset += c;
                    }
                }
                Op::FlattenHeads {
                    inputs,
                    boxes_per_cell,
                    width,
                } => {
                    let per_image = node.value.shape()[0] / self.value(inputs[0]).shape()[0];
                    let mut offset = 0;
                    for &v in inputs {
                        let (batch, c, m, n) = self.value(v).dims4()?;
                        let mut d = vec![T::zero(); batch * c * m * n];
                        for b in 0..batch {
                            for ch in 0..c {
                                let (a, j) = (ch / width, ch % width);
                                let plane = &mut d[(b * c + ch) * m * n..(b * c + ch + 1) * m * n];
                                for (cell, dv) in plane.iter_mut().enumerate() {
                                    let row = b * per_image + offset + cell * boxes_per_cell + a;
                                    *dv = g[row * width + j];
                                }
                            }
                        }
                        accumulate(&mut grads, v, d);
                        offset += boxes_per_cell * m * n;
                    }
                }
                Op::SelectRows { input, rows } => {
                    let w = node.value.shape()[1];
                    let mut d = vec![T::zero(); self.value(*input).numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        d[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[k * w..(k + 1) * w])
                            .for_each(|(a, &b)| *a += b);
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::SliceCols { input, start, end } => {
                    let w = self.shape(*input)[1];
                    let span = end - start;
                    let mut d = vec![T::zero(); self.value(*input).numel()];
                    for (row, grow) in d.chunks_exact_mut(w).zip(g.chunks_exact(span)) {
                        row[*start..*end].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                    scale,
                } => {
                    let c = self.shape(*logits)[1];
                    let f = g[0] * *scale;
                    let mut d: Vec<T> = probs.iter().map(|&p| p * f).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        d[i * c + t] -= f;
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::SmoothL1 { pred, target } => {
                    let p = self.value(*pred).data();
                    let d = p
                        .iter()
                        .zip(target)
                        .map(|(&a, &b)| {
                            let diff = a - b;
                            g[0] * diff.max(-T::one()).min(T::one())
                        })
                        .collect();
                    accumulate(&mut grads, *pred, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(x, f) => {
                    let d = g.iter().map(|&v| v * *f).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::WeightedSum { input, weights } => {
                    let d = weights.iter().map(|&w| w * g[0]).collect();
                    accumulate(&mut grads, *input, d);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}
