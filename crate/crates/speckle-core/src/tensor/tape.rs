//! Op recording and reverse-mode differentiation.
//!
//! Each op appends one [`Node`] holding handles to its inputs, its output,
//! and whatever values backward needs. Nodes are appended in forward order,
//! so a reverse sweep visits every node after all of its consumers.

use super::{numel_of, shape_string, strides_of, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EwKind {
    Add,
    Sub,
    Hadamard,
    ScalarMul,
    Relu,
    Sigmoid,
    Exp,
    Log,
    MaxWithZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
    Max,
}

pub(crate) enum Op {
    Ew {
        kind: EwKind,
        a: Tensor,
        b: Option<Tensor>,
        c: Option<f64>,
    },
    Reduce {
        kind: ReduceKind,
        a: Tensor,
        axes: Vec<usize>,
    },
    Matmul {
        a: Tensor,
        b: Tensor,
    },
    Transpose2d {
        a: Tensor,
    },
    Reshape {
        a: Tensor,
    },
    IndexSelect0 {
        a: Tensor,
        indices: Vec<usize>,
    },
    Stack0 {
        parts: Vec<Tensor>,
    },
    Concat0 {
        parts: Vec<Tensor>,
    },
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    Conv1d {
        input: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    Softmax {
        a: Tensor,
        axis: usize,
    },
    BatchNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    AdaptiveAvgPool2d {
        input: Tensor,
    },
    L2Normalize {
        a: Tensor,
        axis: usize,
        norms: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) out: Tensor,
}

/// Per-forward-pass record of operations. Build one, run the forward ops
/// through it, call [`Tape::backward`] on a scalar loss, then drop it.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that runs the same forward math but records nothing, for
    /// evaluation passes that will never call backward.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Wraps raw output values into a tensor and records the node when any
    /// input carries `requires_grad`.
    pub(crate) fn emit(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs_require_grad: bool,
        op: Op,
    ) -> Tensor {
        let record = self.recording && inputs_require_grad;
        let out = Tensor::from_storage(shape, data, record);
        if record {
            let idx = self.nodes.len();
            out.set_node(idx);
            self.nodes.push(Node {
                op,
                out: out.clone(),
            });
        }
        out
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(EwKind::Sub, a, b)
    }

    /// Elementwise product with broadcasting.
    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(EwKind::Hadamard, a, b)
    }

    pub fn scalar_mul(&mut self, c: f64, a: &Tensor) -> Result<Tensor, TensorError> {
        let (shape, data, rg) = {
            let s = a.borrow();
            (
                s.shape.clone(),
                s.data.iter().map(|v| c * v).collect::<Vec<_>>(),
                s.requires_grad,
            )
        };
        Ok(self.emit(
            shape,
            data,
            rg,
            Op::Ew {
                kind: EwKind::ScalarMul,
                a: a.clone(),
                b: None,
                c: Some(c),
            },
        ))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(EwKind::Relu, a)
    }

    /// Identical math to [`Tape::relu`], kept as its own op kind so loss
    /// hinges read as what they are.
    pub fn max_with_zero(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(EwKind::MaxWithZero, a)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(EwKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(EwKind::Exp, a)
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        {
            let s = a.borrow();
            if let Some(v) = s.data.iter().find(|v| **v <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {v}"),
                });
            }
        }
        self.unary(EwKind::Log, a)
    }

    /// Clamps every element to at least `lo`, built from max_with_zero so the
    /// gradient is exactly the clamp subgradient.
    pub fn clamp_min(&mut self, a: &Tensor, lo: f64) -> Result<Tensor, TensorError> {
        let floor = Tensor::full(a.shape(), lo);
        let shifted = self.sub(a, &floor)?;
        let hinged = self.max_with_zero(&shifted)?;
        self.add(&hinged, &floor)
    }

    fn unary(&mut self, kind: EwKind, a: &Tensor) -> Result<Tensor, TensorError> {
        let (shape, data, rg) = {
            let s = a.borrow();
            let data = s
                .data
                .iter()
                .map(|&v| match kind {
                    EwKind::Relu | EwKind::MaxWithZero => v.max(0.0),
                    EwKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                    EwKind::Exp => v.exp(),
                    EwKind::Log => v.ln(),
                    _ => unreachable!("binary kind in unary"),
                })
                .collect::<Vec<_>>();
            (s.shape.clone(), data, s.requires_grad)
        };
        Ok(self.emit(
            shape,
            data,
            rg,
            Op::Ew {
                kind,
                a: a.clone(),
                b: None,
                c: None,
            },
        ))
    }

    fn binary(&mut self, kind: EwKind, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let op_name = match kind {
            EwKind::Add => "add",
            EwKind::Sub => "sub",
            _ => "hadamard",
        };
        let (out_shape, data, rg) = {
            let sa = a.borrow();
            let sb = b.borrow();
            let out_shape = broadcast_shape(op_name, &sa.shape, &sb.shape)?;
            let mut data = vec![0.0; numel_of(&out_shape)];
            for_each_broadcast(&out_shape, &sa.shape, &sb.shape, |o, ia, ib| {
                let (x, y) = (sa.data[ia], sb.data[ib]);
                data[o] = match kind {
                    EwKind::Add => x + y,
                    EwKind::Sub => x - y,
                    EwKind::Hadamard => x * y,
                    _ => unreachable!("unary kind in binary"),
                };
            });
            (out_shape, data, sa.requires_grad || sb.requires_grad)
        };
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::Ew {
                kind,
                a: a.clone(),
                b: Some(b.clone()),
                c: None,
            },
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    /// Maximum over the listed axes; ties route the gradient to the first
    /// (lowest-index) maximum.
    pub fn max(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    fn reduce(
        &mut self,
        kind: ReduceKind,
        a: &Tensor,
        axes: &[usize],
    ) -> Result<Tensor, TensorError> {
        let op_name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        };
        let (out_shape, data, rg) = {
            let s = a.borrow();
            validate_axes(op_name, axes, s.shape.len())?;
            let out_shape = reduced_shape(&s.shape, axes);
            let count: usize = axes.iter().map(|&ax| s.shape[ax]).product();
            if kind == ReduceKind::Max && count == 0 {
                return Err(TensorError::Domain {
                    op: "max",
                    detail: "reduction over an empty slice".to_string(),
                });
            }
            let map = input_to_output_map(&s.shape, axes);
            let mut data = match kind {
                ReduceKind::Max => vec![f64::NEG_INFINITY; numel_of(&out_shape)],
                _ => vec![0.0; numel_of(&out_shape)],
            };
            for (i, &v) in s.data.iter().enumerate() {
                let o = map.output_index(i);
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => data[o] += v,
                    ReduceKind::Max => {
                        if v > data[o] {
                            data[o] = v;
                        }
                    }
                }
            }
            if kind == ReduceKind::Mean {
                let denom = count as f64;
                for v in &mut data {
                    *v /= denom;
                }
            }
            (out_shape, data, s.requires_grad)
        };
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::Reduce {
                kind,
                a: a.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    // ---- linear algebra and shape plumbing ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (out_shape, data, rg) = {
            let sa = a.borrow();
            let sb = b.borrow();
            if sa.shape.len() != 2 || sb.shape.len() != 2 || sa.shape[1] != sb.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: shape_string(&sa.shape),
                    right: shape_string(&sb.shape),
                });
            }
            let (m, k, n) = (sa.shape[0], sa.shape[1], sb.shape[1]);
            let data = matmul_raw(&sa.data, &sb.data, m, k, n);
            (vec![m, n], data, sa.requires_grad || sb.requires_grad)
        };
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn transpose2d(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (out_shape, data, rg) = {
            let s = a.borrow();
            if s.shape.len() != 2 {
                return Err(TensorError::RankMismatch {
                    op: "transpose2d",
                    expected: 2,
                    actual: s.shape.len(),
                });
            }
            let (r, c) = (s.shape[0], s.shape[1]);
            (vec![c, r], transpose_raw(&s.data, r, c), s.requires_grad)
        };
        Ok(self.emit(out_shape, data, rg, Op::Transpose2d { a: a.clone() }))
    }

    /// Same values, new shape; element count must match.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let (data, rg) = {
            let s = a.borrow();
            if numel_of(&shape) != s.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    left: shape_string(&s.shape),
                    right: shape_string(&shape),
                });
            }
            (s.data.clone(), s.requires_grad)
        };
        Ok(self.emit(shape, data, rg, Op::Reshape { a: a.clone() }))
    }

    /// Gathers rows along axis 0; the same row may appear more than once.
    pub fn index_select0(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
        let (out_shape, data, rg) = {
            let s = a.borrow();
            if s.shape.is_empty() {
                return Err(TensorError::RankMismatch {
                    op: "index_select",
                    expected: 1,
                    actual: 0,
                });
            }
            let dim0 = s.shape[0];
            let row = s.data.len() / dim0.max(1);
            for &i in indices {
                if i >= dim0 {
                    return Err(TensorError::IndexOutOfRange { index: i, dim: dim0 });
                }
            }
            let mut out_shape = s.shape.clone();
            out_shape[0] = indices.len();
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                data.extend_from_slice(&s.data[i * row..(i + 1) * row]);
            }
            (out_shape, data, s.requires_grad)
        };
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::IndexSelect0 {
                a: a.clone(),
                indices: indices.to_vec(),
            },
        ))
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack0" });
        }
        let base = parts[0].shape();
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            let s = p.borrow();
            if s.shape != base {
                return Err(TensorError::ShapeMismatch {
                    op: "stack0",
                    left: shape_string(&base),
                    right: shape_string(&s.shape),
                });
            }
            data.extend_from_slice(&s.data);
            rg |= s.requires_grad;
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&base);
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::Stack0 {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenates along the existing leading axis; trailing dims must match.
    pub fn concat0(&mut self, parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat0" });
        }
        let first = parts[0].shape();
        if first.is_empty() {
            return Err(TensorError::RankMismatch {
                op: "concat0",
                expected: 1,
                actual: 0,
            });
        }
        let trailing = first[1..].to_vec();
        let mut rows = 0usize;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            let s = p.borrow();
            if s.shape.is_empty() || s.shape[1..] != trailing[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat0",
                    left: shape_string(&first),
                    right: shape_string(&s.shape),
                });
            }
            rows += s.shape[0];
            data.extend_from_slice(&s.data);
            rg |= s.requires_grad;
        }
        let mut out_shape = vec![rows];
        out_shape.extend_from_slice(&trailing);
        Ok(self.emit(
            out_shape,
            data,
            rg,
            Op::Concat0 {
                parts: parts.to_vec(),
            },
        ))
    }

    // ---- backward ----

    /// Seeds the scalar `loss` with gradient 1 and sweeps the tape in
    /// reverse, accumulating gradients into every `requires_grad` input.
    pub fn backward(&mut self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape_string(&loss.shape()),
            });
        }
        let idx = loss.node().ok_or(TensorError::LossNotOnTape)?;
        if idx >= self.nodes.len() || !self.nodes[idx].out.ptr_eq(loss) {
            return Err(TensorError::LossNotOnTape);
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes[..=idx].iter().rev() {
            let Some(g_out) = node.out.grad() else {
                continue;
            };
            backward_node(node, &g_out);
        }
        Ok(())
    }
}

fn backward_node(node: &Node, g: &[f64]) {
    match &node.op {
        Op::Ew { kind, a, b, c } => backward_ew(*kind, a, b.as_ref(), *c, &node.out, g),
        Op::Reduce { kind, a, axes } => backward_reduce(*kind, a, axes, g),
        Op::Matmul { a, b } => backward_matmul(a, b, g),
        Op::Transpose2d { a } => {
            if a.requires_grad() {
                let shape = a.shape();
                // g has shape [c, r]; transposing it back gives [r, c].
                a.accumulate_grad(&transpose_raw(g, shape[1], shape[0]));
            }
        }
        Op::Reshape { a } => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
        }
        Op::IndexSelect0 { a, indices } => {
            if a.requires_grad() {
                let mut da = vec![0.0; a.numel()];
                let row = if indices.is_empty() {
                    0
                } else {
                    g.len() / indices.len()
                };
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..row {
                        da[i * row + j] += g[k * row + j];
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::Stack0 { parts } | Op::Concat0 { parts } => {
            let mut offset = 0usize;
            for p in parts {
                let n = p.numel();
                if p.requires_grad() {
                    p.accumulate_grad(&g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => super::conv::backward_conv2d(input, kernel, bias.as_ref(), *stride, *padding, g),
        Op::Conv1d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => super::conv::backward_conv1d(input, kernel, bias.as_ref(), *stride, *padding, g),
        Op::Softmax { a, axis } => super::norm::backward_softmax(a, *axis, &node.out, g),
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            inv_std,
            train,
        } => super::norm::backward_batchnorm(input, gamma, beta, mean, inv_std, *train, g),
        Op::AdaptiveAvgPool2d { input } => {
            super::norm::backward_adaptive_avg_pool2d(input, &node.out, g)
        }
        Op::L2Normalize { a, axis, norms } => {
            super::norm::backward_l2_normalize(a, *axis, norms, &node.out, g)
        }
    }
}

fn backward_ew(
    kind: EwKind,
    a: &Tensor,
    b: Option<&Tensor>,
    c: Option<f64>,
    out: &Tensor,
    g: &[f64],
) {
    match kind {
        EwKind::Add | EwKind::Sub | EwKind::Hadamard => {
            let b = b.expect("binary op stores b");
            let (a_shape, b_shape) = (a.shape(), b.shape());
            let out_shape = out.shape();
            let (da, db) = {
                let sa = a.borrow();
                let sb = b.borrow();
                let mut da = vec![0.0; sa.data.len()];
                let mut db = vec![0.0; sb.data.len()];
                for_each_broadcast(&out_shape, &a_shape, &b_shape, |o, ia, ib| match kind {
                    EwKind::Add => {
                        da[ia] += g[o];
                        db[ib] += g[o];
                    }
                    EwKind::Sub => {
                        da[ia] += g[o];
                        db[ib] -= g[o];
                    }
                    EwKind::Hadamard => {
                        da[ia] += g[o] * sb.data[ib];
                        db[ib] += g[o] * sa.data[ia];
                    }
                    _ => unreachable!(),
                });
                (da, db)
            };
            if a.requires_grad() {
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                b.accumulate_grad(&db);
            }
        }
        EwKind::ScalarMul => {
            if a.requires_grad() {
                let c = c.expect("scalar_mul stores its constant");
                let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                a.accumulate_grad(&da);
            }
        }
        EwKind::Relu | EwKind::MaxWithZero => {
            if a.requires_grad() {
                let da: Vec<f64> = {
                    let s = a.borrow();
                    s.data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect()
                };
                a.accumulate_grad(&da);
            }
        }
        EwKind::Sigmoid => {
            if a.requires_grad() {
                let da: Vec<f64> = {
                    let s = out.borrow();
                    s.data.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect()
                };
                a.accumulate_grad(&da);
            }
        }
        EwKind::Exp => {
            if a.requires_grad() {
                let da: Vec<f64> = {
                    let s = out.borrow();
                    s.data.iter().zip(g).map(|(&y, &gv)| gv * y).collect()
                };
                a.accumulate_grad(&da);
            }
        }
        EwKind::Log => {
            if a.requires_grad() {
                let da: Vec<f64> = {
                    let s = a.borrow();
                    s.data.iter().zip(g).map(|(&x, &gv)| gv / x).collect()
                };
                a.accumulate_grad(&da);
            }
        }
    }
}

fn backward_reduce(kind: ReduceKind, a: &Tensor, axes: &[usize], g: &[f64]) {
    if !a.requires_grad() {
        return;
    }
    let da = {
        let s = a.borrow();
        let map = input_to_output_map(&s.shape, axes);
        let count: usize = axes.iter().map(|&ax| s.shape[ax]).product();
        let mut da = vec![0.0; s.data.len()];
        match kind {
            ReduceKind::Sum => {
                for (i, dv) in da.iter_mut().enumerate() {
                    *dv = g[map.output_index(i)];
                }
            }
            ReduceKind::Mean => {
                let denom = count as f64;
                for (i, dv) in da.iter_mut().enumerate() {
                    *dv = g[map.output_index(i)] / denom;
                }
            }
            ReduceKind::Max => {
                // Re-scan to find the first maximum of each output cell.
                let out_len = g.len();
                let mut best = vec![f64::NEG_INFINITY; out_len];
                let mut best_idx = vec![usize::MAX; out_len];
                for (i, &v) in s.data.iter().enumerate() {
                    let o = map.output_index(i);
                    if v > best[o] {
                        best[o] = v;
                        best_idx[o] = i;
                    }
                }
                for (o, &i) in best_idx.iter().enumerate() {
                    if i != usize::MAX {
                        da[i] = g[o];
                    }
                }
            }
        }
        da
    };
    a.accumulate_grad(&da);
}

fn backward_matmul(a: &Tensor, b: &Tensor, g: &[f64]) {
    let (m, k) = {
        let s = a.shape();
        (s[0], s[1])
    };
    let n = b.shape()[1];
    if a.requires_grad() {
        let da = {
            let sb = b.borrow();
            // dA = G * B^T
            matmul_raw(g, &transpose_raw(&sb.data, k, n), m, n, k)
        };
        a.accumulate_grad(&da);
    }
    if b.requires_grad() {
        let db = {
            let sa = a.borrow();
            // dB = A^T * G
            matmul_raw(&transpose_raw(&sa.data, m, k), g, k, m, n)
        };
        b.accumulate_grad(&db);
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ---- broadcasting ----

/// Broadcast shape of two operands: ranks align by inserting leading 1s into
/// the shorter shape, then each axis must match or one side must be 1.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = padded_dim(a, rank, i);
        let db = padded_dim(b, rank, i);
        out.push(if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::BroadcastMismatch {
                op,
                left: shape_string(a),
                right: shape_string(b),
            });
        });
    }
    Ok(out)
}

fn padded_dim(shape: &[usize], rank: usize, axis: usize) -> usize {
    let pad = rank - shape.len();
    if axis < pad {
        1
    } else {
        shape[axis - pad]
    }
}

/// Walks the broadcast output in row-major order, handing the visitor the
/// flat output index plus the flat index into each operand.
pub(crate) fn for_each_broadcast<F: FnMut(usize, usize, usize)>(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: F,
) {
    let rank = out_shape.len();
    let total = numel_of(out_shape);
    if total == 0 {
        return;
    }
    let a_strides = broadcast_strides(a_shape, out_shape);
    let b_strides = broadcast_strides(b_shape, out_shape);
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= a_strides[d] * out_shape[d];
            ib -= b_strides[d] * out_shape[d];
        }
    }
}

/// Strides into `shape` as seen through the broadcast `out_shape`; broadcast
/// axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let own = strides_of(shape);
    (0..rank)
        .map(|d| {
            if d < pad || shape[d - pad] == 1 {
                0
            } else {
                own[d - pad]
            }
        })
        .collect()
}

// ---- reduction plumbing ----

fn validate_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<(), TensorError> {
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= rank {
            return Err(TensorError::InvalidAxis { op, axis: ax, rank });
        }
        if axes[..i].contains(&ax) {
            return Err(TensorError::DuplicateAxis { op, axis: ax });
        }
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

/// Precomputed map from input flat index to reduced-output flat index.
pub(crate) struct ReduceMap {
    in_strides: Vec<usize>,
    out_stride_per_axis: Vec<usize>,
    shape: Vec<usize>,
}

impl ReduceMap {
    pub(crate) fn output_index(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut out = 0usize;
        for d in 0..self.shape.len() {
            let coord = rem / self.in_strides[d];
            rem %= self.in_strides[d];
            out += coord * self.out_stride_per_axis[d];
        }
        out
    }
}

pub(crate) fn input_to_output_map(shape: &[usize], axes: &[usize]) -> ReduceMap {
    let out_shape = reduced_shape(shape, axes);
    let out_strides = strides_of(&out_shape);
    let mut out_stride_per_axis = vec![0usize; shape.len()];
    let mut kept = 0usize;
    for (d, stride) in out_stride_per_axis.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *stride = out_strides[kept];
            kept += 1;
        }
    }
    ReduceMap {
        in_strides: strides_of(shape),
        out_stride_per_axis,
        shape: shape.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).expect("test tensor")
    }

    #[test]
    fn add_same_shape() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[10.0, 20.0, 30.0, 40.0]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.value(), vec![11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn broadcast_expands_size_one_axes() {
        // [2,3] + [1,3] and [2,3] + [3] (leading-1 promotion) both work.
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let row = t(&[1, 3], &[10.0, 20.0, 30.0]);
        let c = tape.add(&a, &row).unwrap();
        assert_eq!(c.value(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let flat = t(&[3], &[10.0, 20.0, 30.0]);
        let d = tape.add(&a, &flat).unwrap();
        assert_eq!(d.value(), c.value());
    }

    #[test]
    fn broadcast_rejects_mismatched_axes() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = tape.add(&a, &b).unwrap_err();
        assert!(matches!(err, TensorError::BroadcastMismatch { .. }));
    }

    #[test]
    fn broadcast_never_pads_trailing_axes() {
        // [2,3] vs [2] must fail: rank promotion only inserts leading 1s,
        // giving [1,2], and 3 vs 2 does not broadcast.
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        assert!(tape.add(&a, &b).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, 0.0]);
        assert!(matches!(
            tape.log(&a).unwrap_err(),
            TensorError::Domain { op: "log", .. }
        ));
    }

    #[test]
    fn mean_over_axis_matches_by_hand() {
        let mut tape = Tape::new();
        let a = Tensor::ones(vec![4, 4]);
        let m = tape.mean(&a, &[1]).unwrap();
        assert_eq!(m.shape(), vec![4]);
        assert_eq!(m.value(), vec![1.0; 4]);
    }

    #[test]
    fn sum_and_max_match_by_hand() {
        let mut tape = Tape::new();
        let a = t(&[3], &[3.0, -1.0, 7.0]);
        assert_eq!(tape.sum(&a, &[0]).unwrap().item().unwrap(), 9.0);
        assert_eq!(tape.max(&a, &[0]).unwrap().item().unwrap(), 7.0);
    }

    #[test]
    fn reduce_rejects_bad_axes() {
        let mut tape = Tape::new();
        let a = Tensor::ones(vec![2, 2]);
        assert!(matches!(
            tape.sum(&a, &[2]).unwrap_err(),
            TensorError::InvalidAxis { .. }
        ));
        assert!(matches!(
            tape.sum(&a, &[0, 0]).unwrap_err(),
            TensorError::DuplicateAxis { .. }
        ));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng_state = 88172645463325252u64;
        let mut next = move || {
            // xorshift64 keeps the oracle free of the crate's own RNG plumbing
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state % 1000) as f64 / 500.0 - 1.0
        };
        let (m, k, n) = (4, 5, 3);
        let a_data: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let mut expected = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a_data[i * k + p] * b_data[p * n + j];
                }
                expected[i * n + j] = acc;
            }
        }
        let mut tape = Tape::new();
        let a = t(&[m, k], &a_data);
        let b = t(&[k, n], &b_data);
        let c = tape.matmul(&a, &b).unwrap();
        for (got, want) in c.value().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let mut tape = Tape::new();
        let a = Tensor::ones(vec![2, 3]);
        let b = Tensor::ones(vec![4, 2]);
        assert!(matches!(
            tape.matmul(&a, &b).unwrap_err(),
            TensorError::ShapeMismatch { op: "matmul", .. }
        ));
    }

    #[test]
    fn backward_of_sum_of_product() {
        // loss = sum(a ⊙ b) -> da = b, db = a
        let mut tape = Tape::new();
        let a = t(&[3], &[1.0, 2.0, 3.0]).with_grad();
        let b = t(&[3], &[4.0, 5.0, 6.0]).with_grad();
        let prod = tape.hadamard(&a, &b).unwrap();
        let loss = tape.sum(&prod, &[0]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![4.0, 5.0, 6.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn tensor_used_twice_gets_summed_gradient() {
        // loss = sum(a + a) -> da = 2 everywhere
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, -1.0]).with_grad();
        let s = tape.add(&a, &a).unwrap();
        let loss = tape.sum(&s, &[0]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_off_tape_loss() {
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]).with_grad();
        let s = tape.add(&a, &a).unwrap();
        assert!(matches!(
            tape.backward(&s).unwrap_err(),
            TensorError::NonScalarLoss { .. }
        ));
        let leaf = Tensor::scalar(1.0).with_grad();
        assert!(matches!(
            tape.backward(&leaf).unwrap_err(),
            TensorError::LossNotOnTape
        ));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let a = t(&[2], &[1.0, 2.0]).with_grad();
        let s = tape.add(&a, &a).unwrap();
        assert!(tape.is_empty());
        assert!(!s.requires_grad());
    }

    #[test]
    fn broadcast_backward_reduces_to_operand_shape() {
        // loss = sum(a[2x3] + row[1x3]) -> drow sums over the expanded axis
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[1.0; 6]).with_grad();
        let row = t(&[1, 3], &[0.5; 3]).with_grad();
        let s = tape.add(&a, &row).unwrap();
        let loss = tape.sum(&s, &[0, 1]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(row.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn max_ties_route_gradient_to_first() {
        let mut tape = Tape::new();
        let a = t(&[3], &[5.0, 5.0, 1.0]).with_grad();
        let m = tape.max(&a, &[0]).unwrap();
        tape.backward(&m).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn index_select_repeats_rows_and_scatters_grads() {
        let mut tape = Tape::new();
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let sel = tape.index_select0(&a, &[2, 0, 2]).unwrap();
        assert_eq!(sel.value(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(&sel, &[0, 1]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn index_select_rejects_out_of_range() {
        let mut tape = Tape::new();
        let a = Tensor::ones(vec![2, 2]);
        assert!(matches!(
            tape.index_select0(&a, &[2]).unwrap_err(),
            TensorError::IndexOutOfRange { .. }
        ));
    }

    #[test]
    fn stack_and_concat_roundtrip_grads() {
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]).with_grad();
        let b = t(&[2], &[3.0, 4.0]).with_grad();
        let stacked = tape.stack0(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(stacked.shape(), vec![2, 2]);
        let joined = tape.concat0(&[stacked.clone(), stacked.clone()]).unwrap();
        assert_eq!(joined.shape(), vec![4, 2]);
        let loss = tape.sum(&joined, &[0, 1]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn clamp_min_gradient_is_flat_below_floor() {
        let mut tape = Tape::new();
        let a = t(&[2], &[0.5, -0.5]).with_grad();
        let c = tape.clamp_min(&a, 0.0).unwrap();
        assert_eq!(c.value(), vec![0.5, 0.0]);
        let loss = tape.sum(&c, &[0]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let tt = tape.transpose2d(&a).unwrap();
        assert_eq!(tt.shape(), vec![3, 2]);
        assert_eq!(tt.value(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let loss = tape.sum(&tt, &[0, 1]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }
}
