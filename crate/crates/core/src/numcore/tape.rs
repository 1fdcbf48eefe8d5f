//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Nodes are appended eagerly: each builder call validates shapes, computes
//! the forward value immediately, and records the op so the tape can be
//! replayed later with fresh inputs (`replay`) or differentiated (`backward`).
//! Reductions accumulate in f64 before rounding back to f32.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::{Error, Result};

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Extension point for primitives whose forward/backward is implemented
/// outside this module (e.g. the CTC loss).
pub trait CustomGrad: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Returns one gradient tensor per input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Result<Vec<Tensor>>;
    /// Double-precision forward used by the finite-difference oracle.
    /// The default rounds through the f32 path.
    fn forward_f64(&self, inputs: &[&Mat64]) -> Result<Mat64> {
        let f32_inputs: Vec<Tensor> = inputs.iter().map(|m| m.to_tensor()).collect();
        let refs: Vec<&Tensor> = f32_inputs.iter().collect();
        Ok(Mat64::from_tensor(&self.forward(&refs)?))
    }
}

/// Row-major f64 matrix used by the double-precision replay path.
#[derive(Debug, Clone)]
pub struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = t.rc();
        Mat64 {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Input { slot: usize },
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddBias(NodeId, NodeId),
    MulBias(NodeId, NodeId),
    Relu(NodeId),
    LayerNorm(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Embed { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    Rope { a: NodeId, positions: Vec<usize>, base: f32 },
    SumAll(NodeId),
    MeanNll { logprobs: NodeId, picks: Vec<(usize, usize)> },
    Custom { f: Arc<dyn CustomGrad>, inputs: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// An eagerly-evaluated, replayable computation tape.
pub struct Tape {
    nodes: Vec<Node>,
    n_inputs: usize,
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
            n_inputs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let slot = self.n_inputs;
        self.n_inputs += 1;
        self.push(Op::Input { slot }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::transpose(self.value(a));
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, k: f32) -> NodeId {
        let v = ops::scale(self.value(a), k);
        self.push(Op::Scale(a, k), v)
    }

    /// `[m, n] + [n]` row-broadcast bias.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_bias(self.value(a), self.value(bias))?;
        Ok(self.push(Op::AddBias(a, bias), v))
    }

    /// `[m, n] * [n]` row-broadcast elementwise scale (layernorm gamma).
    pub fn mul_bias(&mut self, a: NodeId, gamma: NodeId) -> Result<NodeId> {
        let v = ops::mul_bias(self.value(a), self.value(gamma))?;
        Ok(self.push(Op::MulBias(a, gamma), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = ops::relu(self.value(a));
        self.push(Op::Relu(a), v)
    }

    /// Per-row normalization to zero mean / unit variance (pre-affine).
    pub fn layernorm(&mut self, a: NodeId) -> NodeId {
        let v = ops::layernorm(self.value(a));
        self.push(Op::LayerNorm(a), v)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = ops::softmax(self.value(a));
        self.push(Op::Softmax(a), v)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = ops::log_softmax(self.value(a));
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = ops::embed(self.value(table), ids)?;
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_rows(&vals)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_cols(&vals)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_rows(self.value(a), start, len)?;
        Ok(self.push(Op::SliceRows { a, start, len }, v))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_cols(self.value(a), start, len)?;
        Ok(self.push(Op::SliceCols { a, start, len }, v))
    }

    /// Rotary position transform over a `[n, d]` block (d even), one position
    /// index per row. Attention scores between roped vectors depend only on
    /// position offsets.
    pub fn rope(&mut self, a: NodeId, positions: &[usize], base: f32) -> Result<NodeId> {
        let v = ops::rope(self.value(a), positions, base)?;
        Ok(self.push(
            Op::Rope {
                a,
                positions: positions.to_vec(),
                base,
            },
            v,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ops::sum_all(self.value(a));
        self.push(Op::SumAll(a), v)
    }

    /// Mean negative log-likelihood over `(row, class)` picks of a log-prob matrix.
    pub fn mean_nll(&mut self, logprobs: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        let v = ops::mean_nll(self.value(logprobs), picks)?;
        Ok(self.push(
            Op::MeanNll {
                logprobs,
                picks: picks.to_vec(),
            },
            v,
        ))
    }

    pub fn custom(&mut self, f: Arc<dyn CustomGrad>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
        let v = f.forward(&vals)?;
        Ok(self.push(
            Op::Custom {
                f,
                inputs: inputs.to_vec(),
            },
            v,
        ))
    }

    /// Re-evaluates every node with fresh input tensors, returning all values.
    /// Replaying with the original inputs is bitwise identical to the eager pass.
    pub fn replay(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        if inputs.len() != self.n_inputs {
            return Err(Error::shape(
                "replay",
                format!("tape has {} inputs, got {}", self.n_inputs, inputs.len()),
            ));
        }
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input { slot } => {
                    let t = inputs[*slot];
                    if t.shape() != node.value.shape() {
                        return Err(Error::shape(
                            "replay",
                            format!(
                                "input {} shape {:?} != recorded {:?}",
                                slot,
                                t.shape(),
                                node.value.shape()
                            ),
                        ));
                    }
                    t.clone()
                }
                Op::Constant => node.value.clone(),
                op => eval_op(op, &vals)?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Slot index of an input node, if `id` is one.
    pub fn input_slot(&self, id: NodeId) -> Option<usize> {
        match self.nodes[id.0].op {
            Op::Input { slot } => Some(slot),
            _ => None,
        }
    }

    /// Reverse-mode gradients of a scalar output with respect to every node,
    /// evaluated at the tape's stored (eager) values.
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        self.backward_impl(out, &|id| &self.nodes[id.0].value)
    }

    /// Like `backward` but evaluated at externally replayed values.
    pub fn backward_at(&self, values: &[Tensor], out: NodeId) -> Result<Gradients> {
        if values.len() != self.nodes.len() {
            return Err(Error::Invalid(format!(
                "backward_at wants {} values, got {}",
                self.nodes.len(),
                values.len()
            )));
        }
        self.backward_impl(out, &|id| &values[id.0])
    }

    fn backward_impl<'v>(
        &'v self,
        out: NodeId,
        val: &dyn Fn(NodeId) -> &'v Tensor,
    ) -> Result<Gradients> {
        let out_val = val(out);
        if !out_val.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward requires a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads, val)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node<'v>(
        &'v self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        val: &dyn Fn(NodeId) -> &'v Tensor,
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Input { .. } | Op::Constant => {}
            Op::MatMul(a, b) => {
                let bt = ops::transpose(val(*b));
                let at = ops::transpose(val(*a));
                accumulate(grads, *a, ops::matmul(g, &bt)?);
                accumulate(grads, *b, ops::matmul(&at, g)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, ops::transpose(g)),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, ops::mul(g, val(*b))?);
                accumulate(grads, *b, ops::mul(g, val(*a))?);
            }
            Op::Scale(a, k) => accumulate(grads, *a, ops::scale(g, *k)),
            Op::AddBias(a, bias) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *bias, ops::col_sum(g));
            }
            Op::MulBias(a, gamma) => {
                accumulate(grads, *a, ops::mul_bias(g, val(*gamma))?);
                let ga = ops::mul(g, val(*a))?;
                accumulate(grads, *gamma, ops::col_sum(&ga));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm(a) => accumulate(grads, *a, ops::layernorm_backward(val(*a), g)),
            Op::Softmax(a) => {
                let y = val(NodeId(i));
                accumulate(grads, *a, ops::softmax_backward(y, g));
            }
            Op::LogSoftmax(a) => {
                let y = val(NodeId(i));
                accumulate(grads, *a, ops::log_softmax_backward(y, g));
            }
            Op::Embed { table, ids } => {
                let t = val(*table);
                let mut d = Tensor::zeros(t.shape());
                let cols = t.cols();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        let v = d.at(id, j) + g.at(r, j);
                        d.set(id, j, v);
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = val(p).rows();
                    accumulate(grads, p, ops::slice_rows(g, start, r)?);
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = val(p).cols();
                    accumulate(grads, p, ops::slice_cols(g, start, c)?);
                    start += c;
                }
            }
            Op::SliceRows { a, start, len } => {
                let src = val(*a);
                let mut d = Tensor::zeros(src.shape());
                let cols = src.cols();
                for r in 0..*len {
                    for j in 0..cols {
                        d.set(start + r, j, g.at(r, j));
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SliceCols { a, start, len } => {
                let src = val(*a);
                let mut d = Tensor::zeros(src.shape());
                for r in 0..src.rows() {
                    for j in 0..*len {
                        d.set(r, start + j, g.at(r, j));
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Rope { a, positions, base } => {
                accumulate(grads, *a, ops::rope_backward(g, positions, *base)?);
            }
            Op::SumAll(a) => {
                let s = g.item();
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut().fill(s);
                accumulate(grads, *a, d);
            }
            Op::MeanNll { logprobs, picks } => {
                let lp = val(*logprobs);
                let mut d = Tensor::zeros(lp.shape());
                let w = -g.item() / picks.len() as f32;
                for &(r, c) in picks {
                    let v = d.at(r, c) + w;
                    d.set(r, c, v);
                }
                accumulate(grads, *logprobs, d);
            }
            Op::Custom { f, inputs } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&p| val(p)).collect();
                let ds = f.backward(&vals, val(NodeId(i)), g)?;
                if ds.len() != inputs.len() {
                    return Err(Error::Invalid(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        f.name(),
                        ds.len(),
                        inputs.len()
                    )));
                }
                for (&p, d) in inputs.iter().zip(ds) {
                    accumulate(grads, p, d);
                }
            }
        }
        Ok(())
    }
}

/// Per-node gradients from a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    /// Gradient of `id`, or zeros of the given shape when `id` is off-path.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.index()] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn eval_op(op: &Op, vals: &[Tensor]) -> Result<Tensor> {
    let v = |id: &NodeId| &vals[id.index()];
    match op {
        Op::Input { .. } | Op::Constant => unreachable!("handled by replay"),
        Op::MatMul(a, b) => ops::matmul(v(a), v(b)),
        Op::Transpose(a) => Ok(ops::transpose(v(a))),
        Op::Add(a, b) => ops::add(v(a), v(b)),
        Op::Mul(a, b) => ops::mul(v(a), v(b)),
        Op::Scale(a, k) => Ok(ops::scale(v(a), *k)),
        Op::AddBias(a, b) => ops::add_bias(v(a), v(b)),
        Op::MulBias(a, b) => ops::mul_bias(v(a), v(b)),
        Op::Relu(a) => Ok(ops::relu(v(a))),
        Op::LayerNorm(a) => Ok(ops::layernorm(v(a))),
        Op::Softmax(a) => Ok(ops::softmax(v(a))),
        Op::LogSoftmax(a) => Ok(ops::log_softmax(v(a))),
        Op::Embed { table, ids } => ops::embed(v(table), ids),
        Op::ConcatRows(parts) => {
            let ps: Vec<&Tensor> = parts.iter().map(v).collect();
            ops::concat_rows(&ps)
        }
        Op::ConcatCols(parts) => {
            let ps: Vec<&Tensor> = parts.iter().map(v).collect();
            ops::concat_cols(&ps)
        }
        Op::SliceRows { a, start, len } => ops::slice_rows(v(a), *start, *len),
        Op::SliceCols { a, start, len } => ops::slice_cols(v(a), *start, *len),
        Op::Rope { a, positions, base } => ops::rope(v(a), positions, *base),
        Op::SumAll(a) => Ok(ops::sum_all(v(a))),
        Op::MeanNll { logprobs, picks } => ops::mean_nll(v(logprobs), picks),
        Op::Custom { f, inputs } => {
            let ps: Vec<&Tensor> = inputs.iter().map(v).collect();
            f.forward(&ps)
        }
    }
}

/// Forward kernels shared by the eager pass and replay.
pub(crate) mod ops {
    use super::{Error, Result, Tensor, LAYERNORM_EPS};

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.rc();
        let (k2, n) = b.rc();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = a.row(i);
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += arow[p] as f64 * b.at(p, j) as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(a: &Tensor) -> Tensor {
        let (m, n) = a.rc();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.at(i, j);
            }
        }
        Tensor::matrix(n, m, out).unwrap()
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = a.clone();
        for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
        Ok(out)
    }

    pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = a.clone();
        for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
            *x *= y;
        }
        Ok(out)
    }

    pub fn scale(a: &Tensor, k: f32) -> Tensor {
        let mut out = a.clone();
        for x in out.data_mut() {
            *x *= k;
        }
        out
    }

    pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = a.rc();
        if bias.numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", a.shape(), bias.shape()),
            ));
        }
        let mut out = a.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.at(i, j) + bias.data()[j];
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    pub fn mul_bias(a: &Tensor, gamma: &Tensor) -> Result<Tensor> {
        let (m, n) = a.rc();
        if gamma.numel() != n {
            return Err(Error::shape(
                "mul_bias",
                format!("{:?} * gamma {:?}", a.shape(), gamma.shape()),
            ));
        }
        let mut out = a.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.at(i, j) * gamma.data()[j];
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    pub fn col_sum(a: &Tensor) -> Tensor {
        let (m, n) = a.rc();
        let mut out = vec![0.0f64; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += a.at(i, j) as f64;
            }
        }
        Tensor::vector(out.into_iter().map(|v| v as f32).collect())
    }

    pub fn relu(a: &Tensor) -> Tensor {
        let mut out = a.clone();
        for x in out.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        out
    }

    pub fn layernorm(a: &Tensor) -> Tensor {
        let (m, n) = a.rc();
        let mut out = a.clone();
        for i in 0..m {
            let row = a.row(i);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS as f64).sqrt();
            for j in 0..n {
                out.set(i, j, ((row[j] as f64 - mean) * inv) as f32);
            }
        }
        out
    }

    pub fn layernorm_backward(x: &Tensor, g: &Tensor) -> Tensor {
        let (m, n) = x.rc();
        let mut out = Tensor::zeros(x.shape());
        for i in 0..m {
            let row = x.row(i);
            let grow = g.row(i);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS as f64).sqrt();
            let y: Vec<f64> = row.iter().map(|&v| (v as f64 - mean) * inv).collect();
            let g_mean = grow.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let gy_mean = grow
                .iter()
                .zip(&y)
                .map(|(&gv, &yv)| gv as f64 * yv)
                .sum::<f64>()
                / n as f64;
            for j in 0..n {
                let d = inv * (grow[j] as f64 - g_mean - y[j] * gy_mean);
                out.set(i, j, d as f32);
            }
        }
        out
    }

    pub fn softmax(a: &Tensor) -> Tensor {
        let (m, n) = a.rc();
        let mut out = a.clone();
        for i in 0..m {
            let row = a.row(i);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; n];
            for j in 0..n {
                let e = ((row[j] as f64) - max).exp();
                exps[j] = e;
                denom += e;
            }
            for j in 0..n {
                out.set(i, j, (exps[j] / denom) as f32);
            }
        }
        out
    }

    pub fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
        let (m, n) = y.rc();
        let mut out = Tensor::zeros(y.shape());
        for i in 0..m {
            let yr = y.row(i);
            let gr = g.row(i);
            let dot = yr
                .iter()
                .zip(gr)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
            for j in 0..n {
                out.set(i, j, (yr[j] as f64 * (gr[j] as f64 - dot)) as f32);
            }
        }
        out
    }

    pub fn log_softmax(a: &Tensor) -> Tensor {
        let (m, n) = a.rc();
        let mut out = a.clone();
        for i in 0..m {
            let row = a.row(i);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|&v| ((v as f64) - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..n {
                out.set(i, j, (row[j] as f64 - lse) as f32);
            }
        }
        out
    }

    pub fn log_softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
        let (m, n) = y.rc();
        let mut out = Tensor::zeros(y.shape());
        for i in 0..m {
            let yr = y.row(i);
            let gr = g.row(i);
            let gsum = gr.iter().map(|&v| v as f64).sum::<f64>();
            for j in 0..n {
                let d = gr[j] as f64 - (yr[j] as f64).exp() * gsum;
                out.set(i, j, d as f32);
            }
        }
        out
    }

    pub fn embed(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.rc();
        let mut out = vec![0.0f32; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::shape(
                    "embed",
                    format!("id {} out of table rows {}", id, v),
                ));
            }
            out[r * d..(r + 1) * d].copy_from_slice(table.row(id));
        }
        Tensor::matrix(ids.len(), d, out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts".to_string()));
        }
        let cols = parts[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("col mismatch {} vs {}", p.cols(), cols),
                ));
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        Tensor::matrix(rows, cols, data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let rows = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = vec![0.0f32; rows * total];
        let mut start = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch {} vs {}", p.rows(), rows),
                ));
            }
            for i in 0..rows {
                data[i * total + start..i * total + start + p.cols()]
                    .copy_from_slice(p.row(i));
            }
            start += p.cols();
        }
        Tensor::matrix(rows, total, data)
    }

    pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = a.rc();
        if start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {}", start, start + len, m),
            ));
        }
        Tensor::matrix(len, n, a.data()[start * n..(start + len) * n].to_vec())
    }

    pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = a.rc();
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, n),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&a.row(i)[start..start + len]);
        }
        Tensor::matrix(m, len, data)
    }

    pub fn rope(a: &Tensor, positions: &[usize], base: f32) -> Result<Tensor> {
        let (m, d) = a.rc();
        if positions.len() != m || d % 2 != 0 {
            return Err(Error::shape(
                "rope",
                format!("{:?} with {} positions", a.shape(), positions.len()),
            ));
        }
        let h = d / 2;
        let mut out = a.clone();
        for i in 0..m {
            let pos = positions[i] as f64;
            for j in 0..h {
                let theta = pos * (base as f64).powf(-2.0 * j as f64 / d as f64);
                let (sin, cos) = theta.sin_cos();
                let x = a.at(i, j) as f64;
                let y = a.at(i, j + h) as f64;
                out.set(i, j, (x * cos - y * sin) as f32);
                out.set(i, j + h, (x * sin + y * cos) as f32);
            }
        }
        Ok(out)
    }

    pub fn rope_backward(g: &Tensor, positions: &[usize], base: f32) -> Result<Tensor> {
        let (m, d) = g.rc();
        let h = d / 2;
        let mut out = g.clone();
        for i in 0..m {
            let pos = positions[i] as f64;
            for j in 0..h {
                let theta = pos * (base as f64).powf(-2.0 * j as f64 / d as f64);
                let (sin, cos) = theta.sin_cos();
                let gx = g.at(i, j) as f64;
                let gy = g.at(i, j + h) as f64;
                out.set(i, j, (gx * cos + gy * sin) as f32);
                out.set(i, j + h, (-gx * sin + gy * cos) as f32);
            }
        }
        Ok(out)
    }

    pub fn sum_all(a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().map(|&v| v as f64).sum();
        Tensor::scalar(s as f32)
    }

    pub fn mean_nll(logprobs: &Tensor, picks: &[(usize, usize)]) -> Result<Tensor> {
        if picks.is_empty() {
            return Err(Error::Invalid("mean_nll with no picks".to_string()));
        }
        let (m, n) = logprobs.rc();
        let mut acc = 0.0f64;
        for &(r, c) in picks {
            if r >= m || c >= n {
                return Err(Error::shape(
                    "mean_nll",
                    format!("pick ({}, {}) out of {:?}", r, c, logprobs.shape()),
                ));
            }
            acc -= logprobs.at(r, c) as f64;
        }
        Ok(Tensor::scalar((acc / picks.len() as f64) as f32))
    }
}

impl Tape {
    /// Double-precision replay: same graph, f64 arithmetic end to end.
    /// Used by the finite-difference checker so its function evaluations are
    /// far below the f32 noise floor.
    pub fn replay_f64(&self, inputs: &[&Tensor]) -> Result<Vec<Mat64>> {
        if inputs.len() != self.n_inputs {
            return Err(Error::shape(
                "replay_f64",
                format!("tape has {} inputs, got {}", self.n_inputs, inputs.len()),
            ));
        }
        let mut vals: Vec<Mat64> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input { slot } => Mat64::from_tensor(inputs[*slot]),
                Op::Constant => Mat64::from_tensor(&node.value),
                op => eval_op64(op, &vals)?,
            };
            vals.push(v);
        }
        Ok(vals)
    }
}

fn eval_op64(op: &Op, vals: &[Mat64]) -> Result<Mat64> {
    use std::f64::consts::PI;
    let _ = PI;
    let v = |id: &NodeId| &vals[id.index()];
    Ok(match op {
        Op::Input { .. } | Op::Constant => unreachable!("handled by replay_f64"),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let mut out = Mat64::zeros(a.rows, b.cols);
            for i in 0..a.rows {
                for j in 0..b.cols {
                    let mut acc = 0.0;
                    for p in 0..a.cols {
                        acc += a.at(i, p) * b.at(p, j);
                    }
                    out.set(i, j, acc);
                }
            }
            out
        }
        Op::Transpose(a) => {
            let a = v(a);
            let mut out = Mat64::zeros(a.cols, a.rows);
            for i in 0..a.rows {
                for j in 0..a.cols {
                    out.set(j, i, a.at(i, j));
                }
            }
            out
        }
        Op::Add(a, b) => {
            let (a, b) = (v(a), v(b));
            let mut out = a.clone();
            for (x, y) in out.data.iter_mut().zip(&b.data) {
                *x += y;
            }
            out
        }
        Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            let mut out = a.clone();
            for (x, y) in out.data.iter_mut().zip(&b.data) {
                *x *= y;
            }
            out
        }
        Op::Scale(a, k) => {
            let mut out = v(a).clone();
            for x in out.data.iter_mut() {
                *x *= *k as f64;
            }
            out
        }
        Op::AddBias(a, bias) => {
            let (a, bias) = (v(a), v(bias));
            let mut out = a.clone();
            for i in 0..a.rows {
                for j in 0..a.cols {
                    out.set(i, j, out.at(i, j) + bias.data[j]);
                }
            }
            out
        }
        Op::MulBias(a, gamma) => {
            let (a, gamma) = (v(a), v(gamma));
            let mut out = a.clone();
            for i in 0..a.rows {
                for j in 0..a.cols {
                    out.set(i, j, out.at(i, j) * gamma.data[j]);
                }
            }
            out
        }
        Op::Relu(a) => {
            let mut out = v(a).clone();
            for x in out.data.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
            out
        }
        Op::LayerNorm(a) => {
            let a = v(a);
            let mut out = a.clone();
            for i in 0..a.rows {
                let row = a.row(i);
                let n = a.cols as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + LAYERNORM_EPS as f64).sqrt();
                for j in 0..a.cols {
                    out.set(i, j, (row[j] - mean) * inv);
                }
            }
            out
        }
        Op::Softmax(a) => {
            let a = v(a);
            let mut out = a.clone();
            for i in 0..a.rows {
                let row = a.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..a.cols {
                    out.set(i, j, exps[j] / denom);
                }
            }
            out
        }
        Op::LogSoftmax(a) => {
            let a = v(a);
            let mut out = a.clone();
            for i in 0..a.rows {
                let row = a.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                for j in 0..a.cols {
                    out.set(i, j, row[j] - lse);
                }
            }
            out
        }
        Op::Embed { table, ids } => {
            let t = v(table);
            let mut out = Mat64::zeros(ids.len(), t.cols);
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..t.cols {
                    out.set(r, j, t.at(id, j));
                }
            }
            out
        }
        Op::ConcatRows(parts) => {
            let cols = v(&parts[0]).cols;
            let rows = parts.iter().map(|p| v(p).rows).sum();
            let mut out = Mat64::zeros(rows, cols);
            let mut at = 0;
            for p in parts {
                let p = v(p);
                out.data[at..at + p.data.len()].copy_from_slice(&p.data);
                at += p.data.len();
            }
            out
        }
        Op::ConcatCols(parts) => {
            let rows = v(&parts[0]).rows;
            let cols = parts.iter().map(|p| v(p).cols).sum();
            let mut out = Mat64::zeros(rows, cols);
            let mut start = 0;
            for p in parts {
                let p = v(p);
                for i in 0..rows {
                    for j in 0..p.cols {
                        out.set(i, start + j, p.at(i, j));
                    }
                }
                start += p.cols;
            }
            out
        }
        Op::SliceRows { a, start, len } => {
            let a = v(a);
            let mut out = Mat64::zeros(*len, a.cols);
            out.data
                .copy_from_slice(&a.data[start * a.cols..(start + len) * a.cols]);
            out
        }
        Op::SliceCols { a, start, len } => {
            let a = v(a);
            let mut out = Mat64::zeros(a.rows, *len);
            for i in 0..a.rows {
                for j in 0..*len {
                    out.set(i, j, a.at(i, start + j));
                }
            }
            out
        }
        Op::Rope { a, positions, base } => {
            let a = v(a);
            let h = a.cols / 2;
            let mut out = a.clone();
            for i in 0..a.rows {
                let pos = positions[i] as f64;
                for j in 0..h {
                    let theta = pos * (*base as f64).powf(-2.0 * j as f64 / a.cols as f64);
                    let (sin, cos) = theta.sin_cos();
                    let x = a.at(i, j);
                    let y = a.at(i, j + h);
                    out.set(i, j, x * cos - y * sin);
                    out.set(i, j + h, x * sin + y * cos);
                }
            }
            out
        }
        Op::SumAll(a) => {
            let s: f64 = v(a).data.iter().sum();
            Mat64 {
                rows: 1,
                cols: 1,
                data: vec![s],
            }
        }
        Op::MeanNll { logprobs, picks } => {
            let lp = v(logprobs);
            let mut acc = 0.0;
            for &(r, c) in picks {
                acc -= lp.at(r, c);
            }
            Mat64 {
                rows: 1,
                cols: 1,
                data: vec![acc / picks.len() as f64],
            }
        }
        Op::Custom { f, inputs } => {
            let ps: Vec<&Mat64> = inputs.iter().map(v).collect();
            f.forward_f64(&ps)?
        }
    })
}
