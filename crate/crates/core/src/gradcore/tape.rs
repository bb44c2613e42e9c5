use std::any::Any;
use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Matrix;

pub type NodeId = usize;

/// Opaque per-node forward state kept by fused ops (e.g. aggregator accumulators).
pub type Aux = Box<dyn Any + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sqrt,
    Square,
    Neg,
}

/// How a node propagates cotangents to its inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JacobianMode {
    #[default]
    None,
    /// Each same-shaped input receives the output cotangent unchanged;
    /// `1 x 1` parameter inputs receive nothing.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JacobianOverride {
    pub node: NodeId,
    pub mode: JacobianMode,
}

/// View of an input handed to a fused op.
pub struct FusedInput<'a, T> {
    pub value: &'a Matrix<T>,
    pub aux: Option<&'a Aux>,
}

pub struct FusedBackward<'a, T> {
    pub inputs: &'a [FusedInput<'a, T>],
    pub output: &'a Matrix<T>,
    pub aux: Option<&'a Aux>,
    /// Cotangent of the node's value (zeros when only a carry arrived).
    pub cotangent: &'a Matrix<T>,
    /// State-space cotangent deposited by a downstream fused node.
    pub carry: Option<&'a Matrix<T>>,
}

pub struct FusedGrads<T> {
    pub inputs: Vec<Option<Matrix<T>>>,
    /// State-space cotangent to deposit on one of the inputs.
    pub carry: Option<(usize, Matrix<T>)>,
}

/// A node whose forward and backward are supplied from outside the kernel.
///
/// Fused nodes may keep forward state in [`Aux`] and pass cotangents with
/// respect to that state upstream through the carry channel, which lets a
/// chain of fused nodes implement an online recurrence with exact gradients
/// while each node's value stays the user-visible read-out.
pub trait FusedOp<T: Scalar>: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Output shape for the given input shapes, or a description of the mismatch.
    fn output_shape(&self, inputs: &[(usize, usize)]) -> Result<(usize, usize), String>;

    fn forward(&self, inputs: &[FusedInput<'_, T>]) -> (Matrix<T>, Option<Aux>);

    fn backward(&self, ctx: FusedBackward<'_, T>) -> FusedGrads<T>;
}

#[derive(Clone, Debug)]
pub enum Op<T: Scalar> {
    Leaf { placeholder: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `x (r x c) + b (1 x c)` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `x (r x c) * s (r x 1)` broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId, T),
    Unary(Unary, NodeId),
    /// Elementwise max; ties go to the first operand.
    Max(NodeId, NodeId),
    Clamp(NodeId, T, T),
    MatMul(NodeId, NodeId),
    /// Per-row matrix-vector product: row `r` of the second operand holds a
    /// row-major `(in x out)` matrix applied to row `r` of the first.
    RowMatVec(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice { input: NodeId, start: usize, len: usize },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Row sums, `r x c -> r x 1`.
    SumCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Fused(Arc<dyn FusedOp<T>>, Vec<NodeId>),
}

impl<T: Scalar> Op<T> {
    pub fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulCol(a, b)
            | Max(a, b) | MatMul(a, b) | RowMatVec(a, b) => vec![*a, *b],
            Scale(a, _) | Shift(a, _) | Unary(_, a) | Clamp(a, _, _) | Softmax(a)
            | LogSoftmax(a) | SumCols(a) | Sum(a) | Mean(a) => vec![*a],
            Slice { input, .. } => vec![*input],
            Concat(ids) | Fused(_, ids) => ids.clone(),
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf { .. })
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Matrix<T>,
    aux: Option<Aux>,
    mode: JacobianMode,
    needs_grad: bool,
}

/// Append-only computation record with eager forward evaluation.
///
/// Node ids are assigned in creation order, so every input id is smaller than
/// the id of the node that consumes it.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Read access to node values during (re-)evaluation.
trait Values<T: Scalar> {
    fn value(&self, id: NodeId) -> &Matrix<T>;
    fn aux(&self, id: NodeId) -> Option<&Aux>;
}

impl<T: Scalar> Values<T> for [Node<T>] {
    fn value(&self, id: NodeId) -> &Matrix<T> {
        &self[id].value
    }
    fn aux(&self, id: NodeId) -> Option<&Aux> {
        self[id].aux.as_ref()
    }
}

struct Evaluated<T: Scalar> {
    values: Vec<Matrix<T>>,
    aux: Vec<Option<Aux>>,
}

impl<T: Scalar> Values<T> for Evaluated<T> {
    fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.values[id]
    }
    fn aux(&self, id: NodeId) -> Option<&Aux> {
        self.aux[id].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input with an initial value.
    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push_leaf(value, false, true)
    }

    /// Input that must be bound before [`Tape::eval`]; holds zeros until then.
    pub fn placeholder(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push_leaf(Matrix::zeros(rows, cols), true, true)
    }

    /// Non-differentiable input (masks, noise draws, targets).
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push_leaf(value, false, false)
    }

    fn push_leaf(&mut self, value: Matrix<T>, placeholder: bool, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { placeholder },
            value,
            aux: None,
            mode: JacobianMode::None,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn aux(&self, id: NodeId) -> Option<&Aux> {
        self.nodes[id].aux.as_ref()
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id].op
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].op.is_leaf()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Leaves that receive gradients.
    pub fn inputs(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.is_leaf() && self.nodes[i].needs_grad)
            .collect()
    }

    pub fn overrides(&self) -> Vec<JacobianOverride> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.mode != JacobianMode::None)
            .map(|(node, n)| JacobianOverride { node, mode: n.mode })
            .collect()
    }

    /// Replace the true Jacobian of `node` in the backward pass.
    pub fn set_override(&mut self, node: NodeId, mode: JacobianMode) -> Result<()> {
        if mode == JacobianMode::Identity {
            let n = &self.nodes[node];
            if n.op.is_leaf() {
                return Err(Error::Override {
                    node,
                    detail: "leaves have no Jacobian".into(),
                });
            }
            let out = n.value.shape();
            for i in n.op.inputs() {
                let s = self.nodes[i].value.shape();
                if s != out && s != (1, 1) {
                    return Err(Error::Override {
                        node,
                        detail: format!("input {i} is {s:?} but output is {out:?}"),
                    });
                }
            }
        }
        self.nodes[node].mode = mode;
        Ok(())
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        let inputs = op.inputs();
        for &i in &inputs {
            if i >= id {
                return Err(Error::Shape {
                    node: id,
                    detail: format!("input {i} does not exist yet"),
                });
            }
        }
        check_shapes(&op, self.nodes.as_slice(), id)?;
        let (value, aux) = forward(&op, self.nodes.as_slice());
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            aux,
            mode: JacobianMode::None,
            needs_grad,
        });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(x, bias))
    }
    pub fn mul_col(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::MulCol(x, s))
    }
    pub fn scale(&mut self, a: NodeId, k: T) -> Result<NodeId> {
        self.push(Op::Scale(a, k))
    }
    pub fn shift(&mut self, a: NodeId, k: T) -> Result<NodeId> {
        self.push(Op::Shift(a, k))
    }
    pub fn unary(&mut self, f: Unary, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(f, a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Softplus, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Square, a)
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Neg, a)
    }
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Max(a, b))
    }
    /// Elementwise min, written as `-max(-a, -b)`; ties go to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.neg(a)?;
        let nb = self.neg(b)?;
        let m = self.max(na, nb)?;
        self.neg(m)
    }
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.push(Op::Clamp(a, lo, hi))
    }
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(x, w))
    }
    pub fn row_matvec(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::RowMatVec(x, w))
    }
    /// `x W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec()))
    }
    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice { input, start, len })
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumCols(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }
    pub fn fused(&mut self, op: Arc<dyn FusedOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Fused(op, inputs.to_vec()))
    }

    /// Forward values of every node with `bindings` replacing leaf values.
    pub fn eval(&self, bindings: &HashMap<NodeId, Matrix<T>>) -> Result<Vec<Matrix<T>>> {
        Ok(self.evaluate(bindings)?.values)
    }

    fn evaluate(&self, bindings: &HashMap<NodeId, Matrix<T>>) -> Result<Evaluated<T>> {
        for (&id, m) in bindings {
            let node = self.nodes.get(id).ok_or(Error::NotALeaf(id))?;
            if !node.op.is_leaf() {
                return Err(Error::NotALeaf(id));
            }
            if m.shape() != node.value.shape() {
                return Err(Error::Shape {
                    node: id,
                    detail: format!(
                        "bound {:?}, declared {:?}",
                        m.shape(),
                        node.value.shape()
                    ),
                });
            }
        }
        let mut ev = Evaluated {
            values: Vec::with_capacity(self.nodes.len()),
            aux: Vec::with_capacity(self.nodes.len()),
        };
        for (id, node) in self.nodes.iter().enumerate() {
            let (v, a) = match &node.op {
                Op::Leaf { placeholder } => match bindings.get(&id) {
                    Some(m) => (m.clone(), None),
                    None if *placeholder => return Err(Error::Unbound(id)),
                    None => (node.value.clone(), None),
                },
                op => forward(op, &ev),
            };
            ev.values.push(v);
            ev.aux.push(a);
        }
        Ok(ev)
    }

    /// A copy of this tape re-evaluated under `bindings`, keeping overrides.
    pub fn rebind(&self, bindings: &HashMap<NodeId, Matrix<T>>) -> Result<Tape<T>> {
        let ev = self.evaluate(bindings)?;
        let nodes = self
            .nodes
            .iter()
            .zip(ev.values.into_iter().zip(ev.aux))
            .map(|(n, (value, aux))| Node {
                op: n.op.clone(),
                value,
                aux,
                mode: n.mode,
                needs_grad: n.needs_grad,
            })
            .collect();
        Ok(Tape { nodes })
    }

    /// Replaces leaf values from `bindings` and recomputes every node in place.
    pub fn update(&mut self, bindings: &HashMap<NodeId, Matrix<T>>) -> Result<()> {
        let ev = self.evaluate(bindings)?;
        for (n, (value, aux)) in self.nodes.iter_mut().zip(ev.values.into_iter().zip(ev.aux)) {
            n.value = value;
            n.aux = aux;
        }
        Ok(())
    }

    /// Reverse accumulation from `output`. Without a seed, `output` must be `1 x 1`.
    pub fn backward(&self, output: NodeId, seed: Option<Matrix<T>>) -> Result<Gradients<T>> {
        let out_shape = self.nodes[output].value.shape();
        let seed = match seed {
            Some(s) if s.shape() == out_shape => s,
            Some(s) => {
                return Err(Error::Shape {
                    node: output,
                    detail: format!("seed {:?} for output {:?}", s.shape(), out_shape),
                })
            }
            None if out_shape == (1, 1) => Matrix::scalar(T::one()),
            None => return Err(Error::NonScalarOutput(output)),
        };
        let n = output + 1;
        let mut cots: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        let mut carries: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        cots[output] = Some(seed);

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if node.op.is_leaf() || !node.needs_grad {
                continue;
            }
            let carry = carries[id].take();
            if cots[id].is_none() && carry.is_none() {
                continue;
            }
            let cot = match &cots[id] {
                Some(c) => c.clone(),
                None => Matrix::zeros(node.value.rows(), node.value.cols()),
            };
            let inputs = node.op.inputs();
            if node.mode == JacobianMode::Identity {
                for &i in &inputs {
                    if self.nodes[i].needs_grad && self.nodes[i].value.shape() == cot.shape() {
                        accumulate(&mut cots[i], &cot);
                    }
                }
                continue;
            }
            let (grads, carry_out) = self.local_backward(id, &cot, carry.as_ref());
            for (&i, g) in inputs.iter().zip(grads) {
                if let Some(g) = g {
                    if self.nodes[i].needs_grad {
                        accumulate(&mut cots[i], &g);
                    }
                }
            }
            if let Some((k, c)) = carry_out {
                let target = inputs[k];
                if self.nodes[target].needs_grad {
                    accumulate(&mut carries[target], &c);
                }
            }
        }
        Ok(Gradients { cots })
    }

    /// `tape_grad`: gradients of `output` with respect to every input, after
    /// re-evaluating under `bindings`.
    pub fn grad(
        &self,
        output: NodeId,
        bindings: &HashMap<NodeId, Matrix<T>>,
        seed: Option<Matrix<T>>,
    ) -> Result<HashMap<NodeId, Matrix<T>>> {
        let tape = if bindings.is_empty() {
            None
        } else {
            Some(self.rebind(bindings)?)
        };
        let t = tape.as_ref().unwrap_or(self);
        let g = t.backward(output, seed)?;
        Ok(t
            .inputs()
            .into_iter()
            .filter(|&i| i <= output)
            .map(|i| (i, g.wrt(i, t.shape(i))))
            .collect())
    }

    fn local_backward(
        &self,
        id: NodeId,
        cot: &Matrix<T>,
        carry: Option<&Matrix<T>>,
    ) -> (Vec<Option<Matrix<T>>>, Option<(usize, Matrix<T>)>) {
        let node = &self.nodes[id];
        let v = |i: NodeId| &self.nodes[i].value;
        let y = &node.value;
        let one = T::one();
        let grads = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add(..) => vec![Some(cot.clone()), Some(cot.clone())],
            Op::Sub(..) => vec![Some(cot.clone()), Some(cot.map(|g| -g))],
            Op::Mul(a, b) => vec![
                Some(cot.zip_map(v(*b), |g, x| g * x)),
                Some(cot.zip_map(v(*a), |g, x| g * x)),
            ],
            Op::Div(_, b) => {
                let da = cot.zip_map(v(*b), |g, x| g / x);
                let mut db = cot.zip_map(y, |g, q| -g * q);
                for (d, &x) in db.data_mut().iter_mut().zip(v(*b).data()) {
                    *d /= x;
                }
                vec![Some(da), Some(db)]
            }
            Op::AddRow(..) => {
                let mut db = Matrix::zeros(1, cot.cols());
                for r in 0..cot.rows() {
                    for (d, &g) in db.data_mut().iter_mut().zip(cot.row(r)) {
                        *d += g;
                    }
                }
                vec![Some(cot.clone()), Some(db)]
            }
            Op::MulCol(x, s) => {
                let (xv, sv) = (v(*x), v(*s));
                let mut dx = cot.clone();
                let mut ds = Matrix::zeros(sv.rows(), 1);
                for r in 0..cot.rows() {
                    let k = sv.get(r, 0);
                    let mut acc = T::zero();
                    for (d, &xe) in dx.row_mut(r).iter_mut().zip(xv.row(r)) {
                        acc += *d * xe;
                        *d *= k;
                    }
                    ds.set(r, 0, acc);
                }
                vec![Some(dx), Some(ds)]
            }
            Op::Scale(_, k) => vec![Some(cot.map(|g| g * *k))],
            Op::Shift(..) => vec![Some(cot.clone())],
            Op::Unary(f, a) => {
                let x = v(*a);
                let mut d = cot.clone();
                for ((g, &xe), &ye) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    let local = match f {
                        Unary::Tanh => one - ye * ye,
                        Unary::Sigmoid => ye * (one - ye),
                        Unary::Exp => ye,
                        Unary::Log => one / xe,
                        Unary::Softplus => sigmoid(xe),
                        Unary::Sqrt => T::of(0.5) / ye,
                        Unary::Square => T::of(2.0) * xe,
                        Unary::Neg => -one,
                    };
                    *g *= local;
                }
                vec![Some(d)]
            }
            Op::Max(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let mut da = cot.clone();
                let mut db = cot.clone();
                for i in 0..cot.len() {
                    if bv.data()[i] > av.data()[i] {
                        da.data_mut()[i] = T::zero();
                    } else {
                        db.data_mut()[i] = T::zero();
                    }
                }
                vec![Some(da), Some(db)]
            }
            Op::Clamp(a, lo, hi) => {
                let x = v(*a);
                vec![Some(cot.zip_map(x, |g, xe| {
                    if xe >= *lo && xe <= *hi {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }
            Op::MatMul(x, w) => {
                let (xv, wv) = (v(*x), v(*w));
                let dx = if self.nodes[*x].needs_grad {
                    Some(cot.matmul_nt(wv))
                } else {
                    None
                };
                let dw = if self.nodes[*w].needs_grad {
                    Some(xv.matmul_tn(cot))
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::RowMatVec(x, w) => {
                let (xv, wv) = (v(*x), v(*w));
                let (n_in, n_out) = (xv.cols(), cot.cols());
                let mut dx = Matrix::zeros(xv.rows(), n_in);
                let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                for r in 0..xv.rows() {
                    let g = cot.row(r);
                    let wr = wv.row(r);
                    let xr = xv.row(r);
                    let dxr = dx.row_mut(r);
                    for i in 0..n_in {
                        let wrow = &wr[i * n_out..(i + 1) * n_out];
                        dxr[i] = wrow.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    }
                    let dwr = dw.row_mut(r);
                    for i in 0..n_in {
                        let xi = xr[i];
                        for (d, &ge) in dwr[i * n_out..(i + 1) * n_out].iter_mut().zip(g) {
                            *d = xi * ge;
                        }
                    }
                }
                vec![Some(dx), Some(dw)]
            }
            Op::Concat(ids) => {
                let mut at = 0;
                ids.iter()
                    .map(|&i| {
                        let c = v(i).cols();
                        let s = cot.slice_cols(at, c);
                        at += c;
                        Some(s)
                    })
                    .collect()
            }
            Op::Slice { input, start, len } => {
                let x = v(*input);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    d.row_mut(r)[*start..start + len].copy_from_slice(cot.row(r));
                }
                vec![Some(d)]
            }
            Op::Softmax(_) => {
                let mut d = cot.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: T = cot.row(r).iter().zip(yr).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in d.row_mut(r).iter_mut().zip(yr) {
                        *g = p * (*g - dot);
                    }
                }
                vec![Some(d)]
            }
            Op::LogSoftmax(_) => {
                let mut d = cot.clone();
                for r in 0..y.rows() {
                    let total: T = cot.row(r).iter().copied().sum();
                    for (g, &ly) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *g -= ly.exp() * total;
                    }
                }
                vec![Some(d)]
            }
            Op::SumCols(a) => {
                let x = v(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let g = cot.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|e| *e = g);
                }
                vec![Some(d)]
            }
            Op::Sum(a) => {
                let (r, c) = v(*a).shape();
                vec![Some(Matrix::filled(r, c, cot.item()))]
            }
            Op::Mean(a) => {
                let (r, c) = v(*a).shape();
                vec![Some(Matrix::filled(r, c, cot.item() / T::of((r * c) as f64)))]
            }
            Op::Fused(f, ids) => {
                let inputs: Vec<FusedInput<'_, T>> = ids
                    .iter()
                    .map(|&i| FusedInput {
                        value: v(i),
                        aux: self.nodes[i].aux.as_ref(),
                    })
                    .collect();
                let g = f.backward(FusedBackward {
                    inputs: &inputs,
                    output: y,
                    aux: node.aux.as_ref(),
                    cotangent: cot,
                    carry,
                });
                return (g.inputs, g.carry);
            }
        };
        (grads, None)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: &Matrix<T>) {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

/// Cotangents produced by [`Tape::backward`], indexed by node id.
pub struct Gradients<T: Scalar> {
    cots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Cotangent of any node on the path to the output, if one arrived.
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.cots.get(id).and_then(Option::as_ref)
    }

    /// Cotangent of `id`, zeros of `shape` when nothing arrived.
    pub fn wrt(&self, id: NodeId, shape: (usize, usize)) -> Matrix<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn check_shapes<T: Scalar>(op: &Op<T>, nodes: &[Node<T>], id: NodeId) -> Result<()> {
    let s = |i: NodeId| nodes[i].value.shape();
    let bad = |detail: String| Err(Error::Shape { node: id, detail });
    match op {
        Op::Leaf { .. } => Ok(()),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Max(a, b) => {
            if s(*a) != s(*b) {
                return bad(format!("elementwise {:?} vs {:?}", s(*a), s(*b)));
            }
            Ok(())
        }
        Op::AddRow(x, b) => {
            if s(*b) != (1, s(*x).1) {
                return bad(format!("row bias {:?} for {:?}", s(*b), s(*x)));
            }
            Ok(())
        }
        Op::MulCol(x, c) => {
            if s(*c) != (s(*x).0, 1) {
                return bad(format!("column scale {:?} for {:?}", s(*c), s(*x)));
            }
            Ok(())
        }
        Op::MatMul(x, w) => {
            if s(*x).1 != s(*w).0 {
                return bad(format!("matmul {:?} x {:?}", s(*x), s(*w)));
            }
            Ok(())
        }
        Op::RowMatVec(x, w) => {
            let (xs, ws) = (s(*x), s(*w));
            if xs.0 != ws.0 || xs.1 == 0 || ws.1 % xs.1 != 0 {
                return bad(format!("row matvec {xs:?} with weights {ws:?}"));
            }
            Ok(())
        }
        Op::Concat(ids) => {
            if ids.is_empty() {
                return bad("empty concat".into());
            }
            let r = s(ids[0]).0;
            if ids.iter().any(|&i| s(i).0 != r) {
                return bad("concat of differing row counts".into());
            }
            Ok(())
        }
        Op::Slice { input, start, len } => {
            if start + len > s(*input).1 {
                return bad(format!("slice {start}+{len} of {:?}", s(*input)));
            }
            Ok(())
        }
        Op::Fused(f, ids) => {
            let shapes: Vec<_> = ids.iter().map(|&i| s(i)).collect();
            f.output_shape(&shapes).map(|_| ()).or_else(|e| bad(format!("{}: {e}", f.name())))
        }
        _ => Ok(()),
    }
}

fn forward<T: Scalar, V: Values<T> + ?Sized>(op: &Op<T>, vals: &V) -> (Matrix<T>, Option<Aux>) {
    let v = |i: NodeId| vals.value(i);
    let value = match op {
        Op::Leaf { .. } => unreachable!("leaves are not recomputed"),
        Op::Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
        Op::Sub(a, b) => v(*a).zip_map(v(*b), |x, y| x - y),
        Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
        Op::Div(a, b) => v(*a).zip_map(v(*b), |x, y| x / y),
        Op::AddRow(x, b) => {
            let mut out = v(*x).clone();
            let bias = v(*b).data();
            for r in 0..out.rows() {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += bv;
                }
            }
            out
        }
        Op::MulCol(x, c) => {
            let mut out = v(*x).clone();
            let cv = v(*c);
            for r in 0..out.rows() {
                let k = cv.get(r, 0);
                out.row_mut(r).iter_mut().for_each(|o| *o *= k);
            }
            out
        }
        Op::Scale(a, k) => v(*a).map(|x| x * *k),
        Op::Shift(a, k) => v(*a).map(|x| x + *k),
        Op::Unary(f, a) => v(*a).map(|x| match f {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Neg => -x,
        }),
        Op::Max(a, b) => v(*a).zip_map(v(*b), |x, y| if y > x { y } else { x }),
        Op::Clamp(a, lo, hi) => v(*a).map(|x| x.max(*lo).min(*hi)),
        Op::MatMul(x, w) => v(*x).matmul(v(*w)),
        Op::RowMatVec(x, w) => {
            let (xv, wv) = (v(*x), v(*w));
            let n_in = xv.cols();
            let n_out = wv.cols() / n_in;
            let mut out = Matrix::zeros(xv.rows(), n_out);
            for r in 0..xv.rows() {
                let wr = wv.row(r);
                let xr = xv.row(r);
                let o = out.row_mut(r);
                for i in 0..n_in {
                    let xi = xr[i];
                    for (d, &we) in o.iter_mut().zip(&wr[i * n_out..(i + 1) * n_out]) {
                        *d += xi * we;
                    }
                }
            }
            out
        }
        Op::Concat(ids) => {
            let parts: Vec<&Matrix<T>> = ids.iter().map(|&i| v(i)).collect();
            Matrix::hconcat(&parts).expect("shapes checked")
        }
        Op::Slice { input, start, len } => v(*input).slice_cols(*start, *len),
        Op::Softmax(a) => {
            let mut out = v(*a).clone();
            for r in 0..out.rows() {
                softmax_row(out.row_mut(r));
            }
            out
        }
        Op::LogSoftmax(a) => {
            let mut out = v(*a).clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        }
        Op::SumCols(a) => {
            let x = v(*a);
            let mut out = Matrix::zeros(x.rows(), 1);
            for r in 0..x.rows() {
                out.set(r, 0, x.row(r).iter().copied().sum());
            }
            out
        }
        Op::Sum(a) => Matrix::scalar(v(*a).sum()),
        Op::Mean(a) => {
            let x = v(*a);
            Matrix::scalar(x.sum() / T::of(x.len() as f64))
        }
        Op::Fused(f, ids) => {
            let inputs: Vec<FusedInput<'_, T>> = ids
                .iter()
                .map(|&i| FusedInput {
                    value: vals.value(i),
                    aux: vals.aux(i),
                })
                .collect();
            return f.forward(&inputs);
        }
    };
    (value, None)
}

/// In-place max-shifted softmax of one row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}
