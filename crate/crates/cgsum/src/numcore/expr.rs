//! The expression graph: eagerly-evaluated tape with reverse-mode autodiff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::Tensor;

pub type NodeId = usize;

/// Inputs to `log` are clamped here to avoid `-inf`.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op} (node {node}): {details}")]
    Shape { op: &'static str, node: NodeId, details: String },
    #[error("backward target node {0} is not a scalar")]
    NonScalarOutput(NodeId),
}

/// Operation kinds. Tensors are rank 1 or 2; `[1]` plays the scalar role.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input or parameter; `trainable` marks gradient targets.
    Leaf { trainable: bool },
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[m,k] x [k] -> [m]`
    MatVec,
    /// Elementwise `a + b`, same shape.
    Add,
    /// Elementwise `a - b`, same shape.
    Sub,
    /// `[n,d] + [d]` broadcast over rows.
    AddRowBroadcast,
    /// Elementwise `a * b`, same shape.
    Mul,
    /// `a * s` where `s` is a `[1]` node.
    MulScalarNode,
    /// `x * c` for a compile-time constant.
    ScaleConst(f64),
    /// `x + c` for a compile-time constant.
    AddConst(f64),
    /// Concatenate rank-1 inputs.
    Concat,
    /// Stack k rank-1 inputs of equal length into `[k,d]`.
    StackRows,
    /// Select row `r` of a `[k,d]` input -> `[d]` (embedding lookup).
    Row(usize),
    /// Contiguous slice of a rank-1 input.
    Slice { start: usize, len: usize },
    Tanh,
    Sigmoid,
    /// Numerically-stable softmax over a rank-1 input.
    Softmax,
    /// `ln(max(x, LOG_CLAMP))` elementwise.
    LogClamped,
    /// Sum of all elements -> `[1]`.
    SumAll,
    /// Mean of all elements -> `[1]`.
    MeanAll,
    /// Mean over rows of `[k,d]` -> `[d]`.
    MeanRows,
    /// `([k,d], [k]) -> [d]`: sum_i w_i * row_i (attention context).
    WeightedSumRows,
    /// Elementwise `min(a, b)`; gradient follows the smaller side.
    MinElem,
    /// Element `i` of a rank-1 input -> `[1]`.
    IndexScalar(usize),
    /// Sum of the selected elements of a rank-1 input -> `[1]`.
    SelectSum(Vec<usize>),
    /// Inverted dropout with a mask frozen at node creation.
    Dropout { mask: Tensor },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients per node id, produced by [`ExprGraph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// A tape of operations. Nodes are evaluated when added; inputs always
/// precede outputs, so the vector order is a topological order.
pub struct ExprGraph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for ExprGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl ExprGraph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        ExprGraph { nodes: Vec::new(), training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Training-mode graph: dropout draws masks from the seeded stream.
    pub fn new_training(seed: u64) -> Self {
        ExprGraph { nodes: Vec::new(), training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, NumError> {
        let id = self.nodes.len();
        let value = {
            let input_tensors: Vec<&Tensor> =
                inputs.iter().map(|&i| &self.nodes[i].value).collect();
            eval_op(&op, &input_tensors, id)?
        };
        self.nodes.push(Node { op, inputs, value });
        Ok(id)
    }

    // -- leaves ------------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf { trainable: false }, inputs: vec![], value });
        id
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf { trainable: true }, inputs: vec![], value });
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf { .. })
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf { trainable: true })
    }

    /// Overwrite a leaf's value (used by the finite-difference checker).
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor) {
        assert!(self.is_leaf(id), "node {id} is not a leaf");
        assert_eq!(self.nodes[id].value.shape(), value.shape());
        self.nodes[id].value = value;
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::MatVec, vec![a, x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::AddRowBroadcast, vec![m, v])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::MulScalarNode, vec![a, s])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumError> {
        self.push(Op::ScaleConst(c), vec![a])
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumError> {
        self.push(Op::AddConst(c), vec![a])
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let neg = self.scale(a, -1.0)?;
        self.add_const(neg, 1.0)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumError> {
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, NumError> {
        self.push(Op::StackRows, rows.to_vec())
    }

    pub fn row(&mut self, m: NodeId, r: usize) -> Result<NodeId, NumError> {
        self.push(Op::Row(r), vec![m])
    }

    pub fn slice(&mut self, v: NodeId, start: usize, len: usize) -> Result<NodeId, NumError> {
        self.push(Op::Slice { start, len }, vec![v])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::Softmax, vec![a])
    }

    pub fn log_clamped(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::LogClamped, vec![a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::MeanAll, vec![a])
    }

    pub fn mean_rows(&mut self, m: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::MeanRows, vec![m])
    }

    pub fn weighted_sum_rows(&mut self, m: NodeId, w: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::WeightedSumRows, vec![m, w])
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.push(Op::MinElem, vec![a, b])
    }

    pub fn index_scalar(&mut self, v: NodeId, i: usize) -> Result<NodeId, NumError> {
        self.push(Op::IndexScalar(i), vec![v])
    }

    pub fn select_sum(&mut self, v: NodeId, indices: Vec<usize>) -> Result<NodeId, NumError> {
        self.push(Op::SelectSum(indices), vec![v])
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; the mask is
    /// frozen into the node so re-forwarding is deterministic. In
    /// evaluation mode this is the identity (no node added).
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId, NumError> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        let shape = self.nodes[a].value.shape().to_vec();
        let keep = 1.0 - p;
        let mask_data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let mask = Tensor::new(shape, mask_data);
        self.push(Op::Dropout { mask }, vec![a])
    }

    // -- evaluation --------------------------------------------------------

    /// Re-evaluate every non-leaf node from current leaf values, in the
    /// tape's topological order (dropout masks are reused). Returns the
    /// value of the last node.
    pub fn reforward(&mut self) -> Result<(), NumError> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                continue;
            }
            let value = {
                let node = &self.nodes[id];
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                eval_op(&node.op, &inputs, id)?
            };
            self.nodes[id].value = value;
        }
        Ok(())
    }

    /// Reverse-mode accumulation from a scalar output. Returns one
    /// gradient tensor per reached node (same shape as the node value).
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients, NumError> {
        if !self.nodes[output].value.is_scalar() {
            return Err(NumError::NonScalarOutput(output));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output] = Some(Tensor::scalar(1.0));

        for id in (0..=output).rev() {
            let Some(gout) = grads[id].take() else { continue };
            {
                let node = &self.nodes[id];
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let contribs = backward_op(&node.op, &inputs, &node.value, &gout);
                for (slot, contrib) in node.inputs.clone().into_iter().zip(contribs) {
                    if let Some(c) = contrib {
                        match &mut grads[slot] {
                            Some(acc) => acc.add_assign(&c),
                            g @ None => *g = Some(c),
                        }
                    }
                }
            }
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

fn shape_err(op: &'static str, node: NodeId, details: String) -> NumError {
    NumError::Shape { op, node, details }
}

fn want_rank1(op: &'static str, node: NodeId, t: &Tensor) -> Result<(), NumError> {
    if t.shape().len() == 1 {
        Ok(())
    } else {
        Err(shape_err(op, node, format!("expected rank-1, got {:?}", t.shape())))
    }
}

fn eval_op(op: &Op, inputs: &[&Tensor], node: NodeId) -> Result<Tensor, NumError> {
    match op {
        Op::Leaf { .. } => unreachable!("leaves are never evaluated"),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(
                    "matmul",
                    node,
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = a.row(i);
                for (kk, &av) in arow.iter().enumerate().take(k) {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = b.row(kk);
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok(Tensor::matrix(m, n, out))
        }
        Op::MatVec => {
            let (a, x) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || x.shape().len() != 1 || a.shape()[1] != x.shape()[0] {
                return Err(shape_err(
                    "matvec",
                    node,
                    format!("{:?} x {:?}", a.shape(), x.shape()),
                ));
            }
            let m = a.shape()[0];
            let out: Vec<f64> = (0..m)
                .map(|i| a.row(i).iter().zip(x.data()).map(|(av, xv)| av * xv).sum())
                .collect();
            Ok(Tensor::vector(out))
        }
        Op::Add | Op::Sub | Op::Mul | Op::MinElem => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(
                    "elementwise",
                    node,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                Op::Mul => |x, y| x * y,
                _ => f64::min,
            };
            let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::new(a.shape().to_vec(), out))
        }
        Op::AddRowBroadcast => {
            let (m, v) = (inputs[0], inputs[1]);
            if m.shape().len() != 2 || v.shape().len() != 1 || m.shape()[1] != v.shape()[0] {
                return Err(shape_err(
                    "add_row_broadcast",
                    node,
                    format!("{:?} + {:?}", m.shape(), v.shape()),
                ));
            }
            let cols = m.cols();
            let out = m
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + v.data()[i % cols])
                .collect();
            Ok(Tensor::new(m.shape().to_vec(), out))
        }
        Op::MulScalarNode => {
            let (a, s) = (inputs[0], inputs[1]);
            if !s.is_scalar() {
                return Err(shape_err("mul_scalar_node", node, format!("{:?}", s.shape())));
            }
            let sv = s.item();
            Ok(Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * sv).collect()))
        }
        Op::ScaleConst(c) => {
            Ok(Tensor::new(inputs[0].shape().to_vec(), inputs[0].data().iter().map(|x| x * c).collect()))
        }
        Op::AddConst(c) => {
            Ok(Tensor::new(inputs[0].shape().to_vec(), inputs[0].data().iter().map(|x| x + c).collect()))
        }
        Op::Concat => {
            let mut out = Vec::new();
            for t in inputs {
                want_rank1("concat", node, t)?;
                out.extend_from_slice(t.data());
            }
            Ok(Tensor::vector(out))
        }
        Op::StackRows => {
            if inputs.is_empty() {
                return Err(shape_err("stack_rows", node, "no rows".into()));
            }
            let d = inputs[0].len();
            let mut out = Vec::with_capacity(inputs.len() * d);
            for t in inputs {
                want_rank1("stack_rows", node, t)?;
                if t.len() != d {
                    return Err(shape_err("stack_rows", node, "row lengths differ".into()));
                }
                out.extend_from_slice(t.data());
            }
            Ok(Tensor::matrix(inputs.len(), d, out))
        }
        Op::Row(r) => {
            let m = inputs[0];
            if m.shape().len() != 2 || *r >= m.shape()[0] {
                return Err(shape_err("row", node, format!("row {r} of {:?}", m.shape())));
            }
            Ok(Tensor::vector(m.row(*r).to_vec()))
        }
        Op::Slice { start, len } => {
            let v = inputs[0];
            want_rank1("slice", node, v)?;
            if start + len > v.len() {
                return Err(shape_err("slice", node, format!("{start}+{len} > {}", v.len())));
            }
            Ok(Tensor::vector(v.data()[*start..start + len].to_vec()))
        }
        Op::Tanh => Ok(Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|x| x.tanh()).collect(),
        )),
        Op::Sigmoid => Ok(Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        )),
        Op::Softmax => {
            let x = inputs[0];
            want_rank1("softmax", node, x)?;
            if x.is_empty() {
                return Err(shape_err("softmax", node, "empty input".into()));
            }
            let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = x.data().iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Ok(Tensor::vector(exps.into_iter().map(|e| e / sum).collect()))
        }
        Op::LogClamped => Ok(Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|x| x.max(LOG_CLAMP).ln()).collect(),
        )),
        Op::SumAll => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::MeanAll => {
            let t = inputs[0];
            if t.is_empty() {
                return Err(shape_err("mean_all", node, "empty input".into()));
            }
            Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64))
        }
        Op::MeanRows => {
            let m = inputs[0];
            if m.shape().len() != 2 || m.shape()[0] == 0 {
                return Err(shape_err("mean_rows", node, format!("{:?}", m.shape())));
            }
            let (k, d) = (m.shape()[0], m.shape()[1]);
            let mut out = vec![0.0; d];
            for r in 0..k {
                for (o, v) in out.iter_mut().zip(m.row(r)) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= k as f64;
            }
            Ok(Tensor::vector(out))
        }
        Op::WeightedSumRows => {
            let (m, w) = (inputs[0], inputs[1]);
            if m.shape().len() != 2 || w.shape().len() != 1 || m.shape()[0] != w.shape()[0] {
                return Err(shape_err(
                    "weighted_sum_rows",
                    node,
                    format!("{:?} with {:?}", m.shape(), w.shape()),
                ));
            }
            let d = m.cols();
            let mut out = vec![0.0; d];
            for (r, &wr) in w.data().iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                for (o, v) in out.iter_mut().zip(m.row(r)) {
                    *o += wr * v;
                }
            }
            Ok(Tensor::vector(out))
        }
        Op::IndexScalar(i) => {
            let v = inputs[0];
            want_rank1("index_scalar", node, v)?;
            if *i >= v.len() {
                return Err(shape_err("index_scalar", node, format!("{i} >= {}", v.len())));
            }
            Ok(Tensor::scalar(v.data()[*i]))
        }
        Op::SelectSum(indices) => {
            let v = inputs[0];
            want_rank1("select_sum", node, v)?;
            if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
                return Err(shape_err("select_sum", node, format!("{bad} >= {}", v.len())));
            }
            Ok(Tensor::scalar(indices.iter().map(|&i| v.data()[i]).sum()))
        }
        Op::Dropout { mask } => {
            let x = inputs[0];
            if x.shape() != mask.shape() {
                return Err(shape_err("dropout", node, "mask shape mismatch".into()));
            }
            Ok(Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect(),
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Backward kernels
// ---------------------------------------------------------------------------

/// Gradient contributions per input, given the upstream gradient `g`
/// (same shape as `out`).
fn backward_op(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            // dA = g . B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                let grow = g.row(i);
                for kk in 0..k {
                    da[i * k + kk] = grow.iter().zip(b.row(kk)).map(|(&gv, &bv)| gv * bv).sum();
                }
            }
            // dB = A^T . g
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let arow = a.row(i);
                let grow = g.row(i);
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let drow = &mut db[kk * n..(kk + 1) * n];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
            vec![Some(Tensor::matrix(m, k, da)), Some(Tensor::matrix(k, n, db))]
        }
        Op::MatVec => {
            let (a, x) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                let gv = g.data()[i];
                if gv != 0.0 {
                    for (d, &xv) in da[i * k..(i + 1) * k].iter_mut().zip(x.data()) {
                        *d = gv * xv;
                    }
                }
            }
            let mut dx = vec![0.0; k];
            for i in 0..m {
                let gv = g.data()[i];
                if gv == 0.0 {
                    continue;
                }
                for (d, &av) in dx.iter_mut().zip(a.row(i)) {
                    *d += gv * av;
                }
            }
            vec![Some(Tensor::matrix(m, k, da)), Some(Tensor::vector(dx))]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => {
            let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| -x).collect());
            vec![Some(g.clone()), Some(neg)]
        }
        Op::AddRowBroadcast => {
            let cols = inputs[0].cols();
            let mut dv = vec![0.0; cols];
            for (i, &gv) in g.data().iter().enumerate() {
                dv[i % cols] += gv;
            }
            vec![Some(g.clone()), Some(Tensor::vector(dv))]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = g.data().iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
            let db = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
            vec![
                Some(Tensor::new(a.shape().to_vec(), da)),
                Some(Tensor::new(b.shape().to_vec(), db)),
            ]
        }
        Op::MulScalarNode => {
            let (a, s) = (inputs[0], inputs[1]);
            let sv = s.item();
            let da = g.data().iter().map(|&gv| gv * sv).collect();
            let ds: f64 = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).sum();
            vec![Some(Tensor::new(a.shape().to_vec(), da)), Some(Tensor::scalar(ds))]
        }
        Op::ScaleConst(c) => {
            let da = g.data().iter().map(|&gv| gv * c).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), da))]
        }
        Op::AddConst(_) => vec![Some(g.clone())],
        Op::Concat => {
            let mut off = 0;
            inputs
                .iter()
                .map(|t| {
                    let part = Tensor::vector(g.data()[off..off + t.len()].to_vec());
                    off += t.len();
                    Some(part)
                })
                .collect()
        }
        Op::StackRows => (0..inputs.len())
            .map(|r| Some(Tensor::vector(g.row(r).to_vec())))
            .collect(),
        Op::Row(r) => {
            let m = inputs[0];
            let mut dm = Tensor::zeros(m.shape().to_vec());
            {
                let cols = m.cols();
                let data = dm.data_mut();
                data[r * cols..(r + 1) * cols].copy_from_slice(g.data());
            }
            vec![Some(dm)]
        }
        Op::Slice { start, len } => {
            let v = inputs[0];
            let mut dv = Tensor::zeros(v.shape().to_vec());
            dv.data_mut()[*start..start + len].copy_from_slice(g.data());
            vec![Some(dv)]
        }
        Op::Tanh => {
            let da = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| gv * (1.0 - y * y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), da))]
        }
        Op::Sigmoid => {
            let da = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| gv * y * (1.0 - y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), da))]
        }
        Op::Softmax => {
            let y = out.data();
            let dot: f64 = g.data().iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
            let da = g.data().iter().zip(y).map(|(&gv, &yv)| yv * (gv - dot)).collect();
            vec![Some(Tensor::vector(da))]
        }
        Op::LogClamped => {
            let da = g
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(&gv, &x)| if x > LOG_CLAMP { gv / x } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), da))]
        }
        Op::SumAll => {
            let gv = g.item();
            vec![Some(Tensor::filled(inputs[0].shape().to_vec(), gv))]
        }
        Op::MeanAll => {
            let gv = g.item() / inputs[0].len() as f64;
            vec![Some(Tensor::filled(inputs[0].shape().to_vec(), gv))]
        }
        Op::MeanRows => {
            let m = inputs[0];
            let (k, d) = (m.shape()[0], m.shape()[1]);
            let mut dm = vec![0.0; k * d];
            for r in 0..k {
                for (dst, &gv) in dm[r * d..(r + 1) * d].iter_mut().zip(g.data()) {
                    *dst = gv / k as f64;
                }
            }
            vec![Some(Tensor::matrix(k, d, dm))]
        }
        Op::WeightedSumRows => {
            let (m, w) = (inputs[0], inputs[1]);
            let (k, d) = (m.shape()[0], m.shape()[1]);
            let mut dm = vec![0.0; k * d];
            let mut dw = vec![0.0; k];
            for r in 0..k {
                let wr = w.data()[r];
                let mrow = m.row(r);
                let drow = &mut dm[r * d..(r + 1) * d];
                for ((dst, &gv), &mv) in drow.iter_mut().zip(g.data()).zip(mrow) {
                    *dst = wr * gv;
                    dw[r] += gv * mv;
                }
            }
            vec![Some(Tensor::matrix(k, d, dm)), Some(Tensor::vector(dw))]
        }
        Op::MinElem => {
            let (a, b) = (inputs[0], inputs[1]);
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            for i in 0..a.len() {
                if a.data()[i] <= b.data()[i] {
                    da[i] = g.data()[i];
                } else {
                    db[i] = g.data()[i];
                }
            }
            vec![
                Some(Tensor::new(a.shape().to_vec(), da)),
                Some(Tensor::new(b.shape().to_vec(), db)),
            ]
        }
        Op::IndexScalar(i) => {
            let mut dv = Tensor::zeros(inputs[0].shape().to_vec());
            dv.data_mut()[*i] = g.item();
            vec![Some(dv)]
        }
        Op::SelectSum(indices) => {
            let mut dv = Tensor::zeros(inputs[0].shape().to_vec());
            let gv = g.item();
            for &i in indices {
                dv.data_mut()[i] += gv;
            }
            vec![Some(dv)]
        }
        Op::Dropout { mask } => {
            let da = g.data().iter().zip(mask.data()).map(|(&gv, &m)| gv * m).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), da))]
        }
    }
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

/// One step of a standard 4-gate LSTM cell.
///
/// `w_ih` is `[4h, d_in]`, `w_hh` is `[4h, h]`, `b` is `[4h]`; the gate
/// order is input, forget, cell, output. Returns `(h', c')`.
pub fn lstm_cell(
    g: &mut ExprGraph,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    w_ih: NodeId,
    w_hh: NodeId,
    b: NodeId,
) -> Result<(NodeId, NodeId), NumError> {
    let hidden = g.shape(h_prev)[0];
    let xi = g.matvec(w_ih, x)?;
    let hh = g.matvec(w_hh, h_prev)?;
    let pre0 = g.add(xi, hh)?;
    let pre = g.add(pre0, b)?;
    let i_gate = {
        let s = g.slice(pre, 0, hidden)?;
        g.sigmoid(s)?
    };
    let f_gate = {
        let s = g.slice(pre, hidden, hidden)?;
        g.sigmoid(s)?
    };
    let g_gate = {
        let s = g.slice(pre, 2 * hidden, hidden)?;
        g.tanh(s)?
    };
    let o_gate = {
        let s = g.slice(pre, 3 * hidden, hidden)?;
        g.sigmoid(s)?
    };
    let fc = g.mul(f_gate, c_prev)?;
    let ig = g.mul(i_gate, g_gate)?;
    let c_new = g.add(fc, ig)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(o_gate, tc)?;
    Ok((h_new, c_new))
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference check of `d output / d leaf` against the analytic
/// gradient, on at most `max_coords` sampled coordinates. Returns the max
/// relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check(
    graph: &mut ExprGraph,
    output: NodeId,
    leaf: NodeId,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64, NumError> {
    assert!(graph.is_leaf(leaf), "finite differences need a leaf node");
    let analytic = {
        let grads = graph.backward(output)?;
        grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(leaf).to_vec()))
    };

    let original = graph.value(leaf).clone();
    let n = original.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all.truncate(max_coords);
        all
    };

    let mut max_rel = 0.0f64;
    for &c in &coords {
        let base = original.data()[c];
        let probe = |v: f64, graph: &mut ExprGraph| -> Result<f64, NumError> {
            let mut t = original.clone();
            t.data_mut()[c] = v;
            graph.set_leaf_value(leaf, t);
            graph.reforward()?;
            Ok(graph.value(output).item())
        };
        let fp = probe(base + eps, graph)?;
        let fm = probe(base - eps, graph)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[c];
        let rel = (numeric - a).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }

    graph.set_leaf_value(leaf, original);
    graph.reforward()?;
    Ok(max_rel)
}

use rand::seq::SliceRandom;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = ExprGraph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // Large logits do not overflow.
        let x2 = g.leaf(Tensor::vector(vec![1000.0, 999.0]));
        let y2 = g.softmax(x2).unwrap();
        assert!(g.value(y2).all_finite());
        let s: f64 = g.value(y2).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity() {
        let mut g = ExprGraph::new();
        let eye = g.leaf(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = g.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = ExprGraph::new();
        let x = g.leaf(Tensor::vector(vec![0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn shape_mismatch_reports_op_and_node() {
        let mut g = ExprGraph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match g.add(a, b) {
            Err(NumError::Shape { op, .. }) => assert_eq!(op, "elementwise"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn backward_square() {
        // d/dx (x*x) at 3 = 6
        let mut g = ExprGraph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_sum_of_softmax_is_zero() {
        let mut g = ExprGraph::new();
        let x = g.param(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let s = g.softmax(x).unwrap();
        let y = g.sum_all(s).unwrap();
        let grads = g.backward(y).unwrap();
        for v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = ExprGraph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumError::NonScalarOutput(_))));
    }

    #[test]
    fn fd_exact_for_linear_and_constant() {
        let mut g = ExprGraph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let w = g.leaf(Tensor::matrix(1, 3, vec![2.0, -1.0, 3.0]));
        let y = g.matvec(w, x).unwrap();
        let out = g.sum_all(y).unwrap();
        let err = finite_difference_check(&mut g, out, x, 1e-5, 64, 0).unwrap();
        assert!(err < 1e-9, "linear fd error {err}");

        // Constant function: output does not depend on the leaf.
        let mut g2 = ExprGraph::new();
        let x2 = g2.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g2.leaf(Tensor::scalar(5.0));
        let out2 = g2.sum_all(c).unwrap();
        let err2 = finite_difference_check(&mut g2, out2, x2, 1e-5, 64, 0).unwrap();
        assert_eq!(err2, 0.0);
    }

    #[test]
    fn fd_tanh_chain_depth_five() {
        let mut g = ExprGraph::new();
        let x = g.param(Tensor::vector(vec![0.3, -0.7, 1.1]));
        let mut h = x;
        for _ in 0..5 {
            h = g.tanh(h).unwrap();
        }
        let out = g.sum_all(h).unwrap();
        let err = finite_difference_check(&mut g, out, x, 1e-5, 64, 0).unwrap();
        assert!(err < 1e-4, "tanh chain fd error {err}");
    }

    #[test]
    fn fd_three_layer_mlp_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = ExprGraph::new();
        let dims = [4usize, 5, 3, 1];
        let x = g.leaf(Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let mut params = Vec::new();
        let mut h = x;
        for l in 0..3 {
            let (din, dout) = (dims[l], dims[l + 1]);
            let w = g.param(Tensor::matrix(
                dout,
                din,
                (0..din * dout).map(|_| rng.random_range(-0.8..0.8)).collect(),
            ));
            let b = g.param(Tensor::vector(
                (0..dout).map(|_| rng.random_range(-0.3..0.3)).collect(),
            ));
            params.push(w);
            params.push(b);
            let wx = g.matvec(w, h).unwrap();
            let pre = g.add(wx, b).unwrap();
            h = if l < 2 { g.tanh(pre).unwrap() } else { pre };
        }
        let out = g.sum_all(h).unwrap();
        for p in params {
            let err = finite_difference_check(&mut g, out, p, 1e-5, 64, 1).unwrap();
            assert!(err < 1e-4, "mlp fd error {err} for param {p}");
        }
    }

    #[test]
    fn fd_lstm_cell_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (din, h) = (3usize, 4usize);
        let mut g = ExprGraph::new();
        let x = g.leaf(Tensor::vector((0..din).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let h0 = g.leaf(Tensor::vector((0..h).map(|_| rng.random_range(-0.5..0.5)).collect()));
        let c0 = g.leaf(Tensor::vector((0..h).map(|_| rng.random_range(-0.5..0.5)).collect()));
        let w_ih = g.param(Tensor::matrix(
            4 * h,
            din,
            (0..4 * h * din).map(|_| rng.random_range(-0.5..0.5)).collect(),
        ));
        let w_hh = g.param(Tensor::matrix(
            4 * h,
            h,
            (0..4 * h * h).map(|_| rng.random_range(-0.5..0.5)).collect(),
        ));
        let b = g.param(Tensor::vector((0..4 * h).map(|_| rng.random_range(-0.2..0.2)).collect()));
        let (h1, c1) = lstm_cell(&mut g, x, h0, c0, w_ih, w_hh, b).unwrap();
        let (h2, _c2) = lstm_cell(&mut g, x, h1, c1, w_ih, w_hh, b).unwrap();
        let out = g.sum_all(h2).unwrap();
        for p in [w_ih, w_hh, b] {
            let err = finite_difference_check(&mut g, out, p, 1e-5, 64, 2).unwrap();
            assert!(err < 1e-4, "lstm fd error {err}");
        }
    }

    /// Random op compositions: every composition's backward must match
    /// finite differences.
    #[test]
    fn fd_random_graph_compositions() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut g = ExprGraph::new();
            let d = rng.random_range(2..6);
            let x = g.param(Tensor::vector(
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ));
            let w = g.param(Tensor::matrix(
                d,
                d,
                (0..d * d).map(|_| rng.random_range(-0.7..0.7)).collect(),
            ));
            let mut cur = g.matvec(w, x).unwrap();
            for _ in 0..rng.random_range(1..6) {
                cur = match rng.random_range(0..7) {
                    0 => g.tanh(cur).unwrap(),
                    1 => g.sigmoid(cur).unwrap(),
                    2 => g.softmax(cur).unwrap(),
                    3 => {
                        // Product keeps both factor paths alive without
                        // collapsing magnitudes toward the noise floor.
                        let t = g.tanh(cur).unwrap();
                        let s = g.sigmoid(cur).unwrap();
                        let p = g.mul(t, s).unwrap();
                        g.add(p, cur).unwrap()
                    }
                    4 => {
                        let y = g.matvec(w, cur).unwrap();
                        let t = g.tanh(y).unwrap();
                        g.add(cur, t).unwrap()
                    }
                    5 => {
                        let s = g.softmax(cur).unwrap();
                        let m = g.stack_rows(&[cur, s]).unwrap();
                        g.mean_rows(m).unwrap()
                    }
                    _ => {
                        let c = g.concat(&[cur, x]).unwrap();
                        g.slice(c, 0, d).unwrap()
                    }
                };
            }
            let bounded = g.tanh(cur).unwrap();
            let sm = g.softmax(bounded).unwrap();
            let lg = g.log_clamped(sm).unwrap();
            let out = g.mean_all(lg).unwrap();
            for (i, p) in [x, w].into_iter().enumerate() {
                let err =
                    finite_difference_check(&mut g, out, p, 1e-5, 64, seed * 2 + i as u64)
                        .unwrap();
                assert!(err < 1e-4, "seed {seed} param {i}: fd error {err}");
            }
        }
    }

    #[test]
    fn dropout_identity_in_eval_and_masked_in_training() {
        let mut g = ExprGraph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y, "eval-mode dropout is the identity");

        let mut gt = ExprGraph::new_training(123);
        let xt = gt.leaf(Tensor::vector(vec![1.0; 1000]));
        let yt = gt.dropout(xt, 0.1).unwrap();
        let kept = gt.value(yt).data().iter().filter(|v| **v > 0.0).count();
        assert!((800..1000).contains(&kept));
        for v in gt.value(yt).data() {
            assert!(*v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_forward_backward_under_seed() {
        let build = || {
            let mut g = ExprGraph::new_training(42);
            let x = g.param(Tensor::vector(vec![0.5, -0.25, 0.75, 1.5]));
            let d = g.dropout(x, 0.2).unwrap();
            let t = g.tanh(d).unwrap();
            let out = g.sum_all(t).unwrap();
            let grads = g.backward(out).unwrap();
            (g.value(out).item(), grads.get(x).unwrap().clone())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn min_elem_gradient_routing() {
        let mut g = ExprGraph::new();
        let a = g.param(Tensor::vector(vec![1.0, 5.0]));
        let b = g.param(Tensor::vector(vec![2.0, 3.0]));
        let m = g.min_elem(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 3.0]);
        let out = g.sum_all(m).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
    }
}
