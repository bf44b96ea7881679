//! Reverse-mode automatic differentiation over a dynamically built graph.
//!
//! [`Value`] wraps a [`Tensor`] together with the operation that produced it.
//! [`grad`] runs a reverse sweep in which every adjoint is itself assembled
//! from library operations, so with `create_graph` the returned gradients
//! carry provenance and can be differentiated again. Backpropagating through
//! an unrolled inner loop — and through the gradients it consumed — is just a
//! second call to [`grad`].
//!
//! Values are deliberately `!Send`: a graph is confined to the thread that
//! built it. To move results across threads, extract the tensors.

mod ops;

pub mod check;

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use ops::{eval_op, input_grads, OpKind};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

enum Provenance {
    Leaf,
    Op { kind: OpKind, inputs: Vec<Value> },
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    provenance: Provenance,
}

impl Drop for Node {
    // Unwind input chains iteratively; deep unrolled graphs would otherwise
    // recurse once per node when the last reference goes away.
    fn drop(&mut self) {
        let mut pending = match &mut self.provenance {
            Provenance::Leaf => return,
            Provenance::Op { inputs, .. } => std::mem::take(inputs),
        };
        while let Some(value) = pending.pop() {
            if let Ok(mut node) = Rc::try_unwrap(value.node) {
                if let Provenance::Op { inputs, .. } = &mut node.provenance {
                    pending.append(inputs);
                }
            }
        }
    }
}

/// A tensor bound into the differentiation graph.
#[derive(Clone)]
pub struct Value {
    node: Rc<Node>,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

impl Value {
    /// A differentiable leaf (a parameter).
    pub fn leaf(value: Tensor) -> Self {
        Self::with(value, true, Provenance::Leaf)
    }

    /// A non-differentiable leaf (data, targets, fixed features).
    pub fn constant(value: Tensor) -> Self {
        Self::with(value, false, Provenance::Leaf)
    }

    pub fn scalar(x: f64) -> Self {
        Self::constant(Tensor::scalar(x))
    }

    fn with(value: Tensor, requires_grad: bool, provenance: Provenance) -> Self {
        Self {
            node: Rc::new(Node {
                id: next_id(),
                value,
                requires_grad,
                provenance,
            }),
        }
    }

    fn apply(kind: OpKind, inputs: &[&Value]) -> Result<Value> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| v.tensor()).collect();
        let out = eval_op(&kind, &tensors)?;
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        Ok(Self::with(
            out,
            requires_grad,
            Provenance::Op {
                kind,
                inputs: inputs.iter().map(|&v| v.clone()).collect(),
            },
        ))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.node.value.numel()
    }

    /// The single element of a scalar value.
    pub fn item(&self) -> Result<f64> {
        self.node.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node.provenance, Provenance::Leaf)
    }

    fn id(&self) -> u64 {
        self.node.id
    }

    /// Same value, no provenance, no gradient: paths through the result
    /// contribute nothing to any derivative.
    pub fn detach(&self) -> Value {
        Self::with(self.node.value.clone(), false, Provenance::Leaf)
    }

    pub fn add(&self, rhs: &Value) -> Result<Value> {
        Self::apply(OpKind::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Value) -> Result<Value> {
        Self::apply(OpKind::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Value) -> Result<Value> {
        Self::apply(OpKind::Mul, &[self, rhs])
    }

    pub fn neg(&self) -> Result<Value> {
        Self::apply(OpKind::Neg, &[self])
    }

    pub fn scale(&self, c: f64) -> Result<Value> {
        Self::apply(OpKind::Scale(c), &[self])
    }

    pub fn matmul(&self, rhs: &Value) -> Result<Value> {
        Self::apply(OpKind::MatMul, &[self, rhs])
    }

    pub fn transpose(&self) -> Result<Value> {
        Self::apply(OpKind::Transpose, &[self])
    }

    pub fn concat_cols(parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        let refs: Vec<&Value> = parts.iter().collect();
        Self::apply(OpKind::ConcatCols, &refs)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Value> {
        Self::apply(OpKind::SliceCols { start, len }, &[self])
    }

    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Value> {
        Self::apply(OpKind::PadCols { start, total }, &[self])
    }

    pub fn broadcast(&self, shape: &[usize]) -> Result<Value> {
        Self::apply(
            OpKind::Broadcast {
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    pub fn repeat_rows(&self, rows: usize) -> Result<Value> {
        Self::apply(OpKind::RepeatRows { rows }, &[self])
    }

    pub fn sum_rows(&self) -> Result<Value> {
        Self::apply(OpKind::SumRows, &[self])
    }

    pub fn sum(&self) -> Result<Value> {
        Self::apply(OpKind::Sum, &[self])
    }

    pub fn mean(&self) -> Result<Value> {
        Self::apply(OpKind::Mean, &[self])
    }

    pub fn relu(&self) -> Result<Value> {
        Self::apply(OpKind::Relu, &[self])
    }

    fn relu_mask(&self) -> Result<Value> {
        Self::apply(OpKind::ReluMask, &[self])
    }

    pub fn sigmoid(&self) -> Result<Value> {
        Self::apply(OpKind::Sigmoid, &[self])
    }

    pub fn square(&self) -> Result<Value> {
        Self::apply(OpKind::Square, &[self])
    }

    /// Elementwise sine. Not differentiable; for generating regression
    /// targets, not for use on parameter paths.
    pub fn sin(&self) -> Result<Value> {
        Self::apply(OpKind::Sin, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Value> {
        Self::apply(
            OpKind::Reshape {
                shape: shape.to_vec(),
            },
            &[self],
        )
    }
}

/// Mean squared error between a prediction and a fixed target of the same
/// shape: `(1/m) * sum((pred_i - target_i)^2)`.
pub fn mse_loss(pred: &Value, target: &Tensor) -> Result<Value> {
    if pred.shape() != target.shape() {
        return Err(Error::LengthMismatch {
            expected: target.numel(),
            got: pred.numel(),
        });
    }
    if target.numel() == 0 {
        return Err(Error::InvalidShape {
            op: "mse_loss",
            msg: "empty prediction".into(),
        });
    }
    pred.sub(&Value::constant(target.clone()))?.square()?.mean()
}

/// Nodes with `requires_grad`, reachable from `root`, in descending-id order.
/// Ids increase monotonically with creation and inputs precede outputs, so
/// this is a reverse topological order of the differentiable subgraph.
fn reverse_order(root: &Value) -> Vec<Value> {
    let mut seen: HashSet<u64> = HashSet::new();
    let mut order: Vec<Value> = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        if let Provenance::Op { inputs, .. } = &v.node.provenance {
            stack.extend(inputs.iter().cloned());
        }
        order.push(v);
    }
    order.sort_by(|a, b| b.id().cmp(&a.id()));
    order
}

/// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
///
/// With `create_graph` the results carry provenance and can be differentiated
/// again; without it they are detached leaves, which is exactly the
/// first-order treatment of inner-loop gradients. Entries of `wrt` that the
/// output does not depend on get a zero tensor of matching shape.
pub fn grad(output: &Value, wrt: &[Value], create_graph: bool) -> Result<Vec<Value>> {
    if !output.tensor().is_scalar() {
        return Err(Error::NonScalarOutput {
            shape: output.shape().to_vec(),
        });
    }
    for w in wrt {
        if !w.requires_grad() {
            return Err(Error::NoGrad);
        }
    }

    let mut adjoints: HashMap<u64, Value> = HashMap::new();
    adjoints.insert(output.id(), Value::constant(Tensor::scalar(1.0)));

    for v in reverse_order(output) {
        let Some(upstream) = adjoints.get(&v.id()).cloned() else {
            continue; // not on any path from a wrt-relevant node to the output
        };
        let Provenance::Op { kind, inputs } = &v.node.provenance else {
            continue;
        };
        let contributions = input_grads(kind, inputs, &v, &upstream)?;
        for (input, contribution) in inputs.iter().zip(contributions) {
            let Some(c) = contribution else { continue };
            if !input.requires_grad() {
                continue;
            }
            let accumulated = match adjoints.remove(&input.id()) {
                Some(existing) => existing.add(&c)?,
                None => c,
            };
            adjoints.insert(input.id(), accumulated);
        }
    }

    wrt.iter()
        .map(|w| {
            let g = match adjoints.get(&w.id()) {
                Some(g) => g.clone(),
                None => Value::constant(Tensor::zeros(w.shape())),
            };
            Ok(if create_graph { g } else { g.detach() })
        })
        .collect()
}

/// An append-only record of one computation in execution order.
///
/// Recording captures every node reachable from the given roots; replaying
/// recomputes each operation from its stored inputs and checks the results
/// bit-for-bit against the stored values.
pub struct Graph {
    nodes: Vec<Value>,
}

impl Graph {
    pub fn record(roots: &[Value]) -> Graph {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Value> = Vec::new();
        let mut stack: Vec<Value> = roots.to_vec();
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            if let Provenance::Op { inputs, .. } = &v.node.provenance {
                stack.extend(inputs.iter().cloned());
            }
            nodes.push(v);
        }
        nodes.sort_by_key(|v| v.id());
        Graph { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recompute every recorded operation and verify the stored values are
    /// reproduced exactly.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut recomputed: HashMap<u64, Tensor> = HashMap::new();
        for v in &self.nodes {
            let t = match &v.node.provenance {
                Provenance::Leaf => v.tensor().clone(),
                Provenance::Op { kind, inputs } => {
                    let ins: Vec<&Tensor> = inputs
                        .iter()
                        .map(|i| recomputed.get(&i.id()).expect("inputs precede outputs"))
                        .collect();
                    eval_op(kind, &ins)?
                }
            };
            if t != *v.tensor() {
                return Ok(false);
            }
            recomputed.insert(v.id(), t);
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn leaf(data: Vec<f64>) -> Value {
        Value::leaf(Tensor::vector(data))
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let v = Value::scalar(0.0).sigmoid().unwrap();
        assert_eq!(v.item().unwrap(), 0.5);
    }

    #[test]
    fn sigmoid_at_twenty() {
        // 1/(1+e^-20) evaluated in extended precision.
        let v = Value::scalar(20.0).sigmoid().unwrap();
        assert_relative_eq!(v.item().unwrap(), 0.9999999979388464, max_relative = 1e-15);
    }

    #[test]
    fn relu_definition() {
        let v = leaf(vec![-3.0, 3.0]).relu().unwrap();
        assert_eq!(v.tensor().data(), &[0.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let a = leaf(vec![1.0, 2.0]);
        let b = leaf(vec![1.0, 2.0, 3.0]);
        match a.add(&b).unwrap_err() {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let v = Value::scalar(1e300);
        assert!(matches!(
            v.square().unwrap_err(),
            Error::NonFinite { op: "square" }
        ));
    }

    #[test]
    fn mse_loss_examples() {
        // pred == target -> 0
        let p = leaf(vec![1.0, 3.0]);
        assert_eq!(
            mse_loss(&p, &Tensor::vector(vec![1.0, 3.0])).unwrap().item().unwrap(),
            0.0
        );
        // (1 + 9) / 2 by hand
        let p = leaf(vec![0.0, 0.0]);
        assert_eq!(
            mse_loss(&p, &Tensor::vector(vec![1.0, 3.0])).unwrap().item().unwrap(),
            5.0
        );
        // (2 - (-2))^2 by hand
        let p = leaf(vec![2.0]);
        assert_eq!(
            mse_loss(&p, &Tensor::vector(vec![-2.0])).unwrap().item().unwrap(),
            16.0
        );
        // length mismatch
        assert!(mse_loss(&p, &Tensor::vector(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn grad_of_square_is_two_theta() {
        let x = Value::leaf(Tensor::scalar(1.0));
        let y = x.square().unwrap();
        let g = grad(&y, &[x], false).unwrap();
        assert_eq!(g[0].item().unwrap(), 2.0);
        assert!(g[0].is_leaf() && !g[0].requires_grad());
    }

    #[test]
    fn second_derivative_of_cube() {
        // f = x^3 via square(x) * x; f'' at 2 is 6x = 12.
        let x = Value::leaf(Tensor::scalar(2.0));
        let y = x.square().unwrap().mul(&x).unwrap();
        let g = grad(&y, &[x.clone()], true).unwrap();
        assert_eq!(g[0].item().unwrap(), 12.0); // 3x^2
        let gg = grad(&g[0], &[x], false).unwrap();
        assert_eq!(gg[0].item().unwrap(), 12.0); // 6x
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let x = Value::leaf(Tensor::scalar(1.0));
        let unused = Value::leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = x.square().unwrap();
        let g = grad(&y, &[unused.clone()], false).unwrap();
        assert_eq!(g[0].shape(), unused.shape());
        assert!(g[0].tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_requires_scalar_output() {
        let x = leaf(vec![1.0, 2.0]);
        let y = x.square().unwrap();
        assert!(matches!(
            grad(&y, &[x], false).unwrap_err(),
            Error::NonScalarOutput { .. }
        ));
    }

    #[test]
    fn grad_rejects_wrt_without_grad() {
        let x = Value::scalar(1.0);
        let p = Value::leaf(Tensor::scalar(2.0));
        let y = p.square().unwrap();
        assert!(matches!(grad(&y, &[x], false).unwrap_err(), Error::NoGrad));
    }

    #[test]
    fn detach_preserves_value_and_kills_gradient() {
        let x = Value::leaf(Tensor::scalar(3.0));
        let d = x.square().unwrap().detach();
        assert_eq!(d.item().unwrap(), 9.0);
        assert!(d.is_leaf() && !d.requires_grad());
        // x reaches the output only through the detached node -> zero grad.
        let y = d.scale(5.0); // no grad path at all
        assert!(y.is_ok());
        let out = x.mul(&x.detach()).unwrap(); // one live path: d/dx = detach(x)
        let g = grad(&out, &[x], false).unwrap();
        assert_eq!(g[0].item().unwrap(), 3.0);
    }

    #[test]
    fn sine_is_not_differentiable() {
        let x = Value::leaf(Tensor::scalar(1.0));
        let y = x.sin().unwrap().sum().unwrap();
        assert!(matches!(
            grad(&y, &[x], false).unwrap_err(),
            Error::NonDifferentiable { op: "sin" }
        ));
    }

    #[test]
    fn sine_on_constants_is_fine() {
        let x = Value::constant(Tensor::vector(vec![std::f64::consts::FRAC_PI_2]));
        let y = x.sin().unwrap();
        assert_relative_eq!(y.tensor().data()[0], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn matmul_grads_match_hand_computation() {
        // f = sum(A @ B), dA = ones @ B^T, dB = A^T @ ones
        let a = Value::leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = Value::leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = a.matmul(&b).unwrap().sum().unwrap();
        let g = grad(&y, &[a, b], false).unwrap();
        assert_eq!(g[0].tensor().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g[1].tensor().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn concat_slice_pad_roundtrip_grads() {
        let a = leaf(vec![1.0, 2.0]);
        let b = leaf(vec![3.0, 4.0, 5.0]);
        let c = Value::concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.tensor().data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = c.slice_cols(1, 3).unwrap().sum().unwrap();
        let g = grad(&y, &[a, b], false).unwrap();
        assert_eq!(g[0].tensor().data(), &[0.0, 1.0]);
        assert_eq!(g[1].tensor().data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_only_accepts_scalars() {
        let v = leaf(vec![1.0, 2.0]);
        assert!(v.broadcast(&[4]).is_err());
        let s = Value::scalar(2.5);
        let b = s.broadcast(&[3]).unwrap();
        assert_eq!(b.tensor().data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn gradient_accumulates_over_shared_use() {
        // y = x*x + x => dy/dx = 2x + 1
        let x = Value::leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = grad(&y, &[x], false).unwrap();
        assert_eq!(g[0].item().unwrap(), 7.0);
    }

    #[test]
    fn replay_reproduces_values_bit_identically() {
        let x = leaf(vec![0.3, -0.7, 1.9]);
        let w = Value::leaf(Tensor::matrix(3, 2, vec![0.1, -0.2, 0.5, 0.7, -1.1, 0.013]).unwrap());
        let y = x
            .reshape(&[1, 3])
            .unwrap()
            .matmul(&w)
            .unwrap()
            .sigmoid()
            .unwrap()
            .mean()
            .unwrap();
        let g = grad(&y, &[x, w], true).unwrap();
        let graph = Graph::record(&[y, g[0].clone(), g[1].clone()]);
        assert!(graph.len() > 10);
        assert!(graph.replay_matches().unwrap());
    }
}
