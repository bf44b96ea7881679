//! The differentiable operation library.
//!
//! Every operation evaluates eagerly on [`Tensor`]s and, for the backward
//! pass, expresses its vector-Jacobian product as a composition of operations
//! from this same library (see [`input_grads`]). That closure property is what
//! makes gradients themselves differentiable graph values, which in turn is
//! what the second-order learners rely on.
//!
//! Shape policy: elementwise operations require identical shapes, and the only
//! implicit-looking coercion offered is the explicit `Broadcast` of a scalar.
//! Coordinate-wise optimizers are exactly the kind of code where silent
//! broadcasting hides bugs, so everything else is an error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Value;

#[derive(Clone, Debug)]
pub(crate) enum OpKind {
    Add,
    Sub,
    Mul,
    Neg,
    /// Multiply by a compile-time constant scalar.
    Scale(f64),
    MatMul,
    Transpose,
    /// Concatenate along the last axis (vectors end to end, matrices by columns).
    ConcatCols,
    /// Take `len` entries along the last axis starting at `start`.
    SliceCols { start: usize, len: usize },
    /// Embed into a zero tensor of `total` columns starting at `start`.
    PadCols { start: usize, total: usize },
    /// Scalar to arbitrary shape.
    Broadcast { shape: Vec<usize> },
    /// Vector `[n]` to matrix `rows x n`.
    RepeatRows { rows: usize },
    /// Matrix `m x n` to vector `[n]` by summing over rows.
    SumRows,
    Sum,
    Mean,
    Relu,
    /// 1 where the input is strictly positive, 0 elsewhere. Derivative of
    /// relu with the value-0 convention at the kink; its own derivative is
    /// zero everywhere.
    ReluMask,
    Sigmoid,
    Square,
    /// Elementwise sine, provided for target generation only: it has no
    /// registered derivative and differentiating through it is an error.
    Sin,
    Reshape { shape: Vec<usize> },
}

impl OpKind {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::PadCols { .. } => "pad_cols",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::RepeatRows { .. } => "repeat_rows",
            OpKind::SumRows => "sum_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Relu => "relu",
            OpKind::ReluMask => "relu_mask",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Square => "square",
            OpKind::Sin => "sin",
            OpKind::Reshape { .. } => "reshape",
        }
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        msg: msg.into(),
    }
}

/// Split a shape into (rows, last-axis extent) for the last-axis ops.
/// Vectors count as a single row.
fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        other => Err(invalid(op, format!("expected rank 1 or 2, got {other:?}"))),
    }
}

fn elementwise2(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(invalid(
            "matmul",
            format!("expected two matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    if a.cols() != b.rows() {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for (i, orow) in out.chunks_exact_mut(n).enumerate() {
        let arow = &ad[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Evaluate one operation forward. Pure: used both when building the graph
/// and when replaying a recorded one.
pub(crate) fn eval_op(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let out = match kind {
        OpKind::Add => elementwise2("add", inputs[0], inputs[1], |x, y| x + y)?,
        OpKind::Sub => elementwise2("sub", inputs[0], inputs[1], |x, y| x - y)?,
        OpKind::Mul => elementwise2("mul", inputs[0], inputs[1], |x, y| x * y)?,
        OpKind::Neg => map(inputs[0], |x| -x),
        OpKind::Scale(c) => map(inputs[0], |x| c * x),
        OpKind::MatMul => matmul(inputs[0], inputs[1])?,
        OpKind::Transpose => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(invalid(
                    "transpose",
                    format!("expected a matrix, got {:?}", a.shape()),
                ));
            }
            let (m, n) = (a.rows(), a.cols());
            let ad = a.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = ad[i * n + j];
                }
            }
            Tensor::matrix(n, m, out)?
        }
        OpKind::ConcatCols => {
            let (rows, _) = last_axis("concat_cols", inputs[0])?;
            let rank = inputs[0].rank();
            let mut widths = Vec::with_capacity(inputs.len());
            for t in inputs {
                let (r, c) = last_axis("concat_cols", t)?;
                if r != rows || t.rank() != rank {
                    return Err(shape_err("concat_cols", inputs[0], t));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; rows * total];
            let mut offset = 0;
            for (t, &w) in inputs.iter().zip(&widths) {
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            if rank == 1 {
                Tensor::vector(out)
            } else {
                Tensor::matrix(rows, total, out)?
            }
        }
        OpKind::SliceCols { start, len } => {
            let a = inputs[0];
            let (rows, cols) = last_axis("slice_cols", a)?;
            if start + len > cols {
                return Err(invalid(
                    "slice_cols",
                    format!("range {start}..{} out of {cols} columns", start + len),
                ));
            }
            let mut out = vec![0.0; rows * len];
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
            }
            if a.rank() == 1 {
                Tensor::vector(out)
            } else {
                Tensor::matrix(rows, *len, out)?
            }
        }
        OpKind::PadCols { start, total } => {
            let a = inputs[0];
            let (rows, cols) = last_axis("pad_cols", a)?;
            if start + cols > *total {
                return Err(invalid(
                    "pad_cols",
                    format!("{cols} columns at offset {start} exceed {total}"),
                ));
            }
            let mut out = vec![0.0; rows * total];
            for r in 0..rows {
                out[r * total + start..r * total + start + cols]
                    .copy_from_slice(&a.data()[r * cols..(r + 1) * cols]);
            }
            if a.rank() == 1 {
                Tensor::vector(out)
            } else {
                Tensor::matrix(rows, *total, out)?
            }
        }
        OpKind::Broadcast { shape } => {
            let a = inputs[0];
            if !a.is_scalar() {
                return Err(invalid(
                    "broadcast",
                    format!("only scalars broadcast, got shape {:?}", a.shape()),
                ));
            }
            Tensor::filled(shape, a.data()[0])
        }
        OpKind::RepeatRows { rows } => {
            let a = inputs[0];
            if a.rank() != 1 {
                return Err(invalid(
                    "repeat_rows",
                    format!("expected a vector, got {:?}", a.shape()),
                ));
            }
            let n = a.numel();
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..*rows {
                out.extend_from_slice(a.data());
            }
            Tensor::matrix(*rows, n, out)?
        }
        OpKind::SumRows => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(invalid(
                    "sum_rows",
                    format!("expected a matrix, got {:?}", a.shape()),
                ));
            }
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, &x) in out.iter_mut().zip(&a.data()[r * n..(r + 1) * n]) {
                    *o += x;
                }
            }
            Tensor::vector(out)
        }
        OpKind::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        OpKind::Mean => {
            let a = inputs[0];
            if a.numel() == 0 {
                return Err(invalid("mean", "empty tensor"));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
        }
        OpKind::Relu => map(inputs[0], |x| if x > 0.0 { x } else { 0.0 }),
        OpKind::ReluMask => map(inputs[0], |x| if x > 0.0 { 1.0 } else { 0.0 }),
        OpKind::Sigmoid => map(inputs[0], |x| 1.0 / (1.0 + (-x).exp())),
        OpKind::Square => map(inputs[0], |x| x * x),
        OpKind::Sin => map(inputs[0], f64::sin),
        OpKind::Reshape { shape } => {
            let a = inputs[0];
            let numel: usize = shape.iter().product();
            if numel != a.numel() {
                return Err(invalid(
                    "reshape",
                    format!("cannot view {:?} as {:?}", a.shape(), shape),
                ));
            }
            Tensor::new(shape.clone(), a.data().to_vec())?
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { op: kind.name() });
    }
    Ok(out)
}

/// Vector-Jacobian products, one entry per input (None means an identically
/// zero contribution). `out` is the node being differentiated, `upstream` the
/// adjoint flowing into it. Every rule is a composition of library ops, so
/// the returned values can be differentiated again.
pub(crate) fn input_grads(
    kind: &OpKind,
    inputs: &[Value],
    out: &Value,
    upstream: &Value,
) -> Result<Vec<Option<Value>>> {
    let grads = match kind {
        OpKind::Add => vec![Some(upstream.clone()), Some(upstream.clone())],
        OpKind::Sub => vec![Some(upstream.clone()), Some(upstream.neg()?)],
        OpKind::Mul => vec![
            Some(upstream.mul(&inputs[1])?),
            Some(upstream.mul(&inputs[0])?),
        ],
        OpKind::Neg => vec![Some(upstream.neg()?)],
        OpKind::Scale(c) => vec![Some(upstream.scale(*c)?)],
        OpKind::MatMul => vec![
            Some(upstream.matmul(&inputs[1].transpose()?)?),
            Some(inputs[0].transpose()?.matmul(upstream)?),
        ],
        OpKind::Transpose => vec![Some(upstream.transpose()?)],
        OpKind::ConcatCols => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for t in inputs {
                let w = *t.shape().last().expect("concat inputs have rank >= 1");
                grads.push(Some(upstream.slice_cols(offset, w)?));
                offset += w;
            }
            grads
        }
        OpKind::SliceCols { start, .. } => {
            let total = *inputs[0].shape().last().expect("rank checked at eval");
            vec![Some(upstream.pad_cols(*start, total)?)]
        }
        OpKind::PadCols { start, .. } => {
            let len = *inputs[0].shape().last().expect("rank checked at eval");
            vec![Some(upstream.slice_cols(*start, len)?)]
        }
        OpKind::Broadcast { .. } => vec![Some(upstream.sum()?)],
        OpKind::RepeatRows { .. } => vec![Some(upstream.sum_rows()?)],
        OpKind::SumRows => {
            let rows = inputs[0].shape()[0];
            vec![Some(upstream.repeat_rows(rows)?)]
        }
        OpKind::Sum => vec![Some(upstream.broadcast(inputs[0].shape())?)],
        OpKind::Mean => {
            let n = inputs[0].numel() as f64;
            vec![Some(upstream.broadcast(inputs[0].shape())?.scale(1.0 / n)?)]
        }
        OpKind::Relu => vec![Some(upstream.mul(&inputs[0].relu_mask()?)?)],
        // Piecewise constant: zero derivative everywhere it is defined.
        OpKind::ReluMask => vec![None],
        OpKind::Sigmoid => {
            // d/dx sigmoid = s * (1 - s), reusing the forward output node.
            let ones = Value::constant(Tensor::ones(out.shape()));
            let ds = out.mul(&ones.sub(out)?)?;
            vec![Some(upstream.mul(&ds)?)]
        }
        OpKind::Square => vec![Some(upstream.mul(&inputs[0])?.scale(2.0)?)],
        OpKind::Sin => return Err(Error::NonDifferentiable { op: "sin" }),
        OpKind::Reshape { .. } => vec![Some(upstream.reshape(inputs[0].shape())?)],
    };
    Ok(grads)
}
