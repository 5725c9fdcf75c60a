//! The closed catalog of differentiable primitives.
//!
//! Every kind has a forward rule ([`evaluate`]) and a vector-Jacobian rule
//! ([`vjp`]). Matrix-shaped kinds operate on rank-2 tensors; elementwise kinds
//! accept any shape as long as operands agree.

use std::fmt;

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{DiffError, Tensor};

/// Added to masked attention logits. Finite, but `exp` of it underflows to 0.
pub const MASK_VALUE: f64 = -1.0e30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    /// Multiply by a fixed constant.
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    /// Softmax along the last axis, computed with per-row max subtraction.
    SoftmaxRows,
    /// Concatenate rank-2 tensors along `axis` (1 = last axis).
    Concat { axis: usize },
    /// `len` entries starting at `start` along `axis` of a rank-2 tensor.
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    Sum,
    Mean,
    /// Repeat a `1 x n` row `rows` times.
    BroadcastRows { rows: usize },
    /// Zero-mean unit-variance normalization of each row (no affine part).
    LayerNormRows { eps: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "elementwise-multiply",
            Primitive::Scale(_) => "scalar-multiply",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::SoftmaxRows => "softmax-per-row",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Transpose => "transpose-last-two",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::BroadcastRows { .. } => "broadcast-row",
            Primitive::LayerNormRows { .. } => "layer-normalize-per-row",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
            Primitive::Concat { .. } => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn mismatch(kind: Primitive, inputs: &[&Tensor]) -> DiffError {
    DiffError::ShapeMismatch {
        kind: kind.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn matrix(kind: Primitive, t: &Tensor, all: &[&Tensor]) -> Result<(usize, usize), DiffError> {
    t.dims2().ok_or_else(|| mismatch(kind, all))
}

/// Forward rule.
pub fn evaluate(kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
    if inputs.len() != kind.arity() {
        return Err(mismatch(kind, inputs));
    }
    let x = inputs[0];
    match kind {
        Primitive::MatMul => {
            let (m, k) = matrix(kind, x, inputs)?;
            let (k2, n) = matrix(kind, inputs[1], inputs)?;
            if k != k2 {
                return Err(mismatch(kind, inputs));
            }
            Tensor::new(vec![m, n], matmul(x.data(), inputs[1].data(), m, k, n))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let y = inputs[1];
            if x.shape() != y.shape() {
                return Err(mismatch(kind, inputs));
            }
            Ok(match kind {
                Primitive::Add => x.zip_map(y, |a, b| a + b),
                Primitive::Sub => x.zip_map(y, |a, b| a - b),
                _ => x.zip_map(y, |a, b| a * b),
            })
        }
        Primitive::Scale(c) => Ok(x.map(|v| c * v)),
        Primitive::Relu => Ok(x.map(|v| if v > 0.0 { v } else { 0.0 })),
        Primitive::Sigmoid => Ok(x.map(sigmoid)),
        Primitive::Tanh => Ok(x.map(f64::tanh)),
        Primitive::Exp => Ok(x.map(f64::exp)),
        Primitive::Log => Ok(x.map(f64::ln)),
        Primitive::SoftmaxRows => Ok(softmax_rows(x)),
        Primitive::Concat { axis } => {
            let y = inputs[1];
            let (r1, c1) = matrix(kind, x, inputs)?;
            let (r2, c2) = matrix(kind, y, inputs)?;
            match axis {
                0 if c1 == c2 => {
                    let mut data = x.data().to_vec();
                    data.extend_from_slice(y.data());
                    Tensor::new(vec![r1 + r2, c1], data)
                }
                1 if r1 == r2 => {
                    let mut data = Vec::with_capacity(r1 * (c1 + c2));
                    for i in 0..r1 {
                        data.extend_from_slice(x.row(i));
                        data.extend_from_slice(y.row(i));
                    }
                    Tensor::new(vec![r1, c1 + c2], data)
                }
                _ => Err(mismatch(kind, inputs)),
            }
        }
        Primitive::Slice { axis, start, len } => {
            let (r, c) = matrix(kind, x, inputs)?;
            let extent = if axis == 0 { r } else { c };
            if axis > 1 || len == 0 || start + len > extent {
                return Err(mismatch(kind, inputs));
            }
            if axis == 0 {
                Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())
            } else {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&x.row(i)[start..start + len]);
                }
                Tensor::new(vec![r, len], data)
            }
        }
        Primitive::Transpose => {
            matrix(kind, x, inputs)?;
            Ok(x.transpose())
        }
        Primitive::Sum => Ok(Tensor::scalar(x.sum())),
        Primitive::Mean => Ok(Tensor::scalar(x.sum() / x.len() as f64)),
        Primitive::BroadcastRows { rows } => {
            let (r, c) = matrix(kind, x, inputs)?;
            if r != 1 || rows == 0 {
                return Err(mismatch(kind, inputs));
            }
            let mut data = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                data.extend_from_slice(x.data());
            }
            Tensor::new(vec![rows, c], data)
        }
        Primitive::LayerNormRows { eps } => {
            matrix(kind, x, inputs)?;
            Ok(layer_norm_rows(x, eps).0)
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Returns the normalized rows and each row's inverse standard deviation.
fn layer_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = x.data().to_vec();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (Tensor::new(x.shape().to_vec(), out).expect("same shape"), inv_std)
}

/// Vector-Jacobian rule: given the forward inputs, the forward output and the
/// upstream gradient, returns one gradient per input.
pub fn vjp(kind: Primitive, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
    let x = inputs[0];
    match kind {
        Primitive::MatMul => {
            let y = inputs[1];
            let (m, k) = x.dims2().expect("matrix");
            let n = y.cols();
            let dx = matmul_nt(grad.data(), y.data(), m, n, k);
            let dy = matmul_tn(x.data(), grad.data(), k, m, n);
            vec![
                Tensor::new(vec![m, k], dx).expect("shape"),
                Tensor::new(vec![k, n], dy).expect("shape"),
            ]
        }
        Primitive::Add => vec![grad.clone(), grad.clone()],
        Primitive::Sub => vec![grad.clone(), grad.map(|g| -g)],
        Primitive::Mul => vec![grad.zip_map(inputs[1], |g, b| g * b), grad.zip_map(x, |g, a| g * a)],
        Primitive::Scale(c) => vec![grad.map(|g| c * g)],
        Primitive::Relu => vec![grad.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 })],
        Primitive::Sigmoid => vec![grad.zip_map(output, |g, s| g * s * (1.0 - s))],
        Primitive::Tanh => vec![grad.zip_map(output, |g, t| g * (1.0 - t * t))],
        Primitive::Exp => vec![grad.zip_map(output, |g, e| g * e)],
        Primitive::Log => vec![grad.zip_map(x, |g, v| g / v)],
        Primitive::SoftmaxRows => {
            let c = output.cols();
            let mut dx = vec![0.0; output.len()];
            for ((d, y), g) in dx
                .chunks_mut(c)
                .zip(output.data().chunks(c))
                .zip(grad.data().chunks(c))
            {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[j] = y[j] * (g[j] - dot);
                }
            }
            vec![Tensor::new(output.shape().to_vec(), dx).expect("shape")]
        }
        Primitive::Concat { axis } => {
            let c1 = x.cols();
            let r1 = x.rows();
            let split_a = Primitive::Slice {
                axis,
                start: 0,
                len: if axis == 0 { r1 } else { c1 },
            };
            let split_b = Primitive::Slice {
                axis,
                start: if axis == 0 { r1 } else { c1 },
                len: if axis == 0 {
                    inputs[1].rows()
                } else {
                    inputs[1].cols()
                },
            };
            vec![
                evaluate(split_a, &[grad]).expect("slice of own output"),
                evaluate(split_b, &[grad]).expect("slice of own output"),
            ]
        }
        Primitive::Slice { axis, start, len } => {
            let (r, c) = x.dims2().expect("matrix");
            let mut dx = Tensor::zeros(&[r, c]);
            let d = dx.data_mut();
            if axis == 0 {
                d[start * c..(start + len) * c].copy_from_slice(grad.data());
            } else {
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(grad.row(i));
                }
            }
            vec![dx]
        }
        Primitive::Transpose => vec![grad.transpose()],
        Primitive::Sum => vec![Tensor::filled(x.shape(), grad.data()[0])],
        Primitive::Mean => vec![Tensor::filled(x.shape(), grad.data()[0] / x.len() as f64)],
        Primitive::BroadcastRows { .. } => {
            let c = x.cols();
            let mut dx = vec![0.0; c];
            for row in grad.data().chunks(c) {
                for (d, g) in dx.iter_mut().zip(row) {
                    *d += g;
                }
            }
            vec![Tensor::new(vec![1, c], dx).expect("shape")]
        }
        Primitive::LayerNormRows { eps } => {
            let (_, inv_std) = layer_norm_rows(x, eps);
            let c = x.cols();
            let n = c as f64;
            let mut dx = vec![0.0; x.len()];
            for (i, ((d, y), g)) in dx
                .chunks_mut(c)
                .zip(output.data().chunks(c))
                .zip(grad.data().chunks(c))
                .enumerate()
            {
                let mean_g = g.iter().sum::<f64>() / n;
                let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                for j in 0..c {
                    d[j] = inv_std[i] * (g[j] - mean_g - y[j] * mean_gy);
                }
            }
            vec![Tensor::new(x.shape().to_vec(), dx).expect("shape")]
        }
    }
}
