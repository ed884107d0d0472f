//! The computation tape: forward operations and reverse-mode backward.
//!
//! Every operation validates input shapes, computes its output eagerly,
//! checks the result for non-finite values, and records enough context to
//! reverse itself. Broadcasting is deliberately narrow: a per-channel vector
//! against the last axis (`add_bias`, `broadcast_channels`) and a per-row
//! scalar (`scale_rows`). Anything else is a shape error.
//!
//! Determinism contract: for a fixed sequence of operations on fixed inputs,
//! outputs and gradients are bit-identical across runs regardless of internal
//! parallelism. All reductions accumulate in ascending index order; rayon is
//! only used across disjoint output rows.

use rayon::prelude::*;

use super::{idx3, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Conv1D padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so output length equals input length (odd kernels only).
    Same,
    /// No padding; output length is `T - k + 1`.
    Valid,
}

enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddScalar(Value),
    AddBias(Value, Value),
    Matmul {
        a: Value,
        b: Value,
        trans_b: bool,
    },
    Relu(Value),
    Sigmoid(Value),
    Tanh(Value),
    Sqrt(Value),
    Recip(Value),
    LogClamped(Value, f64),
    Sum(Value),
    MeanChannels(Value),
    BroadcastChannels(Value),
    Softmax(Value),
    SelectTime(Value, usize),
    StackTime(Vec<Value>),
    ConcatLast(Value, Value),
    ScaleRows(Value, Value),
    Reshape(Value),
    Conv1d {
        x: Value,
        kernel: Value,
        bias: Value,
        pad: usize,
    },
    MaxPool1d {
        x: Value,
        argmax: Vec<usize>,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations supporting exact reverse-mode
/// differentiation. Single-threaded per instance.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Minimum scalar-multiply count before a matmul fans out across threads.
const PAR_THRESHOLD: usize = 32_768;

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `c[i, j] = sum_k a[i, k] * b[k, j]`, accumulated in ascending `k`.
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let body = |i: usize, row: &mut [f64]| {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Whether it participates in gradients follows the
    /// tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Value {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    /// Adds an input node that never receives gradients (data, masks, targets).
    pub fn constant(&mut self, tensor: Tensor) -> Value {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            requires_grad: false,
        });
        Value(self.nodes.len() - 1)
    }

    pub fn tensor(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    fn data(&self, v: Value) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    fn requires(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Value> {
        check_finite(op_name, &data)?;
        let tensor = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            tensor,
            op,
            requires_grad,
        });
        Ok(Value(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push("add", Op::Add(a, b), self.shape(a).to_vec(), data, req)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push("sub", Op::Sub(a, b), self.shape(a).to_vec(), data, req)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push("mul", Op::Mul(a, b), self.shape(a).to_vec(), data, req)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let req = self.requires(a);
        self.push("scale", Op::Scale(a, c), self.shape(a).to_vec(), data, req)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let req = self.requires(a);
        self.push(
            "add_scalar",
            Op::AddScalar(a),
            self.shape(a).to_vec(),
            data,
            req,
        )
    }

    /// `x + bias` where `bias` is a vector broadcast over the last axis of `x`.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bdata = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bdata[i % c])
            .collect();
        let req = self.requires(x) || self.requires(bias);
        self.push(
            "add_bias",
            Op::AddBias(x, bias),
            self.shape(x).to_vec(),
            data,
            req,
        )
    }

    /// 2-D matrix product `a (m×k) · b (k×n)`, or `a (m×k) · bᵀ` when
    /// `trans_b` and `b` is `(n×k)`.
    pub fn matmul(&mut self, a: Value, b: Value, trans_b: bool) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            let bt = transpose(self.data(b), n, k);
            gemm_nn(self.data(a), &bt, m, k, n, &mut out);
        } else {
            gemm_nn(self.data(a), self.data(b), m, k, n, &mut out);
        }
        let req = self.requires(a) || self.requires(b);
        self.push(
            "matmul",
            Op::Matmul { a, b, trans_b },
            vec![m, n],
            out,
            req,
        )
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let req = self.requires(a);
        self.push("relu", Op::Relu(a), self.shape(a).to_vec(), data, req)
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let req = self.requires(a);
        self.push("sigmoid", Op::Sigmoid(a), self.shape(a).to_vec(), data, req)
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let req = self.requires(a);
        self.push("tanh", Op::Tanh(a), self.shape(a).to_vec(), data, req)
    }

    pub fn sqrt(&mut self, a: Value) -> Result<Value> {
        let data = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let req = self.requires(a);
        self.push("sqrt", Op::Sqrt(a), self.shape(a).to_vec(), data, req)
    }

    pub fn recip(&mut self, a: Value) -> Result<Value> {
        let data = self.data(a).iter().map(|&x| 1.0 / x).collect();
        let req = self.requires(a);
        self.push("recip", Op::Recip(a), self.shape(a).to_vec(), data, req)
    }

    /// `ln(max(x, floor))`; the gradient is zero in the clamped region.
    pub fn log_clamped(&mut self, a: Value, floor: f64) -> Result<Value> {
        let data = self.data(a).iter().map(|&x| x.max(floor).ln()).collect();
        let req = self.requires(a);
        self.push(
            "log_clamped",
            Op::LogClamped(a, floor),
            self.shape(a).to_vec(),
            data,
            req,
        )
    }

    /// Total sum, producing a single-element tensor.
    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let total = self.data(a).iter().sum();
        let req = self.requires(a);
        self.push("sum", Op::Sum(a), vec![1], vec![total], req)
    }

    /// Mean over all leading axes, keeping the last (channel) axis:
    /// `(..., C) -> (C)`.
    pub fn mean_channels(&mut self, a: Value) -> Result<Value> {
        let shape = self.shape(a);
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "mean_channels",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let c = *shape.last().unwrap();
        let leading = self.data(a).len() / c;
        let mut out = vec![0.0; c];
        for (i, v) in self.data(a).iter().enumerate() {
            out[i % c] += v;
        }
        for v in &mut out {
            *v /= leading as f64;
        }
        let req = self.requires(a);
        self.push(
            "mean_channels",
            Op::MeanChannels(a),
            vec![c],
            out,
            req,
        )
    }

    /// Tiles a channel vector `(C)` over every leading position of
    /// `target_shape` (which must end in `C`).
    pub fn broadcast_channels(&mut self, a: Value, target_shape: &[usize]) -> Result<Value> {
        let c = self.data(a).len();
        if self.shape(a).len() != 1 || target_shape.last() != Some(&c) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_channels",
                lhs: self.shape(a).to_vec(),
                rhs: target_shape.to_vec(),
            });
        }
        let numel: usize = target_shape.iter().product();
        let src = self.data(a);
        let data = (0..numel).map(|i| src[i % c]).collect();
        let req = self.requires(a);
        self.push(
            "broadcast_channels",
            Op::BroadcastChannels(a),
            target_shape.to_vec(),
            data,
            req,
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Value) -> Result<Value> {
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let c = *shape.last().unwrap();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let req = self.requires(a);
        self.push("softmax", Op::Softmax(a), shape.to_vec(), data, req)
    }

    /// Extracts time step `t`: `(B, T, C) -> (B, C)`, or `(B, T) -> (B)`.
    pub fn select_time(&mut self, a: Value, t: usize) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let (b, tt, c) = match shape.as_slice() {
            [b, tt, c] => (*b, *tt, *c),
            [b, tt] => (*b, *tt, 1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "select_time",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        if t >= tt {
            return Err(Error::Config(format!(
                "select_time: step {t} out of range for length {tt}"
            )));
        }
        let src = self.data(a);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            out[bi * c..(bi + 1) * c]
                .copy_from_slice(&src[(bi * tt + t) * c..(bi * tt + t) * c + c]);
        }
        let out_shape = if shape.len() == 3 { vec![b, c] } else { vec![b] };
        let req = self.requires(a);
        self.push("select_time", Op::SelectTime(a, t), out_shape, out, req)
    }

    /// Stacks `T` tensors of shape `(B, C)` into `(B, T, C)`.
    pub fn stack_time(&mut self, steps: &[Value]) -> Result<Value> {
        if steps.is_empty() {
            return Err(Error::Config("stack_time: empty step list".into()));
        }
        let first = self.shape(steps[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "stack_time",
                lhs: first,
                rhs: vec![],
            });
        }
        let (b, c) = (first[0], first[1]);
        let t = steps.len();
        let mut out = vec![0.0; b * t * c];
        let mut req = false;
        for (ti, &v) in steps.iter().enumerate() {
            if self.shape(v) != [b, c] {
                return Err(Error::ShapeMismatch {
                    op: "stack_time",
                    lhs: vec![b, c],
                    rhs: self.shape(v).to_vec(),
                });
            }
            req |= self.requires(v);
            let src = self.data(v);
            for bi in 0..b {
                out[idx3(&[b, t, c], bi, ti, 0)..idx3(&[b, t, c], bi, ti, 0) + c]
                    .copy_from_slice(&src[bi * c..(bi + 1) * c]);
            }
        }
        self.push(
            "stack_time",
            Op::StackTime(steps.to_vec()),
            vec![b, t, c],
            out,
            req,
        )
    }

    /// Concatenates along the last axis; leading axes must match.
    pub fn concat_last(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.data(a).len() / ca;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let req = self.requires(a) || self.requires(b);
        self.push("concat_last", Op::ConcatLast(a, b), shape, out, req)
    }

    /// Multiplies each row of `x (B, C)` by the matching entry of `s (B)`.
    pub fn scale_rows(&mut self, x: Value, s: Value) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(s) != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sx,
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = sx[1];
        let sdata = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sdata[i / c])
            .collect();
        let req = self.requires(x) || self.requires(s);
        self.push("scale_rows", Op::ScaleRows(x, s), sx, data, req)
    }

    pub fn reshape(&mut self, a: Value, new_shape: Vec<usize>) -> Result<Value> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape,
            });
        }
        let data = self.data(a).to_vec();
        let req = self.requires(a);
        self.push("reshape", Op::Reshape(a), new_shape, data, req)
    }

    /// 1-D cross-correlation over `(B, T, C_in)` with kernel
    /// `(C_out, C_in, k)` and bias `(C_out)`.
    pub fn conv1d(&mut self, x: Value, kernel: Value, bias: Value, padding: Padding) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 3 || sx[2] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (b, t, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if self.shape(bias) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: vec![c_out],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (pad, t_out) = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::Config(
                        "conv1d: same-padding requires an odd kernel size".into(),
                    ));
                }
                ((k - 1) / 2, t)
            }
            Padding::Valid => {
                if t < k {
                    return Err(Error::Data(format!(
                        "conv1d: sequence length {t} shorter than kernel {k}"
                    )));
                }
                (0, t - k + 1)
            }
        };
        // Weight matrix view (C_in*k rows, C_out cols) transposed from the
        // kernel's native (C_out, C_in*k) layout, so the inner loop runs over
        // contiguous output channels while accumulation stays in ascending
        // (c_in, tap) order.
        let wt = transpose(self.data(kernel), c_out, c_in * k);
        let xdata = self.data(x);
        let bdata = self.data(bias);
        let mut out = vec![0.0; b * t_out * c_out];
        let run = |bi: usize, out_b: &mut [f64]| {
            let x_b = &xdata[bi * t * c_in..(bi + 1) * t * c_in];
            let mut patch = vec![0.0; c_in * k];
            for i in 0..t_out {
                patch.iter_mut().for_each(|v| *v = 0.0);
                for ci in 0..c_in {
                    for dt in 0..k {
                        let tt = i + dt;
                        if tt >= pad && tt - pad < t {
                            patch[ci * k + dt] = x_b[(tt - pad) * c_in + ci];
                        }
                    }
                }
                let row = &mut out_b[i * c_out..(i + 1) * c_out];
                row.copy_from_slice(bdata);
                for (q, &pv) in patch.iter().enumerate() {
                    let wrow = &wt[q * c_out..(q + 1) * c_out];
                    for (rv, wv) in row.iter_mut().zip(wrow) {
                        *rv += pv * wv;
                    }
                }
            }
        };
        if b * t_out * c_out * c_in * k >= PAR_THRESHOLD && b > 1 {
            out.par_chunks_mut(t_out * c_out)
                .enumerate()
                .for_each(|(bi, out_b)| run(bi, out_b));
        } else {
            for (bi, out_b) in out.chunks_mut(t_out * c_out).enumerate() {
                run(bi, out_b);
            }
        }
        let req = self.requires(x) || self.requires(kernel) || self.requires(bias);
        self.push(
            "conv1d",
            Op::Conv1d { x, kernel, bias, pad },
            vec![b, t_out, c_out],
            out,
            req,
        )
    }

    /// Non-overlapping max pooling over the time axis with window `pool`;
    /// a trailing remainder shorter than `pool` is dropped. Ties route the
    /// gradient to the first maximal index.
    pub fn maxpool1d(&mut self, x: Value, pool: usize) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "maxpool1d",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (b, t, c) = (sx[0], sx[1], sx[2]);
        if t < pool || pool == 0 {
            return Err(Error::Data(format!(
                "maxpool1d: sequence length {t} shorter than pool {pool}"
            )));
        }
        let t_out = t / pool;
        let src = self.data(x);
        let mut out = vec![0.0; b * t_out * c];
        let mut argmax = vec![0usize; b * t_out * c];
        for bi in 0..b {
            for o in 0..t_out {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for p in 0..pool {
                        let idx = idx3(&sx, bi, o * pool + p, ci);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    let oi = idx3(&[b, t_out, c], bi, o, ci);
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
        let req = self.requires(x);
        self.push(
            "maxpool1d",
            Op::MaxPool1d { x, argmax },
            vec![b, t_out, c],
            out,
            req,
        )
    }

    /// Propagates gradients from a scalar loss back to every leaf that
    /// requires them. Repeated calls accumulate into leaf gradients.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.nodes[loss.0].tensor.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].tensor.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Value, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].tensor.numel()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                self.accum(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                self.accum(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * db[j];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (j, x) in gb.iter_mut().enumerate() {
                        *x += g[j] * da[j];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * c;
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accum(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::AddBias(x, bias) => {
                let c = self.data(*bias).len();
                self.accum(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
                self.accum(grads, *bias, |gb| {
                    for (j, vv) in g.iter().enumerate() {
                        gb[j % c] += vv;
                    }
                });
            }
            Op::Matmul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[i].tensor.shape()[1];
                let (da, db) = (self.data(*a), self.data(*b));
                if *trans_b {
                    // y = a · bᵀ with b (n, k): ga = g · b, gb = gᵀ · a.
                    self.accum(grads, *a, |ga| {
                        let mut tmp = vec![0.0; m * k];
                        gemm_nn(g, db, m, n, k, &mut tmp);
                        ga.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                    });
                    self.accum(grads, *b, |gb| {
                        let gt = transpose(g, m, n);
                        let mut tmp = vec![0.0; n * k];
                        gemm_nn(&gt, da, n, m, k, &mut tmp);
                        gb.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                    });
                } else {
                    // y = a · b with b (k, n): ga = g · bᵀ, gb = aᵀ · g.
                    self.accum(grads, *a, |ga| {
                        let bt = transpose(db, k, n);
                        let mut tmp = vec![0.0; m * k];
                        gemm_nn(g, &bt, m, n, k, &mut tmp);
                        ga.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                    });
                    self.accum(grads, *b, |gb| {
                        let at = transpose(da, m, k);
                        let mut tmp = vec![0.0; k * n];
                        gemm_nn(&at, g, k, m, n, &mut tmp);
                        gb.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                    });
                }
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        if da[j] > 0.0 {
                            *x += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].tensor.data();
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].tensor.data();
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = self.nodes[i].tensor.data();
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] / (2.0 * y[j]);
                    }
                });
            }
            Op::Recip(a) => {
                let y = self.nodes[i].tensor.data();
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x -= g[j] * y[j] * y[j];
                    }
                });
            }
            Op::LogClamped(a, floor) => {
                let da = self.data(*a);
                let floor = *floor;
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        if da[j] > floor {
                            *x += g[j] / da[j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accum(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += gv));
            }
            Op::MeanChannels(a) => {
                let c = self.nodes[i].tensor.numel();
                let leading = self.nodes[a.0].tensor.numel() / c;
                let inv = 1.0 / leading as f64;
                self.accum(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j % c] * inv;
                    }
                });
            }
            Op::BroadcastChannels(a) => {
                let c = self.nodes[a.0].tensor.numel();
                self.accum(grads, *a, |ga| {
                    for (j, vv) in g.iter().enumerate() {
                        ga[j % c] += vv;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].tensor.data();
                let c = *self.nodes[i].tensor.shape().last().unwrap();
                self.accum(grads, *a, |ga| {
                    for r in 0..y.len() / c {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            ga[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::SelectTime(a, t) => {
                let sa = self.shape(*a);
                let (tt, c) = if sa.len() == 3 { (sa[1], sa[2]) } else { (sa[1], 1) };
                let t = *t;
                self.accum(grads, *a, |ga| {
                    for (bi, row) in g.chunks(c).enumerate() {
                        for (ci, vv) in row.iter().enumerate() {
                            ga[(bi * tt + t) * c + ci] += vv;
                        }
                    }
                });
            }
            Op::StackTime(steps) => {
                let shape = self.nodes[i].tensor.shape();
                let (b, t, c) = (shape[0], shape[1], shape[2]);
                for (ti, &v) in steps.iter().enumerate() {
                    self.accum(grads, v, |gv| {
                        for bi in 0..b {
                            let base = idx3(&[b, t, c], bi, ti, 0);
                            for ci in 0..c {
                                gv[bi * c + ci] += g[base + ci];
                            }
                        }
                    });
                }
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = self.nodes[a.0].tensor.numel() / ca;
                self.accum(grads, *a, |ga| {
                    for r in 0..rows {
                        for j in 0..ca {
                            ga[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    for r in 0..rows {
                        for j in 0..cb {
                            gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let c = self.shape(*x)[1];
                let (dx, ds) = (self.data(*x), self.data(*s));
                self.accum(grads, *x, |gx| {
                    for (j, v) in gx.iter_mut().enumerate() {
                        *v += g[j] * ds[j / c];
                    }
                });
                self.accum(grads, *s, |gs| {
                    for (j, gv) in g.iter().enumerate() {
                        gs[j / c] += gv * dx[j];
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Conv1d { x, kernel, bias, pad } => {
                let sx = self.shape(*x);
                let (b, t, c_in) = (sx[0], sx[1], sx[2]);
                let sk = self.shape(*kernel);
                let (c_out, k) = (sk[0], sk[2]);
                let t_out = self.nodes[i].tensor.shape()[1];
                let pad = *pad;
                let xdata = self.data(*x);
                let kdata = self.data(*kernel);

                self.accum(grads, *bias, |gb| {
                    for bi in 0..b {
                        for ti in 0..t_out {
                            for co in 0..c_out {
                                gb[co] += g[idx3(&[b, t_out, c_out], bi, ti, co)];
                            }
                        }
                    }
                });

                // Patches for every (batch, output step): row layout (c_in, tap).
                let ck = c_in * k;
                let mut patches = vec![0.0; b * t_out * ck];
                for bi in 0..b {
                    let x_b = &xdata[bi * t * c_in..(bi + 1) * t * c_in];
                    for ti in 0..t_out {
                        let prow = &mut patches[(bi * t_out + ti) * ck..(bi * t_out + ti + 1) * ck];
                        for ci in 0..c_in {
                            for dt in 0..k {
                                let tt = ti + dt;
                                if tt >= pad && tt - pad < t {
                                    prow[ci * k + dt] = x_b[(tt - pad) * c_in + ci];
                                }
                            }
                        }
                    }
                }

                self.accum(grads, *kernel, |gk| {
                    gk.par_chunks_mut(ck).enumerate().for_each(|(co, gkrow)| {
                        for bi in 0..b {
                            for ti in 0..t_out {
                                let gv = g[idx3(&[b, t_out, c_out], bi, ti, co)];
                                let prow =
                                    &patches[(bi * t_out + ti) * ck..(bi * t_out + ti + 1) * ck];
                                for (gkv, pv) in gkrow.iter_mut().zip(prow) {
                                    *gkv += gv * pv;
                                }
                            }
                        }
                    });
                });

                self.accum(grads, *x, |gx| {
                    gx.par_chunks_mut(t * c_in).enumerate().for_each(|(bi, gx_b)| {
                        let mut dpatch = vec![0.0; ck];
                        for ti in 0..t_out {
                            dpatch.iter_mut().for_each(|v| *v = 0.0);
                            for co in 0..c_out {
                                let gv = g[idx3(&[b, t_out, c_out], bi, ti, co)];
                                let krow = &kdata[co * ck..(co + 1) * ck];
                                for (dv, kv) in dpatch.iter_mut().zip(krow) {
                                    *dv += gv * kv;
                                }
                            }
                            for ci in 0..c_in {
                                for dt in 0..k {
                                    let tt = ti + dt;
                                    if tt >= pad && tt - pad < t {
                                        gx_b[(tt - pad) * c_in + ci] += dpatch[ci * k + dt];
                                    }
                                }
                            }
                        }
                    });
                });
            }
            Op::MaxPool1d { x, argmax } => {
                self.accum(grads, *x, |gx| {
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        gx[src_idx] += g[o];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = g.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, eye, false).unwrap();
        assert_eq!(g.tensor(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 2]));
        let err = g.matmul(a, b, false).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(a).unwrap();
        assert_eq!(g.tensor(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn tanh_zero_is_zero() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let y = g.tanh(a).unwrap();
        assert!(g.tensor(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_form() {
        // loss = sum(w * x), w=[1,2], x=[3,4] -> grad(w) = [3,4]
        let mut g = Graph::new();
        let w = g.leaf(t(vec![2], vec![1.0, 2.0]).with_requires_grad());
        let x = g.leaf(t(vec![2], vec![3.0, 4.0]));
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.tensor(w).grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_quadratic() {
        // loss = sum(w^2), w=[1,-2] -> grad(w) = [2,-4]
        let mut g = Graph::new();
        let w = g.leaf(t(vec![2], vec![1.0, -2.0]).with_requires_grad());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.tensor(w).grad().unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(t(vec![2], vec![1.0, 2.0]).with_requires_grad());
        let y = g.scale(w, 2.0).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let w = g.leaf(t(vec![1], vec![3.0]).with_requires_grad());
        let y = g.mul(w, w).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.tensor(w).grad().unwrap(), &[12.0]); // 2 * (2w)
    }

    #[test]
    fn unreachable_leaf_gets_no_grad() {
        let mut g = Graph::new();
        let w = g.leaf(t(vec![1], vec![1.0]).with_requires_grad());
        let unused = g.leaf(t(vec![1], vec![5.0]).with_requires_grad());
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert!(g.tensor(unused).grad().is_none());
        assert_eq!(g.tensor(w).grad().unwrap(), &[1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = g.softmax(a).unwrap();
        for row in g.tensor(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![1, 3], vec![0.5, 1.5, -0.5]));
        let shifted = g.add_scalar(a, 123.0).unwrap();
        let ya = g.softmax(a).unwrap();
        let yb = g.softmax(shifted).unwrap();
        for (u, v) in g.tensor(ya).data().iter().zip(g.tensor(yb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2, 1], vec![5.0, 5.0]).with_requires_grad());
        let y = g.maxpool1d(x, 2).unwrap();
        assert_eq!(g.tensor(y).data(), &[5.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.tensor(x).grad().unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn maxpool_drops_odd_tail() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.maxpool1d(x, 2).unwrap();
        assert_eq!(g.tensor(y).shape(), &[1, 2, 1]);
        assert_eq!(g.tensor(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn maxpool_rejects_too_short() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 1]));
        assert!(g.maxpool1d(x, 2).is_err());
    }

    #[test]
    fn conv1d_valid_all_ones_kernel() {
        // x = [1,2,3,4], k=3 all-ones, valid -> [6, 9]
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let kernel = g.leaf(t(vec![1, 1, 3], vec![1.0, 1.0, 1.0]));
        let bias = g.leaf(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, kernel, bias, Padding::Valid).unwrap();
        assert_eq!(g.tensor(y).shape(), &[1, 2, 1]);
        assert_eq!(g.tensor(y).data(), &[6.0, 9.0]);
    }

    #[test]
    fn conv1d_centered_identity_kernel() {
        let mut g = Graph::new();
        let xv = vec![0.25, -1.5, 3.0, 0.5, 2.0, -0.75];
        let x = g.leaf(t(vec![1, 6, 1], xv.clone()));
        let kernel = g.leaf(t(vec![1, 1, 3], vec![0.0, 1.0, 0.0]));
        let bias = g.leaf(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, kernel, bias, Padding::Same).unwrap();
        assert_eq!(g.tensor(y).data(), xv.as_slice());
    }

    #[test]
    fn conv1d_same_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 4, 1]));
        let kernel = g.leaf(Tensor::zeros(vec![1, 1, 2]));
        let bias = g.leaf(Tensor::zeros(vec![1]));
        assert!(g.conv1d(x, kernel, bias, Padding::Same).is_err());
    }

    #[test]
    fn concat_and_select_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(vec![2, 1], vec![9.0, 8.0]));
        let cat = g.concat_last(a, b).unwrap();
        assert_eq!(g.tensor(cat).shape(), &[2, 3]);
        assert_eq!(g.tensor(cat).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let stacked = g.stack_time(&[a, a]).unwrap();
        assert_eq!(g.tensor(stacked).shape(), &[2, 2, 2]);
        let step1 = g.select_time(stacked, 1).unwrap();
        assert_eq!(g.tensor(step1).data(), g.tensor(a).data());
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![1], vec![1e308]));
        let b = g.leaf(t(vec![1], vec![1e308]));
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        use super::super::gradient_check;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
        };

        // Each case: scalar-valued function of one tensor input.
        let p = rand_t(vec![2, 3, 4]);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Value) -> crate::Result<Value>>, Tensor)> = vec![
            (
                "mul_add_sub",
                Box::new(|g, x| {
                    let y = g.mul(x, x)?;
                    let z = g.add(y, x)?;
                    let w = g.sub(z, x)?;
                    g.sum(w)
                }),
                rand_t(vec![3, 3]),
            ),
            (
                "matmul_nn",
                Box::new(|g, x| {
                    let w = g.constant(
                        Tensor::new(vec![4, 2], (1..=8).map(|v| v as f64 / 3.0).collect()).unwrap(),
                    );
                    let y = g.matmul(x, w, false)?;
                    let s = g.tanh(y)?;
                    g.sum(s)
                }),
                rand_t(vec![3, 4]),
            ),
            (
                "matmul_nt",
                Box::new(|g, x| {
                    let w = g.constant(
                        Tensor::new(vec![2, 4], (1..=8).map(|v| v as f64 / 5.0).collect()).unwrap(),
                    );
                    let y = g.matmul(x, w, true)?;
                    let s = g.sigmoid(y)?;
                    g.sum(s)
                }),
                rand_t(vec![3, 4]),
            ),
            (
                "softmax_pick",
                Box::new(|g, x| {
                    let p = g.softmax(x)?;
                    let mask = g.constant(
                        Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap(),
                    );
                    let picked = g.mul(p, mask)?;
                    g.sum(picked)
                }),
                rand_t(vec![2, 3]),
            ),
            (
                "conv_pool",
                Box::new(|g, x| {
                    let kernel = g.constant(
                        Tensor::new(
                            vec![2, 4, 3],
                            (0..24).map(|v| (v as f64 - 12.0) / 10.0).collect(),
                        )
                        .unwrap(),
                    );
                    let bias = g.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
                    let y = g.conv1d(x, kernel, bias, Padding::Same)?;
                    let r = g.relu(y)?;
                    let pooled = g.maxpool1d(r, 2)?;
                    g.sum(pooled)
                }),
                rand_t(vec![2, 6, 4]),
            ),
            (
                "conv_valid_kernel_side",
                Box::new(|g, k| {
                    let x = g.constant(
                        Tensor::new(
                            vec![2, 5, 3],
                            (0..30).map(|v| (v as f64 * 0.7).sin()).collect(),
                        )
                        .unwrap(),
                    );
                    let bias = g.constant(Tensor::zeros(vec![2]));
                    let y = g.conv1d(x, k, bias, Padding::Valid)?;
                    let s = g.tanh(y)?;
                    g.sum(s)
                }),
                rand_t(vec![2, 3, 3]),
            ),
            (
                "norm_composition",
                Box::new(|g, x| {
                    let mu = g.mean_channels(x)?;
                    let mu_b = g.broadcast_channels(mu, &[2, 3, 4])?;
                    let centered = g.sub(x, mu_b)?;
                    let sq = g.mul(centered, centered)?;
                    let var = g.mean_channels(sq)?;
                    let var_eps = g.add_scalar(var, 1e-5)?;
                    let std = g.sqrt(var_eps)?;
                    let inv = g.recip(std)?;
                    let inv_b = g.broadcast_channels(inv, &[2, 3, 4])?;
                    let normed = g.mul(centered, inv_b)?;
                    g.sum(normed)
                }),
                p.clone(),
            ),
            (
                "time_ops",
                Box::new(|g, x| {
                    let t0 = g.select_time(x, 0)?;
                    let t2 = g.select_time(x, 2)?;
                    let cat = g.concat_last(t0, t2)?;
                    let stacked = g.stack_time(&[t0, t2])?;
                    let pick = g.select_time(stacked, 1)?;
                    let joined = g.concat_last(cat, pick)?;
                    let s = g.sigmoid(joined)?;
                    g.sum(s)
                }),
                p.clone(),
            ),
            (
                "scale_rows_bias",
                Box::new(|g, x| {
                    let sel = g.select_time(x, 1)?;
                    let weights = g.constant(Tensor::new(vec![2], vec![0.3, -1.1]).unwrap());
                    let scaled = g.scale_rows(sel, weights)?;
                    let bias = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
                    let shifted = g.add_bias(scaled, bias)?;
                    g.sum(shifted)
                }),
                p.clone(),
            ),
            (
                "log_clamped",
                Box::new(|g, x| {
                    let s = g.sigmoid(x)?;
                    let l = g.log_clamped(s, 1e-12)?;
                    let total = g.sum(l)?;
                    g.scale(total, -0.5)
                }),
                rand_t(vec![4]),
            ),
        ];

        for (name, f, point) in &cases {
            let err = gradient_check(f, point, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn replay_determinism_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(
                t(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.7]).with_requires_grad(),
            );
            let w = g.leaf(t(vec![2, 3], vec![0.5; 6]).with_requires_grad());
            let h = g.mul(x, w).unwrap();
            let s = g.tanh(h).unwrap();
            let loss = g.sum(s).unwrap();
            g.backward(loss).unwrap();
            (
                g.tensor(loss).data().to_vec(),
                g.tensor(x).grad().unwrap().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
