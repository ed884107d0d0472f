//! Gated recurrent unit: single cell, directional sequence runner, and the
//! bidirectional combinator.

use rand_chacha::ChaCha8Rng;

use super::{dropout_mask, glorot_uniform, BoundParams, ForwardCtx, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Value};

/// Time direction for a recurrent pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// GRU cell with per-gate weights over the concatenated `[input, hidden]`
/// vector:
///
/// ```text
/// z_t = sigmoid(W_z [x_t, h_{t-1}] + b_z)
/// r_t = sigmoid(W_r [x_t, h_{t-1}] + b_r)
/// h~_t = tanh(W_h [x_t, r_t * h_{t-1}] + b_h)
/// h_t = (1 - z_t) * h~_t + z_t * h_{t-1}
/// ```
///
/// Input and recurrent dropout both use a per-sequence fixed mask
/// (variational style): one mask is drawn per `gru_sequence` call and reused
/// at every time step, keeping gradients exact.
#[derive(Debug, Clone)]
pub struct GruCell {
    w_update: ParamId,
    w_reset: ParamId,
    w_cand: ParamId,
    b_update: ParamId,
    b_reset: ParamId,
    b_cand: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

impl GruCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        dropout: f64,
        recurrent_dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) || !(0.0..1.0).contains(&recurrent_dropout) {
            return Err(Error::Config(format!(
                "{name}: dropout rates must lie in [0, 1)"
            )));
        }
        let cat = input_size + hidden_size;
        let mut gate = |params: &mut ParamSet, rng: &mut ChaCha8Rng, gate_name: &str| {
            let w = params.add(
                &format!("{name}.{gate_name}.w"),
                glorot_uniform(rng, vec![hidden_size, cat], cat, hidden_size),
                0.0,
            )?;
            let b = params.add(
                &format!("{name}.{gate_name}.b"),
                Tensor::zeros(vec![hidden_size]),
                0.0,
            )?;
            Ok::<(ParamId, ParamId), Error>((w, b))
        };
        let (w_update, b_update) = gate(params, rng, "update")?;
        let (w_reset, b_reset) = gate(params, rng, "reset")?;
        let (w_cand, b_cand) = gate(params, rng, "cand")?;
        Ok(Self {
            w_update,
            w_reset,
            w_cand,
            b_update,
            b_reset,
            b_cand,
            input_size,
            hidden_size,
            dropout,
            recurrent_dropout,
        })
    }

    fn gate(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        w: ParamId,
        b: ParamId,
        cat: Value,
    ) -> Result<Value> {
        let affine = graph.matmul(cat, bound.value(w), true)?;
        graph.add_bias(affine, bound.value(b))
    }

    /// One recurrence step: `(x_t (B,C), h_prev (B,H)) -> h_t (B,H)`.
    /// `masked_prev` is `h_prev` with the recurrent dropout mask applied
    /// (equal to `h_prev` when not training).
    fn step(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        x_t: Value,
        h_prev: Value,
        masked_prev: Value,
    ) -> Result<Value> {
        let cat = graph.concat_last(x_t, masked_prev)?;
        let z_pre = self.gate(graph, bound, self.w_update, self.b_update, cat)?;
        let z = graph.sigmoid(z_pre)?;
        let r_pre = self.gate(graph, bound, self.w_reset, self.b_reset, cat)?;
        let r = graph.sigmoid(r_pre)?;

        let gated_prev = graph.mul(r, masked_prev)?;
        let cand_cat = graph.concat_last(x_t, gated_prev)?;
        let cand_pre = self.gate(graph, bound, self.w_cand, self.b_cand, cand_cat)?;
        let cand = graph.tanh(cand_pre)?;

        // h = (1 - z) * cand + z * h_prev == cand - z*cand + z*h_prev
        let z_cand = graph.mul(z, cand)?;
        let z_prev = graph.mul(z, h_prev)?;
        let keep = graph.sub(cand, z_cand)?;
        graph.add(keep, z_prev)
    }
}

/// Runs a cell over a `(B, T, C)` sequence from `h_0 = 0`, returning the
/// hidden state at every step as `(B, T, H)`. The backward direction
/// processes reversed time and re-reverses its output, so index `t` of the
/// result always refers to input step `t`.
pub fn gru_sequence(
    graph: &mut Graph,
    cell: &GruCell,
    bound: &BoundParams,
    x: Value,
    direction: Direction,
    ctx: &mut ForwardCtx,
) -> Result<Value> {
    let shape = graph.tensor(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cell.input_size {
        return Err(Error::ShapeMismatch {
            op: "gru_sequence",
            lhs: shape,
            rhs: vec![cell.input_size],
        });
    }
    let (b, t, _) = (shape[0], shape[1], shape[2]);

    let input_mask = if ctx.training() && cell.dropout > 0.0 {
        let m = dropout_mask(&[b, cell.input_size], cell.dropout, ctx.rng())?;
        Some(graph.constant(m))
    } else {
        None
    };
    let recurrent_mask = if ctx.training() && cell.recurrent_dropout > 0.0 {
        let m = dropout_mask(&[b, cell.hidden_size], cell.recurrent_dropout, ctx.rng())?;
        Some(graph.constant(m))
    } else {
        None
    };

    let mut h = graph.constant(Tensor::zeros(vec![b, cell.hidden_size]));
    let mut outputs: Vec<Option<Value>> = vec![None; t];
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..t).collect(),
        Direction::Backward => (0..t).rev().collect(),
    };
    for ti in order {
        let mut x_t = graph.select_time(x, ti)?;
        if let Some(m) = input_mask {
            x_t = graph.mul(x_t, m)?;
        }
        let masked_prev = match recurrent_mask {
            Some(m) => graph.mul(h, m)?,
            None => h,
        };
        h = cell.step(graph, bound, x_t, h, masked_prev)?;
        outputs[ti] = Some(h);
    }
    let steps: Vec<Value> = outputs.into_iter().map(|v| v.expect("all steps set")).collect();
    graph.stack_time(&steps)
}

/// Bidirectional GRU: runs `cell_fwd` forward and `cell_bwd` backward over
/// the same input and concatenates along features into `(B, T, 2H)`.
pub fn bigru(
    graph: &mut Graph,
    cell_fwd: &GruCell,
    cell_bwd: &GruCell,
    bound: &BoundParams,
    x: Value,
    ctx: &mut ForwardCtx,
) -> Result<Value> {
    let fwd = gru_sequence(graph, cell_fwd, bound, x, Direction::Forward, ctx)?;
    let bwd = gru_sequence(graph, cell_bwd, bound, x, Direction::Backward, ctx)?;
    graph.concat_last(fwd, bwd)
}
