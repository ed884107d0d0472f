//! Additive attention pooling over a hidden-state sequence.

use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, BoundParams, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Value};

/// Scores each time step with `e_t = tanh(w · h_t + b)` (a scalar per step),
/// softmax-normalizes the scores over time, and returns the weighted sum of
/// hidden states as the context vector.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    w: ParamId,
    b: ParamId,
    pub hidden_size: usize,
}

impl AttentionLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        hidden_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = params.add(
            &format!("{name}.w"),
            glorot_uniform(rng, vec![1, hidden_size], hidden_size, 1),
            0.0,
        )?;
        let b = params.add(&format!("{name}.b"), Tensor::zeros(vec![1]), 0.0)?;
        Ok(Self {
            w,
            b,
            hidden_size,
        })
    }
}

/// Pools `(B, T, H)` into a context `(B, H)` plus the attention weights
/// `(B, T)`, which are nonnegative and sum to one per row.
pub fn attention_pool(
    graph: &mut Graph,
    layer: &AttentionLayer,
    bound: &BoundParams,
    h: Value,
) -> Result<(Value, Value)> {
    let shape = graph.tensor(h).shape().to_vec();
    if shape.len() != 3 || shape[2] != layer.hidden_size {
        return Err(Error::ShapeMismatch {
            op: "attention_pool",
            lhs: shape,
            rhs: vec![layer.hidden_size],
        });
    }
    let t = shape[1];

    let mut steps = Vec::with_capacity(t);
    let mut scores: Option<Value> = None;
    for ti in 0..t {
        let h_t = graph.select_time(h, ti)?;
        let raw = graph.matmul(h_t, bound.value(layer.w), true)?;
        let shifted = graph.add_bias(raw, bound.value(layer.b))?;
        let e_t = graph.tanh(shifted)?; // (B, 1)
        scores = Some(match scores {
            Some(prev) => graph.concat_last(prev, e_t)?,
            None => e_t,
        });
        steps.push(h_t);
    }
    let weights = graph.softmax(scores.expect("at least one step"))?; // (B, T)

    let mut context: Option<Value> = None;
    for (ti, &h_t) in steps.iter().enumerate() {
        let alpha_t = graph.select_time(weights, ti)?; // (B)
        let term = graph.scale_rows(h_t, alpha_t)?;
        context = Some(match context {
            Some(prev) => graph.add(prev, term)?,
            None => term,
        });
    }
    Ok((context.expect("at least one step"), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn zeroed_layer(h: usize) -> (ParamSet, AttentionLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let layer = AttentionLayer::new(&mut ps, "attn", h, &mut rng).unwrap();
        for p in ps.iter_mut() {
            p.tensor = Tensor::zeros(p.tensor.shape().to_vec()).with_requires_grad();
        }
        (ps, layer)
    }

    #[test]
    fn zero_weights_give_uniform_attention_and_time_mean() {
        let (ps, layer) = zeroed_layer(2);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(
            Tensor::new(vec![1, 4, 2], vec![1.0, 0.0, 2.0, 4.0, 3.0, 8.0, 6.0, 0.0]).unwrap(),
        );
        let (ctx, w) = attention_pool(&mut g, &layer, &bound, x).unwrap();
        for &v in g.tensor(w).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let c = g.tensor(ctx).data();
        assert!((c[0] - 3.0).abs() < 1e-12);
        assert!((c[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_returns_that_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let layer = AttentionLayer::new(&mut ps, "attn", 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(Tensor::new(vec![2, 1, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 9.0]).unwrap());
        let (ctx, w) = attention_pool(&mut g, &layer, &bound, x).unwrap();
        assert_eq!(g.tensor(w).data(), &[1.0, 1.0]);
        assert_eq!(g.tensor(ctx).data(), g.tensor(x).data());
    }

    #[test]
    fn context_matches_direct_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let (b, t, h) = (3, 5, 4);
        let layer = AttentionLayer::new(&mut ps, "attn", h, &mut rng).unwrap();
        let data: Vec<f64> = (0..b * t * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(Tensor::new(vec![b, t, h], data.clone()).unwrap());
        let (ctx, w) = attention_pool(&mut g, &layer, &bound, x).unwrap();

        let wd = g.tensor(w).data();
        for bi in 0..b {
            let row = &wd[bi * t..(bi + 1) * t];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
            for hi in 0..h {
                let mut expect = 0.0;
                for ti in 0..t {
                    expect += row[ti] * data[(bi * t + ti) * h + hi];
                }
                let got = g.tensor(ctx).data()[bi * h + hi];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::tensor::gradient_check;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let layer = AttentionLayer::new(&mut ps, "attn", 3, &mut rng).unwrap();
        let point = Tensor::new(
            vec![2, 4, 3],
            (0..24).map(|i| ((i * 3) as f64 * 0.61).cos()).collect(),
        )
        .unwrap();
        let err = gradient_check(
            |g, x| {
                let bound = ps.bind(g, false);
                let (ctx, _) = attention_pool(g, &layer, &bound, x)?;
                let sq = g.mul(ctx, ctx)?;
                g.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
