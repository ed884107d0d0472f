//! Class-weighted categorical cross-entropy with optional L2 penalties.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Value};

/// Builds the training loss
///
/// ```text
/// loss = -(1/B) * sum_b w[y_b] * ln(max(probs[b, y_b], 1e-12))
///        + sum_p (lambda_p / 2) * ||p||^2
/// ```
///
/// `probs` must be `(B, C)` with rows summing to 1 within 1e-6 (softmax
/// output); `targets` are class indices; `class_weights` one positive weight
/// per class; `l2_terms` the bound parameter values to penalize with their
/// coefficients.
pub fn cross_entropy_weighted(
    graph: &mut Graph,
    probs: Value,
    targets: &[usize],
    class_weights: &[f64],
    l2_terms: &[(Value, f64)],
) -> Result<Value> {
    let shape = graph.tensor(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || shape[1] != class_weights.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![targets.len(), class_weights.len()],
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    if class_weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Config("class weights must be positive".into()));
    }
    for (b, row) in graph.tensor(probs).data().chunks(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "cross_entropy: probability row {b} sums to {s}, not 1"
            )));
        }
    }
    let mut pick = vec![0.0; batch * classes];
    for (b, &y) in targets.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!(
                "cross_entropy: target {y} out of range for {classes} classes"
            )));
        }
        pick[b * classes + y] = class_weights[y];
    }
    let pick = graph.constant(Tensor::new(vec![batch, classes], pick)?);
    let logp = graph.log_clamped(probs, 1e-12)?;
    let weighted = graph.mul(logp, pick)?;
    let total = graph.sum(weighted)?;
    let mut loss = graph.scale(total, -1.0 / batch as f64)?;

    for &(param, lambda) in l2_terms {
        let sq = graph.mul(param, param)?;
        let ssq = graph.sum(sq)?;
        let penalty = graph.scale(ssq, lambda / 2.0)?;
        loss = graph.add(loss, penalty)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_zero_loss() {
        let mut g = Graph::new();
        let probs = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let loss =
            cross_entropy_weighted(&mut g, probs, &[0, 2], &[1.0, 1.0, 1.0], &[]).unwrap();
        assert!(g.tensor(loss).scalar_value().unwrap().abs() < 1e-10);
    }

    #[test]
    fn uniform_probs_give_ln_classes() {
        let mut g = Graph::new();
        let probs = g.leaf(Tensor::new(vec![1, 6], vec![1.0 / 6.0; 6]).unwrap());
        let loss = cross_entropy_weighted(&mut g, probs, &[3], &[1.0; 6], &[]).unwrap();
        let v = g.tensor(loss).scalar_value().unwrap();
        assert!((v - 6.0f64.ln()).abs() < 1e-12, "{v} vs ln 6");
    }

    #[test]
    fn weighted_batch_matches_hand_computation() {
        let mut g = Graph::new();
        let rows = vec![0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.25, 0.25, 0.5];
        let probs = g.leaf(Tensor::new(vec![3, 3], rows.clone()).unwrap());
        let weights = [2.0, 1.0, 0.5];
        let targets = [0usize, 1, 2];
        let loss = cross_entropy_weighted(&mut g, probs, &targets, &weights, &[]).unwrap();
        let expect = -(2.0 * 0.7f64.ln() + 1.0 * 0.6f64.ln() + 0.5 * 0.5f64.ln()) / 3.0;
        let got = g.tensor(loss).scalar_value().unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn l2_terms_add_penalty() {
        let mut g = Graph::new();
        let probs = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_requires_grad());
        let loss = cross_entropy_weighted(&mut g, probs, &[0], &[1.0, 1.0], &[(w, 0.1)]).unwrap();
        // base loss 0, penalty 0.1/2 * 25 = 1.25
        let v = g.tensor(loss).scalar_value().unwrap();
        assert!((v - 1.25).abs() < 1e-12);
        g.backward(loss).unwrap();
        // d penalty / dw = lambda * w
        for (got, expect) in g.tensor(w).grad().unwrap().iter().zip(&[0.3, 0.4]) {
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let mut g = Graph::new();
        let probs = g.leaf(Tensor::new(vec![1, 2], vec![0.6, 0.6]).unwrap());
        assert!(cross_entropy_weighted(&mut g, probs, &[0], &[1.0, 1.0], &[]).is_err());
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let mut g = Graph::new();
        let probs = g.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        assert!(cross_entropy_weighted(&mut g, probs, &[0], &[0.0, 1.0], &[]).is_err());
    }
}
