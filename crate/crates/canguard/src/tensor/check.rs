//! Finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Value};
use crate::error::{Error, Result};

/// Max relative error between the analytic gradient of `f` at `point` and a
/// central finite difference, over every coordinate of `point`.
///
/// `f` must build a scalar output on the supplied graph and be deterministic:
/// any stochastic pieces (dropout masks) have to be fixed by the caller.
pub fn gradient_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Value) -> Result<Value>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    gradient_check_at(f, point, epsilon, &all)
}

/// Same as [`gradient_check`] restricted to the given coordinate indices.
/// Large tensors can be spot-checked on a seeded sample of coordinates.
pub fn gradient_check_at<F>(f: F, point: &Tensor, epsilon: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Value) -> Result<Value>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Config(format!(
            "gradient_check: epsilon {epsilon} outside (0, 1e-2]"
        )));
    }

    let analytic = {
        let mut graph = Graph::new();
        let x = graph.leaf(point.clone().with_requires_grad());
        let out = f(&mut graph, x)?;
        if graph.tensor(out).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "gradient_check",
                lhs: graph.tensor(out).shape().to_vec(),
                rhs: vec![1],
            });
        }
        graph.backward(out)?;
        match graph.tensor(x).grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; point.numel()],
        }
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let mut graph = Graph::new();
        let x = graph.leaf(Tensor::new(point.shape().to_vec(), data.to_vec())?);
        let out = f(&mut graph, x)?;
        graph.tensor(out).scalar_value()
    };

    let mut max_err = 0.0f64;
    let mut perturbed = point.data().to_vec();
    for &i in coords {
        let orig = perturbed[i];
        perturbed[i] = orig + epsilon;
        let plus = eval(&perturbed)?;
        perturbed[i] = orig - epsilon;
        let minus = eval(&perturbed)?;
        perturbed[i] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
