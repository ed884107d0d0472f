//! Per-channel batch normalization for `(B, T, C)` sequences.

use super::{BoundParams, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Value};

/// BatchNorm over the channel axis. Train mode normalizes with batch
/// statistics (population variance over all `B·T` positions per channel)
/// and updates running statistics; eval mode uses the running statistics.
///
/// The normalization is expressed as a composition of differentiable graph
/// ops, so gradients flow through the batch statistics exactly.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    gamma: ParamId,
    beta: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Result<Self> {
        let gamma = params.add(
            &format!("{name}.gamma"),
            Tensor::new(vec![channels], vec![1.0; channels])?,
            0.0,
        )?;
        let beta = params.add(&format!("{name}.beta"), Tensor::zeros(vec![channels]), 0.0)?;
        Ok(Self {
            gamma,
            beta,
            channels,
            momentum: 0.9,
            eps: 1e-5,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        })
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(Error::Config("running stats length mismatch".into()));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("negative running variance".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Train-mode forward; updates running statistics as a side effect.
    pub fn forward_train(
        &mut self,
        graph: &mut Graph,
        bound: &BoundParams,
        x: Value,
    ) -> Result<Value> {
        let shape = graph.tensor(x).shape().to_vec();
        self.check_channels(&shape)?;

        let mu = graph.mean_channels(x)?;
        let mu_b = graph.broadcast_channels(mu, &shape)?;
        let centered = graph.sub(x, mu_b)?;
        let sq = graph.mul(centered, centered)?;
        let var = graph.mean_channels(sq)?;

        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * graph.tensor(mu).data()[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * graph.tensor(var).data()[c];
        }

        let var_eps = graph.add_scalar(var, self.eps)?;
        let std = graph.sqrt(var_eps)?;
        let inv_std = graph.recip(std)?;
        let inv_std_b = graph.broadcast_channels(inv_std, &shape)?;
        let normed = graph.mul(centered, inv_std_b)?;
        self.affine(graph, bound, normed, &shape)
    }

    /// Eval-mode forward using running statistics; no mutation.
    pub fn forward_eval(&self, graph: &mut Graph, bound: &BoundParams, x: Value) -> Result<Value> {
        let shape = graph.tensor(x).shape().to_vec();
        self.check_channels(&shape)?;

        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let mean = graph.constant(Tensor::new(vec![self.channels], self.running_mean.clone())?);
        let inv = graph.constant(Tensor::new(vec![self.channels], inv_std)?);
        let mean_b = graph.broadcast_channels(mean, &shape)?;
        let inv_b = graph.broadcast_channels(inv, &shape)?;
        let centered = graph.sub(x, mean_b)?;
        let normed = graph.mul(centered, inv_b)?;
        self.affine(graph, bound, normed, &shape)
    }

    fn affine(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        normed: Value,
        shape: &[usize],
    ) -> Result<Value> {
        let gamma_b = graph.broadcast_channels(bound.value(self.gamma), shape)?;
        let scaled = graph.mul(normed, gamma_b)?;
        graph.add_bias(scaled, bound.value(self.beta))
    }

    fn check_channels(&self, shape: &[usize]) -> Result<()> {
        if shape.last() != Some(&self.channels) {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: shape.to_vec(),
                rhs: vec![self.channels],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_stats(data: &[f64], c: usize, ci: usize) -> (f64, f64) {
        let vals: Vec<f64> = data.iter().skip(ci).step_by(c).cloned().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn train_mode_output_has_beta_mean_and_gamma_sq_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut ps, "bn", 3).unwrap();
        // Bend gamma/beta away from the defaults.
        for p in ps.iter_mut() {
            let t = if p.name.ends_with("gamma") {
                Tensor::new(vec![3], vec![2.0, 0.5, 1.5]).unwrap()
            } else {
                Tensor::new(vec![3], vec![-1.0, 0.25, 3.0]).unwrap()
            };
            p.tensor = t.with_requires_grad();
        }

        let (b, t, c) = (8, 4, 3);
        // Spread the input well past eps so the eps bias stays under tolerance.
        let data: Vec<f64> = (0..b * t * c).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(Tensor::new(vec![b, t, c], data).unwrap());
        let y = bn.forward_train(&mut g, &bound, x).unwrap();

        let gamma = [2.0, 0.5, 1.5];
        let beta = [-1.0, 0.25, 3.0];
        for ci in 0..c {
            let (mean, var) = channel_stats(g.tensor(y).data(), c, ci);
            assert!((mean - beta[ci]).abs() < 1e-8, "mean[{ci}] = {mean}");
            assert!(
                (var - gamma[ci] * gamma[ci]).abs() < 1e-6,
                "var[{ci}] = {var}"
            );
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut ps = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut ps, "bn", 1).unwrap();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(Tensor::new(vec![2, 2, 1], vec![10.0, 10.0, 10.0, 10.0]).unwrap());
        bn.forward_train(&mut g, &bound, x).unwrap();
        // momentum 0.9: mean 0 -> 0.9*0 + 0.1*10 = 1.0; var 1 -> 0.9*1 + 0.1*0
        assert!((bn.running_mean[0] - 1.0).abs() < 1e-12);
        assert!((bn.running_var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats_and_is_pure() {
        let mut ps = ParamSet::new();
        let mut bn = BatchNorm1d::new(&mut ps, "bn", 2).unwrap();
        bn.set_running_stats(vec![1.0, -1.0], vec![4.0, 0.25]).unwrap();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![3.0, 0.0, 1.0, -1.0]).unwrap());
        let y = bn.forward_eval(&mut g, &bound, x).unwrap();
        // (3-1)/2, (0+1)/0.5, (1-1)/2, (-1+1)/0.5 (up to eps in the denominator)
        let expect = [1.0, 2.0, 0.0, 0.0];
        for (a, e) in g.tensor(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
        assert_eq!(bn.running_stats().0, &[1.0, -1.0]);
    }

    #[test]
    fn gradients_flow_through_batch_statistics() {
        use crate::tensor::gradient_check;
        let mut ps = ParamSet::new();
        let bn_proto = BatchNorm1d::new(&mut ps, "bn", 2).unwrap();
        let point = Tensor::new(
            vec![3, 2, 2],
            vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1, 0.9, -0.2, 0.0, 1.4, -1.3, 0.6],
        )
        .unwrap();
        let err = gradient_check(
            |g, x| {
                let mut bn = bn_proto.clone();
                let bound = ps.bind(g, false);
                let y = bn.forward_train(g, &bound, x)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
