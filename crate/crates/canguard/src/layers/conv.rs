//! 1-D convolution layer.

use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, BoundParams, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Tensor, Value};

/// Temporal convolution: kernel `(out, in, k)` cross-correlated over
/// `(B, T, in)` input, bias per output channel.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    kernel: ParamId,
    bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: Padding,
}

impl Conv1dLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        padding: Padding,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if padding == Padding::Same && kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "{name}: same-padding requires an odd kernel size, got {kernel_size}"
            )));
        }
        let fan_in = in_channels * kernel_size;
        let fan_out = out_channels * kernel_size;
        let kernel = params.add(
            &format!("{name}.kernel"),
            glorot_uniform(
                rng,
                vec![out_channels, in_channels, kernel_size],
                fan_in,
                fan_out,
            ),
            0.0,
        )?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(vec![out_channels]), 0.0)?;
        Ok(Self {
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            padding,
        })
    }

    /// Output length for an input of length `t`.
    pub fn out_len(&self, t: usize) -> usize {
        match self.padding {
            Padding::Same => t,
            Padding::Valid => t + 1 - self.kernel_size,
        }
    }

    pub fn forward(&self, graph: &mut Graph, bound: &BoundParams, x: Value) -> Result<Value> {
        graph.conv1d(x, bound.value(self.kernel), bound.value(self.bias), self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Naive direct convolution: for each output cell, start from the bias
    /// and add taps in ascending (channel, offset) order.
    fn naive_conv1d(
        x: &[f64],
        (b, t, c_in): (usize, usize, usize),
        kernel: &[f64],
        (c_out, k): (usize, usize),
        bias: &[f64],
        pad: usize,
        t_out: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; b * t_out * c_out];
        for bi in 0..b {
            for ti in 0..t_out {
                for co in 0..c_out {
                    let mut s = bias[co];
                    for ci in 0..c_in {
                        for dt in 0..k {
                            let tt = ti + dt;
                            if tt >= pad && tt - pad < t {
                                s += x[(bi * t + (tt - pad)) * c_in + ci]
                                    * kernel[(co * c_in + ci) * k + dt];
                            }
                        }
                    }
                    out[(bi * t_out + ti) * c_out + co] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..25 {
            let b = rng.gen_range(1..4);
            let t = rng.gen_range(3..9);
            let c_in = rng.gen_range(1..5);
            let c_out = rng.gen_range(1..5);
            let k = 3;
            let same = trial % 2 == 0;
            let (padding, pad, t_out) = if same {
                (Padding::Same, (k - 1) / 2, t)
            } else {
                (Padding::Valid, 0, t - k + 1)
            };

            let xv: Vec<f64> = (0..b * t * c_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kv: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bv: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();

            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![b, t, c_in], xv.clone()).unwrap());
            let kernel = g.leaf(Tensor::new(vec![c_out, c_in, k], kv.clone()).unwrap());
            let bias = g.leaf(Tensor::new(vec![c_out], bv.clone()).unwrap());
            let y = g.conv1d(x, kernel, bias, padding).unwrap();

            let expected = naive_conv1d(&xv, (b, t, c_in), &kv, (c_out, k), &bv, pad, t_out);
            assert_eq!(g.tensor(y).data(), expected.as_slice(), "trial {trial}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let layer =
            Conv1dLayer::new(&mut ps, "c", 4, 8, 3, Padding::Same, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(Tensor::zeros(vec![2, 6, 3])); // 3 channels, layer wants 4
        assert!(layer.forward(&mut g, &bound, x).is_err());
    }

    #[test]
    fn rejects_sequence_shorter_than_kernel_for_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let layer =
            Conv1dLayer::new(&mut ps, "c", 2, 2, 3, Padding::Valid, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.leaf(Tensor::zeros(vec![1, 2, 2]));
        assert!(layer.forward(&mut g, &bound, x).is_err());
    }
}
