//! Neural network layers over the autodiff core: Conv1D, BatchNorm1D,
//! max pooling, dropout, GRU (single direction, bidirectional, stacked),
//! additive attention, dense layers, and the weighted cross-entropy loss.
//!
//! Layers own no tensors directly; they hold [`ParamId`] handles into a
//! [`ParamSet`]. A forward pass binds the whole set onto a fresh [`Graph`]
//! (see [`ParamSet::bind`]) so the same parameters can drive many
//! independent graphs.

mod attention;
mod conv;
mod gru;
mod loss;
mod norm;

pub use attention::{attention_pool, AttentionLayer};
pub use conv::Conv1dLayer;
pub use gru::{bigru, gru_sequence, Direction, GruCell};
pub use loss::cross_entropy_weighted;
pub use norm::BatchNorm1d;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Value};

/// A named trainable tensor, optionally L2-regularized.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub l2_coefficient: f64,
}

/// Handle to a parameter within a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// The flat, ordered collection of a model's parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique within the set.
    pub fn add(&mut self, name: &str, tensor: Tensor, l2_coefficient: f64) -> Result<ParamId> {
        if l2_coefficient < 0.0 {
            return Err(Error::Config(format!(
                "parameter {name}: negative l2 coefficient"
            )));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.params.push(Parameter {
            tensor: tensor.with_requires_grad(),
            name: name.to_string(),
            l2_coefficient,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count across the set.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Pushes every parameter onto a graph. With `trainable`, leaves carry
    /// `requires_grad` so [`Graph::backward`] fills their gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let values = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.leaf(p.tensor.clone())
                } else {
                    graph.constant(p.tensor.clone())
                }
            })
            .collect();
        BoundParams { values }
    }

    /// Copies leaf gradients from a graph back into the set, accumulating
    /// into any gradient already present.
    pub fn absorb_grads(&mut self, graph: &Graph, bound: &BoundParams) {
        for (param, &value) in self.params.iter_mut().zip(&bound.values) {
            if let Some(g) = graph.tensor(value).grad() {
                param.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// `(value, l2_coefficient)` pairs for the regularized parameters of a
    /// bound set, for building the loss penalty.
    pub fn l2_terms(&self, bound: &BoundParams) -> Vec<(Value, f64)> {
        self.params
            .iter()
            .zip(&bound.values)
            .filter(|(p, _)| p.l2_coefficient > 0.0)
            .map(|(p, &v)| (v, p.l2_coefficient))
            .collect()
    }
}

/// Graph handles for a bound [`ParamSet`], indexable by [`ParamId`].
pub struct BoundParams {
    values: Vec<Value>,
}

impl BoundParams {
    pub fn value(&self, id: ParamId) -> Value {
        self.values[id.0]
    }
}

/// Glorot-uniform initialization: `U(-sqrt(6/(fan_in+fan_out)), +)`.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Phase and randomness for a forward pass. Training phases carry a seeded
/// RNG for dropout masks; evaluation is deterministic and mask-free.
pub struct ForwardCtx {
    training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        use rand::SeedableRng;
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Inverted dropout: scales kept activations by `1/(1-p)` at train time so
/// expected activations match inference, where this is the identity.
pub fn dropout(graph: &mut Graph, x: Value, p: f64, ctx: &mut ForwardCtx) -> Result<Value> {
    if !ctx.training() || p == 0.0 {
        return Ok(x);
    }
    let shape = graph.tensor(x).shape().to_vec();
    let mask = graph.constant(dropout_mask(&shape, p, ctx.rng())?);
    graph.mul(x, mask)
}

/// Bernoulli keep-mask with inverted scaling, as a plain tensor.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    let keep = 1.0 - p;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Activation applied after a dense affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

/// Fully connected layer `y = act(x Wᵀ + b)` with `W (out × in)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        l2_coefficient: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = params.add(
            &format!("{name}.w"),
            glorot_uniform(rng, vec![out_dim, in_dim], in_dim, out_dim),
            l2_coefficient,
        )?;
        let b = params.add(&format!("{name}.b"), Tensor::zeros(vec![out_dim]), 0.0)?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn forward(&self, graph: &mut Graph, bound: &BoundParams, x: Value) -> Result<Value> {
        let affine = graph.matmul(x, bound.value(self.w), true)?;
        let shifted = graph.add_bias(affine, bound.value(self.b))?;
        match self.activation {
            Activation::Relu => graph.relu(shifted),
            Activation::Softmax => graph.softmax(shifted),
            Activation::None => Ok(shifted),
        }
    }
}
