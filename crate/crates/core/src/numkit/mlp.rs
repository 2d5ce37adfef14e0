use rand::Rng as _;

use crate::error::{Error, Result};

use super::graph::{sigmoid_scalar, softplus_scalar, Graph, Var};
use super::rng::{standard_normal, Rng};
use super::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus_scalar(x),
            Activation::Identity => x,
        }
    }

    fn record(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Softplus => g.softplus(x),
            Activation::Identity => x,
        }
    }
}

/// Weight initialization.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    /// Multiplier on the Glorot-uniform bound.
    pub weight_gain: f64,
    /// Standard deviation of Gaussian biases; zero gives zero biases.
    pub bias_std: f64,
}

impl Default for Init {
    fn default() -> Self {
        Self { weight_gain: 1.0, bias_std: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `in × out`.
    pub weight: Tensor2,
    /// `1 × out`.
    pub bias: Tensor2,
    pub activation: Activation,
}

/// Fully connected network; layer `i` computes `act_i(x · W_i + b_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last layer `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, init: Init, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = init.weight_gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                let b = (0..fan_out).map(|_| init.bias_std * standard_normal(rng)).collect();
                Layer {
                    weight: Tensor2::raw(fan_in, fan_out, w),
                    bias: Tensor2::raw(1, fan_out, b),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    /// Builds from explicit layers, checking that dims chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("MLP with no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.cols() {
                return Err(Error::Dimension(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::Dimension(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.weight.rows(),
                    layers[i - 1].weight.cols()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.cols()));
        d
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weight then bias for each layer, in order.
    pub fn params(&self) -> Vec<&Tensor2> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Registers every parameter as a graph leaf, in [`Mlp::params`] order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.param(p)).collect()
    }

    /// Registers parameters as constants (frozen network inside a larger graph).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Records the forward pass on `g` using previously bound parameter vars.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim() {
            return Err(Error::Dimension(format!("MLP expects {} inputs, got {cols}", self.input_dim())));
        }
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::Dimension(format!("{} bound vars for {} layers", vars.len(), self.layers.len())));
        }
        let mut h = x;
        for (l, pair) in self.layers.iter().zip(vars.chunks(2)) {
            let z = g.matmul(h, pair[0]);
            let z = g.add_row(z, pair[1]);
            h = l.activation.record(g, z);
        }
        Ok(h)
    }

    /// Plain evaluation, no tape.
    pub fn eval(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!("MLP expects {} inputs, got {}", self.input_dim(), x.cols())));
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = super::tensor::matmul_nn(&h, &l.weight);
            let m = z.cols();
            let act = l.activation;
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v = act.apply(*v + l.bias.data()[k % m]);
            }
            h = z;
        }
        Ok(h)
    }

    /// Single-row evaluation without allocating tensors per layer.
    pub fn eval_row(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut h = x.to_vec();
        for l in &self.layers {
            let m = l.weight.cols();
            let mut z = l.bias.data().to_vec();
            for (p, &hv) in h.iter().enumerate() {
                let wrow = &l.weight.data()[p * m..(p + 1) * m];
                for (zv, &w) in z.iter_mut().zip(wrow) {
                    *zv += hv * w;
                }
            }
            for v in &mut z {
                *v = l.activation.apply(*v);
            }
            h = z;
        }
        h
    }
}

/// Numerically stable logistic function, exposed for models that post-process logits.
pub fn sigmoid(x: f64) -> f64 {
    sigmoid_scalar(x)
}
