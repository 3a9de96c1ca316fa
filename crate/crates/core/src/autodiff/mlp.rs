use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

/// Weights of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

/// Anything holding trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl MlpParams {
    /// Uniform init in `±sqrt(1/fan_in)` for weights and biases.
    ///
    /// `sizes` lists layer widths from input to output, so `[4, 64, 64, 2]`
    /// builds three layers.
    pub fn init(sizes: &[usize], activation: Activation, output_activation: OutputActivation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("network needs at least an input and an output width, all positive; got {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                Layer { weight: Tensor::from_parts(vec![fan_out, fan_in], weight), bias: Tensor::from_parts(vec![fan_out], bias) }
            })
            .collect();
        Ok(Self { layers, activation, output_activation })
    }

    /// Sets the last layer to zero so the network initially outputs zeros.
    pub fn zero_output_layer(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
        self
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation, output_activation: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.outputs() {
                return Err(Error::Shape { op: "layer", expected: vec![l.outputs()], actual: l.bias.shape().to_vec() });
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Shape { op: "layer chain", expected: vec![layers[i - 1].outputs()], actual: vec![l.inputs()] });
            }
        }
        Ok(Self { layers, activation, output_activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Records the weights as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let layers = self.layers.iter().map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))).collect();
        BoundMlp {
            layers,
            activation: self.activation,
            output_activation: self.output_activation,
            input_dim: self.input_dim(),
            shapes: self.layers.iter().map(|l| (l.weight.shape().to_vec(), l.bias.shape().to_vec())).collect(),
        }
    }

    /// Elementwise `self = tau * other + (1 - tau) * self`.
    pub fn polyak_from(&mut self, other: &MlpParams, tau: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// An [`MlpParams`] whose tensors live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
    output_activation: OutputActivation,
    input_dim: usize,
    shapes: Vec<(Vec<usize>, Vec<usize>)>,
}

impl BoundMlp {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Gradients in the same layout as the source parameters.
    pub fn grads(&self, grads: &Gradients) -> MlpParams {
        let layers = self
            .layers
            .iter()
            .zip(&self.shapes)
            .map(|(&(w, b), (ws, bs))| {
                let weight = grads.wrt(w);
                let bias = grads.wrt(b);
                debug_assert_eq!(weight.shape(), ws.as_slice());
                debug_assert_eq!(bias.shape(), bs.as_slice());
                Layer { weight, bias }
            })
            .collect();
        MlpParams { layers, activation: self.activation, output_activation: self.output_activation }
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Evaluates the network on a `[batch, in]` (or `[in]`) input.
pub fn forward_mlp(tape: &mut Tape, net: &BoundMlp, input: Var) -> Result<Var> {
    let width = tape.value(input).cols();
    if width != net.input_dim {
        return Err(Error::Shape { op: "forward_mlp", expected: vec![net.input_dim], actual: tape.value(input).shape().to_vec() });
    }
    let mut h = input;
    let last = net.layers.len() - 1;
    for (i, &(w, b)) in net.layers.iter().enumerate() {
        let z = tape.matmul_t(h, w);
        let z = tape.add_row(z, b);
        h = if i < last {
            match net.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
            }
        } else {
            match net.output_activation {
                OutputActivation::Identity => z,
                OutputActivation::Tanh => tape.tanh(z),
            }
        };
    }
    tape.check()?;
    Ok(h)
}
