//! Layer stacks with cached forward traces and reverse-mode gradients.

use super::ops::{self, Activation};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Convolution parameters: kernels `[C_out, C_in, K, K]` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Fully connected parameters: weights `[m, n]` and bias `[m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool2,
    /// Operates on the flattened input.
    Dense(Dense),
    Act(Activation),
    L1Norm,
    L2Norm,
    Flatten,
}

impl Layer {
    fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&c.kernels, &c.bias)),
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.kernels, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }
}

/// Gradients for one parameterized layer, shaped like its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameter gradients (None for parameter-free layers) plus the
/// gradient with respect to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<Option<LayerGrads>>,
    pub input: Tensor,
}

impl NetworkGrads {
    /// `self += other`, layer by layer.
    pub fn accumulate(&mut self, other: &NetworkGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err("NetworkGrads::accumulate", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    a.weights.add_scaled(&b.weights, 1.0)?;
                    a.bias.add_scaled(&b.bias, 1.0)?;
                }
                (None, None) => {}
                _ => return Err(shape_err("NetworkGrads::accumulate", "matching layers", "mismatch")),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.layers.iter_mut().flatten() {
            g.weights.data_mut().iter_mut().for_each(|v| *v *= k);
            g.bias.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Flat view of every parameter gradient in layer order (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weights.data().iter().chain(g.bias.data()))
            .copied()
            .collect()
    }
}

/// Intermediate activations recorded by [`Network::forward_trace`].
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `activations[i]` is the input to layer `i`; the last entry is the output.
    activations: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl Trace {
    pub fn output(&self) -> Option<&Tensor> {
        self.activations.last()
    }

    pub fn into_output(mut self) -> Option<Tensor> {
        self.activations.pop()
    }

    pub fn activation(&self, layer: usize) -> Option<&Tensor> {
        self.activations.get(layer)
    }
}

/// An ordered stack of layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = Self::apply(layer, &x)?.0;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &Tensor) -> Result<Trace> {
        let mut trace = Trace {
            activations: Vec::with_capacity(self.layers.len() + 1),
            argmax: Vec::with_capacity(self.layers.len()),
        };
        trace.activations.push(input.clone());
        for layer in &self.layers {
            let (y, arg) = Self::apply(layer, trace.activations.last().expect("non-empty"))?;
            trace.activations.push(y);
            trace.argmax.push(arg);
        }
        Ok(trace)
    }

    fn apply(layer: &Layer, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
        Ok(match layer {
            Layer::Conv2d(c) => (ops::conv2d_forward(x, &c.kernels, c.bias.data())?, None),
            Layer::MaxPool2 => {
                let (y, arg) = ops::maxpool2d(x)?;
                (y, Some(arg))
            }
            Layer::Dense(d) => {
                let y = ops::affine(x.data(), &d.weights, d.bias.data())?;
                (Tensor::from_vec(y), None)
            }
            Layer::Act(a) => (a.forward(x), None),
            Layer::L1Norm => (ops::l1_normalize(x), None),
            Layer::L2Norm => (ops::l2_normalize(x), None),
            Layer::Flatten => (x.clone().flatten(), None),
        })
    }

    /// Reverse-mode pass over a recorded trace.
    pub fn backward(&self, trace: &Trace, upstream: &Tensor) -> Result<NetworkGrads> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::NotForwarded);
        }
        let out = trace.output().expect("checked length");
        if out.shape() != upstream.shape() {
            return Err(shape_err(
                "Network::backward",
                format!("upstream {:?}", out.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.activations[i];
            let y = &trace.activations[i + 1];
            g = match layer {
                Layer::Conv2d(c) => {
                    let (dx, dk, db) = ops::conv2d_backward(x, &c.kernels, &g)?;
                    grads[i] = Some(LayerGrads {
                        weights: dk,
                        bias: Tensor::from_vec(db),
                    });
                    dx
                }
                Layer::MaxPool2 => {
                    let arg = trace.argmax[i].as_ref().ok_or(Error::NotForwarded)?;
                    ops::maxpool2d_backward(x.shape(), arg, &g)?
                }
                Layer::Dense(d) => {
                    let (dx, dw, db) = ops::affine_backward(x.data(), &d.weights, g.data())?;
                    grads[i] = Some(LayerGrads {
                        weights: dw,
                        bias: Tensor::from_vec(db),
                    });
                    Tensor::new(x.shape().to_vec(), dx)?
                }
                Layer::Act(a) => a.backward(y, &g)?,
                Layer::L1Norm => ops::l1_normalize_backward(x, &g)?,
                Layer::L2Norm => ops::l2_normalize_backward(x, &g)?,
                Layer::Flatten => g.reshape(x.shape().to_vec())?,
            };
        }
        Ok(NetworkGrads { layers: grads, input: g })
    }

    /// Zero gradients shaped like this network's parameters.
    pub fn zero_grads(&self, input_shape: &[usize]) -> NetworkGrads {
        NetworkGrads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.params().map(|(w, b)| LayerGrads {
                        weights: Tensor::zeros(w.shape().to_vec()),
                        bias: Tensor::zeros(b.shape().to_vec()),
                    })
                })
                .collect(),
            input: Tensor::zeros(input_shape.to_vec()),
        }
    }

    /// Plain SGD over every parameterized layer. Nothing is modified if any
    /// gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &NetworkGrads, learning_rate: f64) -> Result<()> {
        ops::check_learning_rate(learning_rate)?;
        if grads.layers.len() != self.layers.len() {
            return Err(shape_err("Network::sgd_step", self.layers.len(), grads.layers.len()));
        }
        for (i, (layer, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            match (layer.params(), g) {
                (Some((w, b)), Some(g)) => {
                    if w.shape() != g.weights.shape() || b.shape() != g.bias.shape() {
                        return Err(shape_err(
                            "Network::sgd_step",
                            format!("{:?}/{:?}", w.shape(), b.shape()),
                            format!("{:?}/{:?}", g.weights.shape(), g.bias.shape()),
                        ));
                    }
                    if !(g.weights.is_finite() && g.bias.is_finite()) {
                        return Err(Error::NonFiniteGradient { layer: i });
                    }
                }
                (None, None) => {}
                _ => return Err(shape_err("Network::sgd_step", "matching layers", format!("layer {i}"))),
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let (Some((w, b)), Some(g)) = (layer.params_mut(), g) {
                w.add_scaled(&g.weights, -learning_rate)?;
                b.add_scaled(&g.bias, -learning_rate)?;
            }
        }
        Ok(())
    }

    /// Every parameter value in layer order (weights then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| w.data().iter().chain(b.data()))
            .copied()
            .collect()
    }

    /// Overwrites every parameter from a flat slice produced by [`Network::flat_params`].
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(shape_err("Network::set_flat_params", self.param_count(), values.len()));
        }
        let mut offset = 0;
        for (w, b) in self.layers.iter_mut().filter_map(Layer::params_mut) {
            for t in [w, b] {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .all(|(w, b)| w.is_finite() && b.is_finite())
    }
}

/// Stateful wrapper that remembers the last forward pass of a network.
#[derive(Debug)]
pub struct Tape<'a> {
    network: &'a Network,
    trace: Option<Trace>,
}

impl<'a> Tape<'a> {
    pub fn new(network: &'a Network) -> Self {
        Self { network, trace: None }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let trace = self.network.forward_trace(input)?;
        let out = trace.output().expect("trace has output").clone();
        self.trace = Some(trace);
        Ok(out)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<NetworkGrads> {
        let trace = self.trace.as_ref().ok_or(Error::NotForwarded)?;
        self.network.backward(trace, upstream)
    }
}
