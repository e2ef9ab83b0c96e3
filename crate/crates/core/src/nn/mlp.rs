//! Fully connected networks recorded onto a [`Graph`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::graph::{Activation, Gradients, Graph, NodeId};
use super::NnError;
use crate::tensor::{matmul_acc, Tensor};

/// One affine layer followed by an activation. `weight` is `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Multi-layer perceptron parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Node handles produced by one [`Mlp::forward`] call.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub input: NodeId,
    pub output: NodeId,
    params: Vec<(NodeId, NodeId)>,
    pre_activations: Vec<NodeId>,
}

/// Graph nodes holding one network's `(weight, bias)` pairs.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<(NodeId, NodeId)>);

/// Anything whose tensors an optimizer can update.
pub trait Parameters {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::shape("mlp", "no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.dims() != (1, layer.output_dim()) {
                return Err(NnError::Dimension {
                    layer: i,
                    expected: layer.output_dim(),
                    got: layer.bias.cols(),
                });
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(NnError::Dimension {
                    layer: i,
                    expected: layers[i - 1].output_dim(),
                    got: layer.input_dim(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Glorot-uniform weights and zero biases. `widths` lists every layer
    /// boundary, input first; `hidden` is used between layers and `output`
    /// after the last one.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, w),
                    bias: Tensor::zeros(1, fan_out),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Mlp { layers }
    }

    /// Zero the last layer so the network starts out predicting zero.
    pub fn with_zero_output(mut self) -> Self {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        last.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.input_dim() {
            return Err(NnError::Dimension { layer: 0, expected: self.input_dim(), got: cols });
        }
        Ok(())
    }

    /// Put the parameters on the graph once so several forward passes can
    /// share them (their gradients then accumulate).
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams(
            self.layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
                .collect(),
        )
    }

    /// Parameters as constants: gradients still flow through to the input.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams(
            self.layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        )
    }

    /// Record a forward pass through already bound parameters.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        input: NodeId,
        params: &BoundParams,
    ) -> Result<MlpTrace, NnError> {
        self.check_input(g.value(input).cols())?;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = input;
        for (layer, &(w, b)) in self.layers.iter().zip(&params.0) {
            let z = g.matmul(h, w)?;
            let z = g.add_row_bias(z, b)?;
            pre_activations.push(z);
            h = g.activation(z, layer.activation)?;
        }
        Ok(MlpTrace { input, output: h, params: params.0.clone(), pre_activations })
    }

    /// Record a forward pass with the parameters as differentiable leaves.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<MlpTrace, NnError> {
        let params = self.bind(g);
        self.forward_with(g, input, &params)
    }

    /// Record a forward pass with the parameters held constant; gradients
    /// still flow to `input`.
    pub fn forward_frozen(&self, g: &mut Graph, input: NodeId) -> Result<NodeId, NnError> {
        let params = self.bind_frozen(g);
        Ok(self.forward_with(g, input, &params)?.output)
    }

    /// Graph-free evaluation on a batch of rows.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(input.cols())?;
        let n = input.rows();
        let mut h = input.data().to_vec();
        for layer in &self.layers {
            let (k, m) = layer.weight.dims();
            let mut out = vec![0.0; n * m];
            matmul_acc(&h, layer.weight.data(), &mut out, n, k, m);
            for row in out.chunks_mut(m) {
                for (o, b) in row.iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            if layer.activation != Activation::Linear {
                out.iter_mut().for_each(|x| *x = layer.activation.apply(*x));
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite { op: "mlp" });
            }
            h = out;
        }
        Ok(Tensor::matrix(n, self.output_dim(), h))
    }

    /// Node holding the gradient of each row's scalar output with respect to
    /// that row's input, built from differentiable ops so it can itself be
    /// differentiated with respect to the parameters.
    ///
    /// With piecewise-linear activations the gradient is the product of the
    /// transposed weights and the (locally constant) activation masks.
    pub fn input_gradient(&self, g: &mut Graph, trace: &MlpTrace) -> Result<NodeId, NnError> {
        if self.output_dim() != 1 {
            return Err(NnError::shape(
                "input_gradient",
                alloc::format!("network output width {} is not scalar", self.output_dim()),
            ));
        }
        if let Some(l) = self.layers.iter().find(|l| !l.activation.is_piecewise_linear()) {
            return Err(NnError::UnsupportedActivation(l.activation.name()));
        }
        let n = g.value(trace.input).rows();
        let mut grad = g.constant(Tensor::filled(n, 1, 1.0));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation != Activation::Linear {
                let act = layer.activation;
                let pre = g.value(trace.pre_activations[i]);
                let mask = pre.map(|x| act.derivative(x, act.apply(x)));
                let mask = g.constant(mask);
                grad = g.mul(grad, mask)?;
            }
            let wt = g.transpose(trace.params[i].0)?;
            grad = g.matmul(grad, wt)?;
        }
        Ok(grad)
    }

    /// Parameter gradients in [`Parameters`] order.
    pub fn gradients(&self, grads: &Gradients, trace: &MlpTrace) -> Vec<Tensor> {
        trace.params.iter().flat_map(|&(w, b)| [grads.get(w), grads.get(b)]).collect()
    }

    /// Gradients for parameters bound with [`Mlp::bind`].
    pub fn bound_gradients(&self, grads: &Gradients, params: &BoundParams) -> Vec<Tensor> {
        params.0.iter().flat_map(|&(w, b)| [grads.get(w), grads.get(b)]).collect()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.parameters() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

impl Parameters for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Layer widths `input, hidden x depth, output`.
pub fn widths(input: usize, hidden: usize, hidden_layers: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(core::iter::repeat_n(hidden, hidden_layers));
    w.push(output);
    w
}
