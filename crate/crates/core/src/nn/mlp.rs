//! Dense feed-forward network with exact reverse-mode gradients.
//!
//! Batches are column-major: every column of an input matrix is one sample.
//! Weight matrices have shape `(out_dim, in_dim)` so a layer computes
//! `a_out = act(W a_in + b)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{ImputeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: &mut DMatrix<f64>) {
        if self == Activation::Tanh {
            z.apply(|v| *v = v.tanh());
        }
    }

    /// Multiplies `grad` in place by the activation derivative, expressed
    /// through the activation output `a`.
    fn scale_by_derivative(self, grad: &mut DMatrix<f64>, a: &DMatrix<f64>) {
        if self == Activation::Tanh {
            grad.zip_apply(a, |g, a| *g *= 1.0 - a * a);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer activations recorded by [`Mlp::forward_trace`]; entry 0 is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<DMatrix<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("trace always holds the input")
    }
}

/// Parameter-shaped buffer: gradients, or Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.out_dim())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn same_shape(&self, net: &Mlp) -> bool {
        self.weights.len() == net.layers.len()
            && self.biases.len() == net.layers.len()
            && net.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].shape() == l.weights.shape() && self.biases[i].len() == l.out_dim()
            })
    }

    /// Flattened view in [`Mlp::param`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, tanh hidden layers and an identity output.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::with_output_activation(layer_sizes, Activation::Identity, rng)
    }

    pub fn with_output_activation<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..=limit));
                Layer {
                    weights,
                    biases: DVector::zeros(fan_out),
                    activation: if i + 1 == n { output } else { Activation::Tanh },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// All-zero network with tanh hidden layers and identity output.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                weights: DMatrix::zeros(w[1], w[0]),
                biases: DVector::zeros(w[1]),
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Tanh
                },
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ImputeError::Structure("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(ImputeError::shape(
                    "layer chain",
                    format!("layer {} input {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.out_dim() {
                return Err(ImputeError::shape(
                    "bias length",
                    format!("layer {i}: {}", l.out_dim()),
                    l.biases.len(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.as_slice().to_vec())
    }

    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(inputs)?;
        let mut a = inputs.clone();
        for layer in &self.layers {
            a = affine(layer, &a);
            layer.activation.apply(&mut a);
        }
        Ok(a)
    }

    pub fn forward_trace(&self, inputs: &DMatrix<f64>) -> Result<Trace> {
        self.check_input(inputs)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        for layer in &self.layers {
            let mut a = affine(layer, activations.last().unwrap());
            layer.activation.apply(&mut a);
            activations.push(a);
        }
        Ok(Trace { activations })
    }

    /// Gradients of `sum(output_grad ⊙ forward(input))` with respect to the
    /// parameters and the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let trace = self.forward_trace(&x)?;
        let g = DMatrix::from_column_slice(output_grad.len(), 1, output_grad);
        let (grads, gx) = self.backward_batch(&trace, &g)?;
        Ok((grads, gx.as_slice().to_vec()))
    }

    /// Batched backward pass; parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        trace: &Trace,
        output_grad: &DMatrix<f64>,
    ) -> Result<(Gradients, DMatrix<f64>)> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(ImputeError::shape(
                "backward trace",
                self.layers.len() + 1,
                trace.activations.len(),
            ));
        }
        let out = trace.output();
        if output_grad.shape() != out.shape() {
            return Err(ImputeError::shape(
                "backward output gradient",
                format!("{:?}", out.shape()),
                format!("{:?}", output_grad.shape()),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer
                .activation
                .scale_by_derivative(&mut delta, &trace.activations[i + 1]);
            let a_in = &trace.activations[i];
            grads.weights[i] = &delta * a_in.transpose();
            grads.biases[i] = delta.column_sum();
            delta = layer.weights.tr_mul(&delta);
        }
        Ok((grads, delta))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Parameter by flat index: per layer, row-major weights then biases.
    pub fn param(&self, index: usize) -> f64 {
        let (layer, offset) = self.locate(index);
        let l = &self.layers[layer];
        if offset < l.weights.len() {
            l.weights[(offset / l.in_dim(), offset % l.in_dim())]
        } else {
            l.biases[offset - l.weights.len()]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (layer, offset) = self.locate(index);
        let l = &mut self.layers[layer];
        if offset < l.weights.len() {
            let cols = l.in_dim();
            l.weights[(offset / cols, offset % cols)] = value;
        } else {
            let n = l.weights.len();
            l.biases[offset - n] = value;
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (i, l) in self.layers.iter().enumerate() {
            let n = l.weights.len() + l.biases.len();
            if index < n {
                return (i, index);
            }
            index -= n;
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.nrows() != self.input_dim() {
            return Err(ImputeError::shape(
                "network input",
                self.input_dim(),
                inputs.nrows(),
            ));
        }
        Ok(())
    }
}

fn affine(layer: &Layer, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &layer.weights * a;
    for mut col in z.column_iter_mut() {
        col += &layer.biases;
    }
    z
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(ImputeError::Structure(
            "layer_sizes needs an input and an output size".into(),
        ));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(ImputeError::Structure(format!(
            "layer sizes must be positive, got {sizes:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: f64, b: f64, act: Activation) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weights: DMatrix::from_element(1, 1, w),
            biases: DVector::from_element(1, b),
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[0.3, -1.0, 9.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn tanh_at_origin() {
        let net = single(1.0, 0.0, Activation::Tanh);
        assert_eq!(net.forward(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn affine_by_hand() {
        let net = single(2.0, 1.0, Activation::Identity);
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(ImputeError::Shape { .. })));
        assert!(matches!(
            net.backward(&[1.0, 2.0, 3.0], &[1.0]),
            Err(ImputeError::Shape { .. })
        ));
    }

    #[test]
    fn layer_chain_is_validated() {
        let bad = vec![
            Layer {
                weights: DMatrix::zeros(4, 2),
                biases: DVector::zeros(4),
                activation: Activation::Tanh,
            },
            Layer {
                weights: DMatrix::zeros(1, 3),
                biases: DVector::zeros(1),
                activation: Activation::Identity,
            },
        ];
        assert!(Mlp::from_layers(bad).is_err());
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 1]).is_err());
    }

    #[test]
    fn glorot_shapes_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 8, 3], &mut rng).unwrap();
        assert_eq!(net.layer_sizes(), vec![4, 8, 3]);
        assert_eq!(net.layers()[0].weights.shape(), (8, 4));
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(net.layers()[0].weights.iter().all(|w| w.abs() <= limit));
        assert!(net.layers()[1].biases.iter().all(|&b| b == 0.0));
        assert_eq!(net.layers()[0].activation, Activation::Tanh);
        assert_eq!(net.layers()[1].activation, Activation::Identity);
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let (g, gx) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_gradient_by_hand() {
        let net = single(0.5, -2.0, Activation::Identity);
        let (g, gx) = net.backward(&[3.0], &[1.0]).unwrap();
        assert_eq!(g.weights[0][(0, 0)], 3.0);
        assert_eq!(g.biases[0][0], 1.0);
        assert_eq!(gx, vec![0.5]);
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 16, 16, 3], &mut rng).unwrap();
        let x = [0.1, -0.4, 0.9, 0.0, 2.0];
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn flat_param_indexing_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        assert_eq!(net.parameter_count(), 2 * 3 + 3 + 3 + 1);
        net.set_param(7, 42.0);
        assert_eq!(net.param(7), 42.0);
        assert_eq!(net.layers()[0].biases[1], 42.0);
        net.set_param(1, -1.0);
        assert_eq!(net.layers()[0].weights[(0, 1)], -1.0);
    }
}
