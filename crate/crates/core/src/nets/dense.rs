//! Batched dense layers with hand-written adjoints.
//!
//! Weights are stored `inputs x outputs` so a batch of row vectors maps as
//! `X W + b`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z < 0.0 {
                    0.0
                } else {
                    z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::None => 1.0,
        }
    }
}

/// Logistic function, exact 0 at `-inf` and 1 at `+inf`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    /// Kaiming-style uniform fan-in initialization, zero bias.
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let gain: f64 = if activation == Activation::Relu { 2.0 } else { 1.0 };
        let bound = (3.0 * gain / inputs as f64).sqrt();
        let mut layer = Dense::zeros(inputs, outputs, activation);
        for w in layer.weight.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseStack {
    pub layers: Vec<Dense>,
}

/// Cached activations of one batched forward pass.
#[derive(Clone, Debug)]
pub struct DenseTape {
    /// Input of each layer; `inputs[0]` is the stack input.
    pub inputs: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl DenseTape {
    /// Sign pattern of every ReLU pre-activation; used to detect kinks.
    pub fn relu_signature(&self, stack: &DenseStack) -> Vec<bool> {
        let mut sig = Vec::new();
        for (layer, z) in stack.layers.iter().zip(&self.pre) {
            if layer.activation == Activation::Relu {
                sig.extend(z.iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    /// Smallest |pre-activation| over ReLU units.
    pub fn min_relu_margin(&self, stack: &DenseStack) -> f64 {
        let mut m = f64::INFINITY;
        for (layer, z) in stack.layers.iter().zip(&self.pre) {
            if layer.activation == Activation::Relu {
                for &v in z.iter() {
                    m = m.min(v.abs());
                }
            }
        }
        m
    }
}

impl DenseStack {
    /// `dims = [in, h1, ..., out]`, one activation per layer.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Self {
        assert_eq!(dims.len(), activations.len() + 1);
        DenseStack {
            layers: dims
                .windows(2)
                .zip(activations)
                .map(|(d, &a)| Dense::new(d[0], d[1], a, rng))
                .collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn dims_chain(&self) -> bool {
        self.layers.windows(2).all(|w| w[0].outputs() == w[1].inputs())
            && self.layers.iter().all(|l| l.bias.len() == l.outputs())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            z.mapv_inplace(|v| layer.activation.apply(v));
            h = z;
        }
        h
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        self.forward(&x).into_raw_vec_and_offset().0
    }

    pub fn forward_tape(&self, x: Array2<f64>) -> DenseTape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            let y = z.mapv(|v| layer.activation.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        DenseTape {
            inputs,
            pre,
            output: h,
        }
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, tape: &DenseTape, d_out: &Array2<f64>, grads: &mut DenseStack) -> Array2<f64> {
        let mut d = d_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = if i + 1 < self.layers.len() {
                &tape.inputs[i + 1]
            } else {
                &tape.output
            };
            if layer.activation != Activation::None {
                ndarray::Zip::from(&mut d)
                    .and(&tape.pre[i])
                    .and(y)
                    .for_each(|g, &z, &y| *g *= layer.activation.derivative(z, y));
            }
            let g = &mut grads.layers[i];
            ndarray::linalg::general_mat_mul(1.0, &tape.inputs[i].t(), &d, 1.0, &mut g.weight);
            g.bias += &d.sum_axis(Axis(0));
            d = d.dot(&layer.weight.t());
        }
        d
    }
}

impl Parameters for DenseStack {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        for l in &self.layers {
            f(ParamGroup::Network, l.weight.as_slice().expect("standard layout"));
            f(ParamGroup::Network, l.bias.as_slice().expect("standard layout"));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        for l in &mut self.layers {
            f(ParamGroup::Network, l.weight.as_slice_mut().expect("standard layout"));
            f(ParamGroup::Network, l.bias.as_slice_mut().expect("standard layout"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_saturates_exactly() {
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-1e300), 0.0);
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseStack::new(&[5, 7, 3], &[Activation::Relu, Activation::Sigmoid], &mut rng);
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut h = x.clone();
        for layer in &net.layers {
            let mut out = vec![0.0; layer.outputs()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut z = layer.bias[j];
                for (i, hv) in h.iter().enumerate() {
                    z += hv * layer.weight[(i, j)];
                }
                *o = layer.activation.apply(z);
            }
            h = out;
        }
        let got = net.forward_one(&x);
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_path_gradient_is_weight_product() {
        // 1 -> 1 -> 1 with one active ReLU: d out / d x = w1 * w2.
        let mut net = DenseStack {
            layers: vec![Dense::zeros(1, 1, Activation::Relu), Dense::zeros(1, 1, Activation::None)],
        };
        net.layers[0].weight[(0, 0)] = 1.5;
        net.layers[1].weight[(0, 0)] = -2.0;
        net.layers[0].bias[0] = 0.1;
        let tape = net.forward_tape(Array2::from_elem((1, 1), 0.7));
        let mut grads = net.zeros_like();
        let dx = net.backward(&tape, &Array2::from_elem((1, 1), 1.0), &mut grads);
        assert!((dx[(0, 0)] - (1.5 * -2.0)).abs() < 1e-15);
        // dW2 = hidden activation; dW1 = x * w2
        assert!((grads.layers[1].weight[(0, 0)] - (0.7 * 1.5 + 0.1)).abs() < 1e-15);
        assert!((grads.layers[0].weight[(0, 0)] - 0.7 * -2.0).abs() < 1e-15);
        assert!((grads.layers[0].bias[0] - -2.0).abs() < 1e-15);
    }

    #[test]
    fn batch_gradients_sum_over_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenseStack::new(&[3, 4, 2], &[Activation::Relu, Activation::None], &mut rng);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.61).cos());
        let d = Array2::from_shape_fn((6, 2), |(i, j)| ((i + 2 * j) as f64 * 0.3).sin());
        let tape = net.forward_tape(x.clone());
        let mut g_batch = net.zeros_like();
        net.backward(&tape, &d, &mut g_batch);
        let mut g_rows = net.zeros_like();
        for r in 0..6 {
            let t = net.forward_tape(x.row(r).to_owned().insert_axis(Axis(0)));
            net.backward(&t, &d.row(r).to_owned().insert_axis(Axis(0)), &mut g_rows);
        }
        let (a, b) = (g_batch.flatten(), g_rows.flatten());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseStack::new(&[3, 4, 2], &[Activation::Relu, Activation::Sigmoid], &mut rng);
        let tape = net.forward_tape(Array2::from_elem((2, 3), 0.4));
        let mut g = net.zeros_like();
        let dx = net.backward(&tape, &Array2::zeros((2, 2)), &mut g);
        assert_eq!(g.max_abs(), 0.0);
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_codes_round_trip() {
        for a in [Activation::Relu, Activation::Sigmoid, Activation::None] {
            assert_eq!(Activation::from_code(a.code()), Some(a));
        }
        assert_eq!(Activation::from_code(9), None);
    }
}
