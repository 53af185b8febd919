//! Fully connected feedforward ReLU network.
//!
//! `f(x) = W_L φ(a_{L−1}) + b_L` with `a_i = W_i φ(a_{i−1}) + b_i`,
//! `φ(a_0) = x` and ReLU on every hidden layer. The output layer is affine.

mod adam;
mod backprop;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backprop::{backprop_mse, mse_loss, Gradients, LossAndGradients};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

pub(crate) use backprop::Workspace;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::seeds::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative with the `a ≥ 0 ⇒ 1` convention at the kink.
    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn relu(a: &[f64]) -> Vector {
    a.iter().map(|&x| Activation::Relu.apply(x)).collect::<Vec<_>>().into()
}

pub fn relu_derivative(a: &[f64]) -> Vector {
    a.iter().map(|&x| Activation::Relu.derivative(x)).collect::<Vec<_>>().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::shape("layer bias", weight.rows(), bias.len()));
        }
        Ok(Layer { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: Vector::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// Intermediates of one forward pass.
///
/// `pre_activations[i]` is `a_{i+1}` (one entry per layer, the last being the
/// network output) and `activations[i]` is `φ(a_{i+1})` for hidden layers only.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub input: Vector,
    pub pre_activations: Vec<Vector>,
    pub activations: Vec<Vector>,
}

impl ForwardCache {
    /// `φ(a_{L−1})`, the basis the output layer acts on. For a single affine
    /// layer this is the input itself.
    pub fn last_hidden(&self) -> &Vector {
        self.activations.last().unwrap_or(&self.input)
    }

    pub fn output(&self) -> &Vector {
        self.pre_activations.last().expect("cache of an empty network")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::shape(
                    "layer chain",
                    format!("layer {} input {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        for layer in &layers {
            if layer.weight.rows() != layer.bias.len() {
                return Err(Error::shape("layer bias", layer.weight.rows(), layer.bias.len()));
            }
        }
        Ok(Mlp {
            layers,
            activation: Activation::Relu,
        })
    }

    /// He-normal initialization: `W ~ N(0, 2/fan_in)`, zero biases.
    ///
    /// `shape` lists the input dimension followed by each layer's width, e.g.
    /// `[2, 8, 16, 8, 1]`.
    pub fn he_init(shape: &[usize], seed: u64) -> Result<Self> {
        let mut rng = seeds::stream(seed, Stream::Init);
        Self::he_init_with(shape, &mut rng)
    }

    pub fn he_init_with<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        if shape.len() < 2 || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid network shape {shape:?}")));
        }
        let layers = shape
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: Vector::zeros(fan_out),
                }
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[n, width_1, …, m]`.
    pub fn shape(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn last_layer(&self) -> &Layer {
        &self.layers[self.layers.len() - 1]
    }

    pub fn set_last_layer(&mut self, layer: Layer) -> Result<()> {
        let current = self.last_layer();
        if layer.weight.shape() != current.weight.shape() || layer.bias.len() != current.bias.len() {
            return Err(Error::shape(
                "last layer",
                format!("{:?}", current.weight.shape()),
                format!("{:?}", layer.weight.shape()),
            ));
        }
        let last = self.layers.len() - 1;
        self.layers[last] = layer;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, ForwardCache)> {
        self.check_input(x)?;
        let depth = self.layers.len();
        let mut pre_activations = Vec::with_capacity(depth);
        let mut activations: Vec<Vector> = Vec::with_capacity(depth - 1);
        for (i, layer) in self.layers.iter().enumerate() {
            let input: &[f64] = if i == 0 { x } else { &activations[i - 1] };
            let mut a = Vector::zeros(layer.out_dim());
            layer.weight.matvec_into(input, &mut a);
            a.iter_mut().zip(layer.bias.iter()).for_each(|(ai, bi)| *ai += bi);
            if i + 1 < depth {
                activations.push(a.iter().map(|&v| self.activation.apply(v)).collect::<Vec<_>>().into());
            }
            pre_activations.push(a);
        }
        let output = pre_activations[depth - 1].clone();
        Ok((
            output,
            ForwardCache {
                input: Vector::from(x.to_vec()),
                pre_activations,
                activations,
            },
        ))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vector> {
        self.forward(x).map(|(y, _)| y)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Parameters flattened layer by layer: weight row-major, then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape("flat parameters", self.num_params(), params.len()));
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (w, tail) = rest.split_at(layer.weight.as_slice().len());
            layer.weight.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// Human-readable name of flat parameter `index`, e.g. `W2[3,1]`.
    pub fn param_name(&self, index: usize) -> String {
        let mut offset = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let nw = layer.weight.as_slice().len();
            if index < offset + nw {
                let k = index - offset;
                return format!("W{}[{},{}]", l + 1, k / layer.in_dim(), k % layer.in_dim());
            }
            offset += nw;
            if index < offset + layer.bias.len() {
                return format!("b{}[{}]", l + 1, index - offset);
            }
            offset += layer.bias.len();
        }
        format!("<out of range {index}>")
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

pub(crate) fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend_from_slice(layer.weight.as_slice());
        out.extend_from_slice(&layer.bias);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two() -> Mlp {
        let l1 = Layer::new(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap(),
            Vector::from([0.5, 3.0]),
        )
        .unwrap();
        let l2 = Layer::new(Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap(), Vector::from([0.25])).unwrap();
        Mlp::new(vec![l1, l2]).unwrap()
    }

    #[test]
    fn relu_and_derivative_convention() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), Vector::from([0.0, 0.0, 2.0]));
        assert_eq!(relu_derivative(&[-1.0, 0.0, 2.0]), Vector::from([0.0, 1.0, 1.0]));
        assert_eq!(relu_derivative(&[-3.0, -0.1]), Vector::from([0.0, 0.0]));
    }

    #[test]
    fn zero_weights_collapse_to_output_bias() {
        let mut net = Mlp::he_init(&[2, 4, 3], 1).unwrap();
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            layer.weight.scale_in_place(0.0);
            layer.bias.iter_mut().for_each(|b| *b = i as f64 + 0.5);
        }
        let y = net.predict(&[7.0, -3.0]).unwrap();
        assert_eq!(y, Vector::from([1.5, 1.5, 1.5]));
    }

    #[test]
    fn single_affine_layer() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        let net = Mlp::new(vec![Layer::new(w, Vector::from([1.0, -1.0])).unwrap()]).unwrap();
        let (y, cache) = net.forward(&[2.0, 1.0]).unwrap();
        assert_eq!(y, Vector::from([1.0, 5.5]));
        assert!(cache.activations.is_empty());
        assert_eq!(cache.last_hidden(), &Vector::from([2.0, 1.0]));
    }

    #[test]
    fn two_layer_hand_example() {
        // x = (1, 0.5): a1 = (1 + 1 + 0.5, 0.5 − 0.5 + 3) = (2.5, 3.0), both positive
        // y = 2·2.5 − 3.0 + 0.25 = 2.25
        let (y, cache) = two_by_two().forward(&[1.0, 0.5]).unwrap();
        assert_eq!(cache.pre_activations[0], Vector::from([2.5, 3.0]));
        assert_eq!(cache.activations[0], Vector::from([2.5, 3.0]));
        assert_eq!(y, Vector::from([2.25]));
    }

    #[test]
    fn forward_rejects_wrong_input() {
        assert!(two_by_two().forward(&[1.0]).is_err());
    }

    #[test]
    fn chain_mismatch_rejected() {
        let a = Layer::zeros(3, 2);
        let b = Layer::zeros(1, 4);
        assert!(Mlp::new(vec![a, b]).is_err());
        assert!(Mlp::new(vec![]).is_err());
    }

    #[test]
    fn he_init_determinism_and_variance() {
        let a = Mlp::he_init(&[2, 8, 16, 8, 1], 42).unwrap();
        let b = Mlp::he_init(&[2, 8, 16, 8, 1], 42).unwrap();
        let c = Mlp::he_init(&[2, 8, 16, 8, 1], 43).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_ne!(a.params_flat(), c.params_flat());
        assert_eq!(a.shape(), vec![2, 8, 16, 8, 1]);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));

        let wide = Mlp::he_init(&[10, 100], 5).unwrap();
        let w = wide.layers()[0].weight.as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var - 0.2).abs() < 0.2 * 0.2, "variance {var}");
    }

    #[test]
    fn flat_params_round_trip_and_names() {
        let mut net = two_by_two();
        let p = net.params_flat();
        assert_eq!(p.len(), net.num_params());
        let shifted: Vec<f64> = p.iter().map(|x| x + 1.0).collect();
        net.set_params_flat(&shifted).unwrap();
        assert_eq!(net.params_flat(), shifted);
        assert_eq!(net.param_name(0), "W1[0,0]");
        assert_eq!(net.param_name(3), "W1[1,1]");
        assert_eq!(net.param_name(4), "b1[0]");
        assert_eq!(net.param_name(6), "W2[0,0]");
        assert_eq!(net.param_name(8), "b2[0]");
    }

    proptest! {
        // Inputs sharing a ReLU mask see the same affine map.
        #[test]
        fn piecewise_affine_within_mask(seed in 0u64..200, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0,
                                        d0 in -1.0f64..1.0, d1 in -1.0f64..1.0) {
            let net = Mlp::he_init(&[2, 6, 5, 1], seed).unwrap();
            let h = 1e-3;
            let p = [x0, x1];
            let q = [x0 + h * d0, x1 + h * d1];
            let r = [x0 + 2.0 * h * d0, x1 + 2.0 * h * d1];
            let masks = |x: &[f64]| {
                let (_, c) = net.forward(x).unwrap();
                c.pre_activations[..c.pre_activations.len() - 1]
                    .iter()
                    .map(|a| relu_derivative(a))
                    .collect::<Vec<_>>()
            };
            prop_assume!(masks(&p) == masks(&q) && masks(&q) == masks(&r));
            let fp = net.predict(&p).unwrap()[0];
            let fq = net.predict(&q).unwrap()[0];
            let fr = net.predict(&r).unwrap()[0];
            // equal increments along a line in one linear region
            prop_assert!(((fq - fp) - (fr - fq)).abs() <= 1e-12 * (1.0 + fp.abs() + fr.abs()));
        }
    }
}
