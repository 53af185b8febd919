use super::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators, laid out like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let n = net.num_params();
        AdamState {
            config,
            step: 0,
            first: vec![0.0; n],
            second: vec![0.0; n],
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }
}

/// Moments of parameters with persistently zero gradient (dead ReLU units)
/// decay into the subnormal range, where `β·x` rounds back to `x` and every
/// later step pays for slow subnormal arithmetic.
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if state.first.len() != net.num_params() || grads.layers.len() != net.depth() {
        return Err(Error::shape("adam state", net.num_params(), state.first.len()));
    }
    for (layer, g) in net.layers().iter().zip(&grads.layers) {
        if layer.weight.shape() != g.weight.shape() || layer.bias.len() != g.bias.len() {
            return Err(Error::shape(
                "adam gradient",
                format!("{:?}", layer.weight.shape()),
                format!("{:?}", g.weight.shape()),
            ));
        }
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    state.beta1_pow *= beta1;
    state.beta2_pow *= beta2;
    let c1 = 1.0 / (1.0 - state.beta1_pow);
    let c2 = 1.0 / (1.0 - state.beta2_pow);

    let mut k = 0;
    let mut update = |p: &mut [f64], g: &[f64]| {
        for (pi, &gi) in p.iter_mut().zip(g) {
            let m = &mut state.first[k];
            let v = &mut state.second[k];
            *m = flush_subnormal(beta1 * *m + (1.0 - beta1) * gi);
            *v = flush_subnormal(beta2 * *v + (1.0 - beta2) * gi * gi);
            *pi -= learning_rate * (*m * c1) / ((*v * c2).sqrt() + epsilon);
            k += 1;
        }
    };
    for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
        update(layer.weight.as_mut_slice(), g.weight.as_slice());
        update(&mut layer.bias, &g.bias);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Matrix, Vector};
    use crate::mlp::Layer;

    fn scalar_net(p: f64) -> Mlp {
        Mlp::new(vec![Layer::new(Matrix::from_vec(1, 1, vec![p]).unwrap(), Vector::zeros(1)).unwrap()]).unwrap()
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            layers: vec![Layer::new(Matrix::from_vec(1, 1, vec![g]).unwrap(), Vector::zeros(1)).unwrap()],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = Mlp::he_init(&[2, 4, 1], 3).unwrap();
        let before = net.params_flat();
        let mut state = AdamState::new(&net, AdamConfig::default());
        let zero = Gradients::zeros_like(&net);
        adam_step(&mut net, &zero, &mut state).unwrap();
        assert_eq!(net.params_flat(), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn decaying_moments_never_go_subnormal() {
        let mut net = scalar_net(1.0);
        let mut state = AdamState::new(&net, AdamConfig::default());
        adam_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        for _ in 0..800_000 {
            adam_step(&mut net, &scalar_grad(0.0), &mut state).unwrap();
            let v = state.second_moment()[0];
            assert!(v == 0.0 || v >= f64::MIN_POSITIVE);
        }
        assert_eq!(state.second_moment()[0], 0.0);
        assert_eq!(state.first_moment()[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = scalar_net(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(&net, cfg);
        adam_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((net.params_flat()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn recursion_replay() {
        // Scalar replay of the moment recursion for a varying gradient sequence.
        let cfg = AdamConfig::default();
        let grads = [0.5, -1.5, 2.0, 0.25];
        let mut net = scalar_net(0.3);
        let mut state = AdamState::new(&net, cfg);
        let (mut p, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&mut net, &scalar_grad(g), &mut state).unwrap();
            let t = t as i32 + 1;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            assert!((net.params_flat()[0] - p).abs() < 1e-14, "step {t}");
        }
        // two identical steps: the second moves by the same bias-corrected amount
        let mut a = scalar_net(0.0);
        let mut sa = AdamState::new(&a, cfg);
        adam_step(&mut a, &scalar_grad(1.0), &mut sa).unwrap();
        let after_one = a.params_flat()[0];
        adam_step(&mut a, &scalar_grad(1.0), &mut sa).unwrap();
        let after_two = a.params_flat()[0];
        assert!(((after_two - after_one) - after_one).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut net = Mlp::he_init(&[2, 4, 1], 3).unwrap();
        let other = Mlp::he_init(&[2, 3, 1], 3).unwrap();
        let mut state = AdamState::new(&net, AdamConfig::default());
        assert!(adam_step(&mut net, &Gradients::zeros_like(&other), &mut state).is_err());
    }
}
