use super::{flatten, Layer, Mlp};
use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net.layers().iter().map(|l| Layer::zeros(l.out_dim(), l.in_dim())).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn clear(&mut self) {
        for layer in &mut self.layers {
            layer.weight.as_mut_slice().fill(0.0);
            layer.bias.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradients {
    pub loss: f64,
    pub gradients: Gradients,
}

/// Gradient of `½·mean‖f(x) − y‖²` over the batch.
pub fn backprop_mse(net: &Mlp, batch_x: &[Vector], batch_y: &[Vector]) -> Result<LossAndGradients> {
    check_batch(net, batch_x, batch_y)?;
    let mut ws = Workspace::new(net);
    let mut gradients = Gradients::zeros_like(net);
    let scale = 1.0 / batch_x.len() as f64;
    let mut loss = 0.0;
    for (x, y) in batch_x.iter().zip(batch_y) {
        loss += ws.accumulate(net, x, y, scale, &mut gradients);
    }
    Ok(LossAndGradients { loss, gradients })
}

/// `½·mean‖f(x) − y‖²` without gradients.
pub fn mse_loss(net: &Mlp, batch_x: &[Vector], batch_y: &[Vector]) -> Result<f64> {
    check_batch(net, batch_x, batch_y)?;
    let mut ws = Workspace::new(net);
    let scale = 1.0 / batch_x.len() as f64;
    Ok(batch_x
        .iter()
        .zip(batch_y)
        .map(|(x, y)| ws.loss(net, x, y, scale))
        .sum())
}

fn check_batch(net: &Mlp, batch_x: &[Vector], batch_y: &[Vector]) -> Result<()> {
    if batch_x.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch_x.len() != batch_y.len() {
        return Err(Error::shape("batch size", batch_x.len(), batch_y.len()));
    }
    for (x, y) in batch_x.iter().zip(batch_y) {
        if x.len() != net.input_dim() {
            return Err(Error::shape("batch input", net.input_dim(), x.len()));
        }
        if y.len() != net.output_dim() {
            return Err(Error::shape("batch label", net.output_dim(), y.len()));
        }
    }
    Ok(())
}

/// Preallocated buffers for per-sample forward/backward passes.
pub(crate) struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn new(net: &Mlp) -> Self {
        let widths: Vec<usize> = net.layers().iter().map(Layer::out_dim).collect();
        Workspace {
            pre: widths.iter().map(|&w| vec![0.0; w]).collect(),
            post: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    fn run_forward(&mut self, net: &Mlp, x: &[f64]) {
        let act = net.activation();
        let depth = net.depth();
        for (i, layer) in net.layers().iter().enumerate() {
            let a = &mut self.pre[i];
            if i == 0 {
                layer.weight.matvec_into(x, a);
            } else {
                layer.weight.matvec_into(&self.post[i - 1], a);
            }
            for (ai, bi) in a.iter_mut().zip(layer.bias.iter()) {
                *ai += bi;
            }
            let post = &mut self.post[i];
            if i + 1 < depth {
                for (p, &ai) in post.iter_mut().zip(a.iter()) {
                    *p = act.apply(ai);
                }
            } else {
                post.copy_from_slice(a);
            }
        }
    }

    pub(crate) fn loss(&mut self, net: &Mlp, x: &[f64], y: &[f64], scale: f64) -> f64 {
        self.run_forward(net, x);
        let out = &self.post[net.depth() - 1];
        0.5 * scale * out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>()
    }

    /// Adds `scale · ∂(½‖f(x) − y‖²)/∂θ` into `grads` and returns the scaled loss.
    pub(crate) fn accumulate(&mut self, net: &Mlp, x: &[f64], y: &[f64], scale: f64, grads: &mut Gradients) -> f64 {
        self.run_forward(net, x);
        let depth = net.depth();
        let act = net.activation();
        let mut loss = 0.0;
        {
            let out = &self.post[depth - 1];
            let d = &mut self.delta[depth - 1];
            for ((di, &o), &t) in d.iter_mut().zip(out.iter()).zip(y) {
                let r = o - t;
                loss += r * r;
                *di = scale * r;
            }
        }
        for l in (0..depth).rev() {
            let input: &[f64] = if l == 0 { x } else { &self.post[l - 1] };
            let g = &mut grads.layers[l];
            let cols = g.weight.cols();
            let d = &self.delta[l];
            for (i, &di) in d.iter().enumerate() {
                g.bias[i] += di;
                let row = &mut g.weight.as_mut_slice()[i * cols..(i + 1) * cols];
                for (w, &xj) in row.iter_mut().zip(input) {
                    *w += di * xj;
                }
            }
            if l > 0 {
                let (lower, upper) = self.delta.split_at_mut(l);
                let prev = &mut lower[l - 1];
                net.layers()[l].weight.transpose_matvec_into(&upper[0], prev);
                for (p, &a) in prev.iter_mut().zip(&self.pre[l - 1]) {
                    *p *= act.derivative(a);
                }
            }
        }
        0.5 * scale * loss
    }
}
