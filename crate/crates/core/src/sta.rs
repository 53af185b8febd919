//! Super-twisting adaptation of the output layer.
//!
//! Only `W_L` and `b_L` move online; the hidden layers are a frozen basis
//! `φ(a_{L−1})`. With `e₁ = ŷ − y′` the continuous laws are
//!
//! ```text
//! ḃ_L  = ½(−k₁|e₁|^{1/2} sign(e₁) − Γ + ẑ₂)
//! Ẇ_L  = ḃ_L φᵀ(a_{L−1}) / ‖φ(a_{L−1})‖²
//! ẑ̇₂  = −k₂ sign(e₁)
//! ```
//!
//! where `Γ = W_L dφ(a_{L−1})/dt` is the drift of the basis along the input
//! derivative. Case II replaces `Γ` by `Γ̂`, the same recursion evaluated on an
//! estimated input derivative. Each law is integrated with one explicit Euler
//! step per call; `|·|^{1/2}` and `sign` act elementwise, with `sign(0) = 0`.

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Matrix, Vector};
use crate::mlp::{ForwardCache, Layer, Mlp};

/// Below this `‖φ(a_{L−1})‖²` the weight law is skipped for the step.
pub const DEAD_BASIS_FLOOR: f64 = 1e-8;

#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaGains {
    pub k1: f64,
    pub k2: f64,
}

impl StaGains {
    pub fn new(k1: f64, k2: f64) -> Result<Self> {
        if !(k1 > 0.0 && k2 > 0.0) || !k1.is_finite() || !k2.is_finite() {
            return Err(Error::InvalidArgument(format!("gains must be positive, got k1={k1}, k2={k2}")));
        }
        Ok(StaGains { k1, k2 })
    }

    pub fn preset() -> Self {
        StaGains { k1: 50.0, k2: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    /// Augmented integral term, units of `ẏ`.
    pub z2_hat: Vector,
    pub gains: StaGains,
}

impl AdaptState {
    pub fn new(output_dim: usize, gains: StaGains) -> Self {
        AdaptState {
            z2_hat: Vector::zeros(output_dim),
            gains,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    pub y_true: Vector,
    pub y_hat: Vector,
    pub e1: Vector,
    pub gamma: Vector,
    pub gamma_hat: Vector,
    /// `‖Γ − Γ̂‖₂`; zero when no reference derivative was supplied.
    pub p1_norm: f64,
    /// `γ·‖ẋ − x̂̇‖₂`; zero when no reference derivative was supplied.
    pub p1_bound: f64,
    pub phi_norm_sq: f64,
    /// `ẑ₂` at the start of the step.
    pub z2_hat: Vector,
    pub dead_basis: bool,
}

/// Continuous-time rates of the last-layer parameters and `ẑ₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerRates {
    pub bias: Vector,
    pub weight: Matrix,
    pub z2: Vector,
    pub dead_basis: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub last_layer: Layer,
    pub state: AdaptState,
    pub diagnostics: StepDiagnostics,
}

/// True input derivative and Lipschitz target used to score a Case II estimate.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationReference<'a> {
    pub x_dot: &'a Vector,
    pub gamma: f64,
}

fn check_cache(net: &Mlp, cache: &ForwardCache) -> Result<()> {
    let depth = net.depth();
    if cache.pre_activations.len() != depth || cache.activations.len() + 1 != depth {
        return Err(Error::shape(
            "forward cache",
            format!("{depth} layers"),
            format!("{} layers", cache.pre_activations.len()),
        ));
    }
    for (layer, a) in net.layers().iter().zip(&cache.pre_activations) {
        if layer.out_dim() != a.len() {
            return Err(Error::shape("forward cache layer", layer.out_dim(), a.len()));
        }
    }
    Ok(())
}

/// `Γ = W_L(φ′(a_{L−1}) ⊙ W_{L−1}(⋯ φ′(a₁) ⊙ W₁ ẋ))`.
pub fn gamma_term(net: &Mlp, cache: &ForwardCache, x_dot: &[f64]) -> Result<Vector> {
    check_cache(net, cache)?;
    if x_dot.len() != net.input_dim() {
        return Err(Error::shape("input derivative", net.input_dim(), x_dot.len()));
    }
    let act = net.activation();
    let mut v = Vector::from(x_dot.to_vec());
    let depth = net.depth();
    for (i, layer) in net.layers().iter().enumerate() {
        let mut next = Vector::zeros(layer.out_dim());
        layer.weight.matvec_into(&v, &mut next);
        if i + 1 < depth {
            for (n, &a) in next.iter_mut().zip(cache.pre_activations[i].iter()) {
                *n *= act.derivative(a);
            }
        }
        v = next;
    }
    Ok(v)
}

/// Rates of the super-twisting laws given the error, compensation term and state.
pub fn update_rates(phi: &[f64], e1: &[f64], compensation: &[f64], state: &AdaptState) -> Result<LastLayerRates> {
    let m = state.z2_hat.len();
    if e1.len() != m || compensation.len() != m {
        return Err(Error::shape("adaptation error", m, e1.len().max(compensation.len())));
    }
    let StaGains { k1, k2 } = state.gains;
    let bias: Vector = e1
        .iter()
        .zip(compensation)
        .zip(state.z2_hat.iter())
        .map(|((&e, &g), &z)| 0.5 * (-k1 * e.abs().sqrt() * sign(e) - g + z))
        .collect::<Vec<_>>()
        .into();
    let z2: Vector = e1.iter().map(|&e| -k2 * sign(e)).collect::<Vec<_>>().into();
    let phi_sq: f64 = phi.iter().map(|p| p * p).sum();
    let mut weight = Matrix::zeros(m, phi.len());
    let dead_basis = phi_sq < DEAD_BASIS_FLOOR;
    if !dead_basis {
        for i in 0..m {
            for (j, &p) in phi.iter().enumerate() {
                weight.set(i, j, bias[i] * p / phi_sq);
            }
        }
    }
    Ok(LastLayerRates {
        bias,
        weight,
        z2,
        dead_basis,
    })
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    net: &Mlp,
    cache: &ForwardCache,
    gamma: Vector,
    gamma_hat: Vector,
    y_true: &[f64],
    state: &AdaptState,
    dt: f64,
    t: f64,
    reference: (f64, f64),
) -> Result<StepOutcome> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let y_hat = cache.output().clone();
    if y_true.len() != y_hat.len() {
        return Err(Error::shape("target", y_hat.len(), y_true.len()));
    }
    let e1: Vector = y_hat.iter().zip(y_true).map(|(a, b)| a - b).collect::<Vec<_>>().into();
    let phi = cache.last_hidden();
    let rates = update_rates(phi, &e1, &gamma_hat, state)?;

    let current = net.last_layer();
    let mut weight = current.weight.clone();
    for (w, r) in weight.as_mut_slice().iter_mut().zip(rates.weight.as_slice()) {
        *w += dt * r;
    }
    let bias: Vector = current
        .bias
        .iter()
        .zip(rates.bias.iter())
        .map(|(b, r)| b + dt * r)
        .collect::<Vec<_>>()
        .into();
    let z2_hat: Vector = state
        .z2_hat
        .iter()
        .zip(rates.z2.iter())
        .map(|(z, r)| z + dt * r)
        .collect::<Vec<_>>()
        .into();

    let diagnostics = StepDiagnostics {
        t,
        y_true: Vector::from(y_true.to_vec()),
        y_hat,
        e1,
        gamma,
        gamma_hat,
        p1_norm: reference.0,
        p1_bound: reference.1,
        phi_norm_sq: phi.norm_sq(),
        z2_hat: state.z2_hat.clone(),
        dead_basis: rates.dead_basis,
    };
    Ok(StepOutcome {
        last_layer: Layer { weight, bias },
        state: AdaptState {
            z2_hat,
            gains: state.gains,
        },
        diagnostics,
    })
}

/// Case I: the input derivative is known.
pub fn case1_step(
    net: &Mlp,
    cache: &ForwardCache,
    x_dot: &[f64],
    y_true: &[f64],
    state: &AdaptState,
    dt: f64,
    t: f64,
) -> Result<StepOutcome> {
    let gamma = gamma_term(net, cache, x_dot)?;
    adapt(net, cache, gamma.clone(), gamma, y_true, state, dt, t, (0.0, 0.0))
}

/// Case II: the input derivative is estimated. With a reference derivative
/// the diagnostics carry `‖Γ − Γ̂‖₂` and its Lipschitz bound `γ‖ẋ − x̂̇‖₂`.
#[allow(clippy::too_many_arguments)]
pub fn case2_step(
    net: &Mlp,
    cache: &ForwardCache,
    x_dot_est: &[f64],
    y_true: &[f64],
    state: &AdaptState,
    dt: f64,
    t: f64,
    reference: Option<PerturbationReference<'_>>,
) -> Result<StepOutcome> {
    let gamma_hat = gamma_term(net, cache, x_dot_est)?;
    let (gamma, p1) = match reference {
        Some(r) => {
            let gamma = gamma_term(net, cache, r.x_dot)?;
            let p1_norm = l2_norm(&gamma.sub(&gamma_hat)?);
            let dx: Vec<f64> = r.x_dot.iter().zip(x_dot_est).map(|(a, b)| a - b).collect();
            (gamma, (p1_norm, r.gamma * l2_norm(&dx)))
        }
        None => (gamma_hat.clone(), (0.0, 0.0)),
    };
    adapt(net, cache, gamma, gamma_hat, y_true, state, dt, t, p1)
}

/// `p(x₁, x₂, t)`.
pub type Perturbation = Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Scalar super-twisting system with pluggable perturbations:
///
/// ```text
/// ẋ₁ = −k₁|x₁|^{1/2} sign(x₁) + x₂ + p₁(x, t)
/// ẋ₂ = −k₂ sign(x₁) + p₂(x, t)
/// ```
pub struct StaTestSystem {
    pub x1: f64,
    pub x2: f64,
    pub gains: StaGains,
    p1: Perturbation,
    p2: Perturbation,
}

impl StaTestSystem {
    pub fn new(x1: f64, x2: f64, gains: StaGains) -> Self {
        StaTestSystem {
            x1,
            x2,
            gains,
            p1: Box::new(|_, _, _| 0.0),
            p2: Box::new(|_, _, _| 0.0),
        }
    }

    pub fn with_p1(mut self, p: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.p1 = Box::new(p);
        self
    }

    pub fn with_p2(mut self, p: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.p2 = Box::new(p);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaTrajectory {
    pub t: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl StaTrajectory {
    /// Earliest time after which `|x₁| < band` holds for the rest of the run.
    pub fn settling_time(&self, band: f64) -> Option<f64> {
        let last_out = self.x1.iter().rposition(|x| x.abs() >= band);
        match last_out {
            None => self.t.first().copied(),
            Some(i) if i + 1 < self.t.len() => Some(self.t[i + 1]),
            Some(_) => None,
        }
    }

    /// `sup |x₁|` over samples with `t ≥ from`.
    pub fn sup_abs_x1(&self, from: f64) -> f64 {
        self.t
            .iter()
            .zip(&self.x1)
            .filter(|(t, _)| **t >= from)
            .map(|(_, x)| x.abs())
            .fold(0.0, f64::max)
    }

    /// `min |x₁|` over samples with `t ≥ from`.
    pub fn inf_abs_x1(&self, from: f64) -> f64 {
        self.t
            .iter()
            .zip(&self.x1)
            .filter(|(t, _)| **t >= from)
            .map(|(_, x)| x.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Explicit-Euler simulation of [`StaTestSystem`] over `[0, duration]`.
pub fn sta_reference_sim(sys: &StaTestSystem, dt: f64, duration: f64) -> Result<StaTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let steps = (duration / dt).round() as usize;
    let StaGains { k1, k2 } = sys.gains;
    let mut traj = StaTrajectory {
        t: Vec::with_capacity(steps + 1),
        x1: Vec::with_capacity(steps + 1),
        x2: Vec::with_capacity(steps + 1),
    };
    let (mut x1, mut x2) = (sys.x1, sys.x2);
    for k in 0..=steps {
        let t = k as f64 * dt;
        traj.t.push(t);
        traj.x1.push(x1);
        traj.x2.push(x2);
        let s = sign(x1);
        let d1 = -k1 * x1.abs().sqrt() * s + x2 + (sys.p1)(x1, x2, t);
        let d2 = -k2 * s + (sys.p2)(x1, x2, t);
        x1 += dt * d1;
        x2 += dt * d2;
        if !(x1.is_finite() && x2.is_finite()) {
            return Err(Error::NonFinite {
                context: "reference STA",
                step: k,
            });
        }
    }
    Ok(traj)
}
