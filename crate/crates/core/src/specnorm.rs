//! Spectral normalization and Lipschitz bounds for ReLU networks.
//!
//! With 1-Lipschitz activations the network's Lipschitz constant is bounded
//! by `∏ σ(W_i)`. Normalization caps each layer at `γ^{1/L}` so the product
//! is at most `γ`. Biases are never touched.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, DEFAULT_SIGMA_MAX_ITERS, DEFAULT_SIGMA_TOL};
use crate::mlp::Mlp;
use crate::seeds::{self, Stream};

/// Guard against re-firing on a layer that sits exactly at the cap.
const RESCALE_GUARD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecNormConfig {
    pub gamma: f64,
    pub enabled: bool,
}

impl SpecNormConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive and finite, got {gamma}")));
        }
        Ok(SpecNormConfig { gamma, enabled: true })
    }

    pub fn disabled() -> Self {
        SpecNormConfig {
            gamma: f64::INFINITY,
            enabled: false,
        }
    }

    /// Per-layer cap `γ^{1/L}`.
    pub fn layer_cap(&self, depth: usize) -> f64 {
        self.gamma.powf(1.0 / depth as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecNormOutcome {
    /// Which layers were rescaled.
    pub rescaled: Vec<bool>,
    /// Per-layer `σ_i` after the pass.
    pub sigmas: Vec<f64>,
    /// False if any singular-value estimate hit the iteration cap.
    pub converged: bool,
}

/// One pass of the per-layer rescale `W_i ← (W_i/σ_i)·γ^{1/L}` for every layer
/// whose `σ_i` exceeds the cap.
pub fn spectral_normalize(net: &mut Mlp, cfg: &SpecNormConfig) -> Result<SpecNormOutcome> {
    if !cfg.enabled {
        let report = lipschitz_bound(net)?;
        return Ok(SpecNormOutcome {
            rescaled: vec![false; net.depth()],
            sigmas: report.per_layer_sigmas,
            converged: true,
        });
    }
    if !(cfg.gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", cfg.gamma)));
    }
    let cap = cfg.layer_cap(net.depth());
    let mut rescaled = Vec::with_capacity(net.depth());
    let mut sigmas = Vec::with_capacity(net.depth());
    let mut converged = true;
    for layer in net.layers_mut() {
        let sigma = layer.weight.max_singular_value(DEFAULT_SIGMA_TOL, DEFAULT_SIGMA_MAX_ITERS)?;
        converged &= sigma.converged;
        let fire = sigma.value > cap * (1.0 + RESCALE_GUARD);
        if fire {
            layer.weight.scale_in_place(cap / sigma.value);
            flush_subnormals(layer.weight.as_mut_slice());
        }
        rescaled.push(fire);
        sigmas.push(if fire { cap } else { sigma.value });
    }
    Ok(SpecNormOutcome {
        rescaled,
        sigmas,
        converged,
    })
}

/// Entries with zero gradient shrink geometrically under repeated rescaling
/// and would end up as subnormals, which make every later epoch slow. Zeroing
/// them moves `σ` by less than `f64::MIN_POSITIVE`.
fn flush_subnormals(w: &mut [f64]) {
    for x in w.iter_mut().filter(|x| x.abs() < f64::MIN_POSITIVE) {
        *x = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub per_layer_sigmas: Vec<f64>,
    pub product_bound: f64,
    /// `γ` when the network was trained under spectral normalization,
    /// otherwise the product bound.
    pub certified_gamma: f64,
}

impl LipschitzReport {
    pub fn certified_by(mut self, cfg: &SpecNormConfig) -> Self {
        if cfg.enabled {
            self.certified_gamma = cfg.gamma;
        }
        self
    }
}

pub fn lipschitz_bound(net: &Mlp) -> Result<LipschitzReport> {
    let per_layer_sigmas = net
        .layers()
        .iter()
        .map(|l| l.weight.spectral_norm())
        .collect::<Result<Vec<_>>>()?;
    let product_bound = per_layer_sigmas.iter().product();
    Ok(LipschitzReport {
        per_layer_sigmas,
        product_bound,
        certified_gamma: product_bound,
    })
}

/// Axis-aligned input region for probing.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::shape("domain box", lower.len(), upper.len()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("domain box needs lower ≤ upper".into()));
        }
        Ok(DomainBox { lower, upper })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if l == u { l } else { rng.random_range(l..u) })
            .collect()
    }
}

/// Largest `‖f(z₁) − f(z₂)‖₂ / ‖z₁ − z₂‖₂` over `n_pairs` seeded random pairs.
pub fn empirical_lipschitz_probe(net: &Mlp, domain: &DomainBox, n_pairs: usize, seed: u64) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("probe needs at least one pair".into()));
    }
    if domain.lower.len() != net.input_dim() {
        return Err(Error::shape("probe domain", net.input_dim(), domain.lower.len()));
    }
    let mut rng = seeds::stream(seed, Stream::Probe);
    let mut worst: f64 = 0.0;
    for _ in 0..n_pairs {
        let a = domain.sample(&mut rng);
        let b = domain.sample(&mut rng);
        let dx: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let denom = l2_norm(&dx);
        if denom == 0.0 {
            continue;
        }
        let fa = net.predict(&a)?;
        let fb = net.predict(&b)?;
        let num = l2_norm(&fa.sub(&fb)?);
        worst = worst.max(num / denom);
    }
    Ok(worst)
}
