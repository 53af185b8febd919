//! Invariant suite behind `lastlayer verify`.
//!
//! Every check pairs the production routine with an independent oracle from
//! [`crate::oracle`] and reports the measured error next to its tolerance.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{integrate_rk4, vdp_derivative, VdpParams, VdpState};
use crate::error::Result;
use crate::linalg::{Matrix, Vector, DEFAULT_SIGMA_MAX_ITERS, DEFAULT_SIGMA_TOL};
use crate::mlp::{backprop_mse, mse_loss, relu_derivative, LossAndGradients, Mlp};
use crate::oracle::{central_derivative, central_gradient, jacobi_max_singular_value};
use crate::seeds::{self, Stream};
use crate::specnorm::{spectral_normalize, SpecNormConfig};
use crate::sta::{gamma_term, sign, sta_reference_sim, StaGains, StaTestSystem};

pub type GradientFn = fn(&Mlp, &[Vector], &[Vector]) -> Result<LossAndGradients>;

pub const GRADIENT_H: f64 = 1e-5;
pub const GRADIENT_REL: f64 = 1e-5;
pub const GRADIENT_ABS: f64 = 1e-8;
pub const GAMMA_H: f64 = 1e-6;
pub const GAMMA_REL: f64 = 1e-4;
pub const GAMMA_ABS: f64 = 1e-9;
pub const SIGMA_REL: f64 = 1e-8;
pub const RK4_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub limit: f64,
    /// Human-readable tolerance, echoed in the report.
    pub tolerance: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<26} measured {:<12.3e} tolerance {:<28} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

fn relative_error(a: f64, b: f64, abs_floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// The network used by the gradient and Γ checks: seeded He init with small
/// parameter jitter so biases are nonzero.
pub fn probe_network(seed: u64) -> Mlp {
    let mut net = Mlp::he_init(&[2, 8, 16, 8, 1], seed).expect("fixed shape");
    let mut rng = seeds::stream(seed, Stream::Test);
    let p: Vec<f64> = net.params_flat().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
    net.set_params_flat(&p).expect("same length");
    net
}

/// Backprop against central differences of the batch loss, every parameter.
pub fn gradient_check(gradient: GradientFn, seed: u64) -> Result<CheckResult> {
    let net = probe_network(seed);
    let mut rng = seeds::stream(seed.wrapping_add(1), Stream::Test);
    let xs: Vec<Vector> = (0..8).map(|_| Vector::from([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])).collect();
    let ys: Vec<Vector> = (0..8).map(|_| Vector::from([rng.random_range(-2.0..2.0)])).collect();
    let analytic = gradient(&net, &xs, &ys)?.gradients.flat();
    let params = net.params_flat();
    let numeric = central_gradient(
        |theta| {
            let mut probe = net.clone();
            probe.set_params_flat(theta).expect("same length");
            mse_loss(&probe, &xs, &ys).expect("valid batch")
        },
        &params,
        GRADIENT_H,
    );
    let mut worst = (0.0, 0usize);
    let mut max_diff = (0.0, 0usize);
    let mut failed = Vec::new();
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if (a - n).abs() > max_diff.0 {
            max_diff = ((a - n).abs(), i);
        }
        let err = relative_error(*a, *n, GRADIENT_ABS);
        if err > worst.0 {
            worst = (err, i);
        }
        if err > GRADIENT_REL {
            failed.push(i);
        }
    }
    let (err, i) = worst;
    let detail = if failed.is_empty() {
        format!(
            "{} params, max |backprop - fd| {:.2e} at {}",
            params.len(),
            max_diff.0,
            net.param_name(max_diff.1)
        )
    } else {
        let names: Vec<String> = failed.iter().take(5).map(|&j| format!("#{j} {}", net.param_name(j))).collect();
        format!(
            "{} of {} params off, first: {}; worst #{i} {} backprop {} vs fd {}",
            failed.len(),
            params.len(),
            names.join(", "),
            net.param_name(i),
            analytic[i],
            numeric[i]
        )
    };
    Ok(CheckResult {
        name: "backprop vs finite diff",
        measured: err,
        limit: GRADIENT_REL,
        tolerance: format!("rel {GRADIENT_REL:e} / abs {GRADIENT_ABS:e}"),
        passed: failed.is_empty(),
        detail,
    })
}

/// Γ against the central difference of `W_L φ(a_{L−1})` along a smooth curve,
/// skipping points where an activation mask flips inside `[t − h, t + h]`.
pub fn gamma_check(seed: u64) -> Result<CheckResult> {
    let net = probe_network(seed);
    let path = |t: f64| [2.0 * (0.7 * t).cos(), 1.5 * (1.3 * t).sin()];
    let path_dot = |t: f64| [-1.4 * (0.7 * t).sin(), 1.95 * (1.3 * t).cos()];
    let masks = |t: f64| -> Result<Vec<Vector>> {
        let (_, c) = net.forward(&path(t))?;
        Ok(c.pre_activations.iter().map(|a| relu_derivative(a)).collect())
    };
    let w_last = &net.last_layer().weight;
    let basis_out = |t: f64| {
        let (_, c) = net.forward(&path(t)).expect("fixed input size");
        w_last.matvec(c.last_hidden()).expect("chained").into_vec()
    };
    let (mut worst, mut at, mut checked, mut total) = (0.0f64, 0.0, 0usize, 0usize);
    for k in 0..400 {
        let t = k as f64 * 0.025;
        total += 1;
        if masks(t - GAMMA_H)? != masks(t + GAMMA_H)? {
            continue;
        }
        let (_, cache) = net.forward(&path(t))?;
        let g = gamma_term(&net, &cache, &path_dot(t))?;
        let fd = central_derivative(basis_out, t, GAMMA_H);
        for (a, b) in g.iter().zip(&fd) {
            let err = relative_error(*a, *b, GAMMA_ABS);
            if err > worst {
                worst = err;
                at = t;
            }
        }
        checked += 1;
    }
    let enough = checked * 2 >= total;
    Ok(CheckResult {
        name: "gamma term vs finite diff",
        measured: worst,
        limit: GAMMA_REL,
        tolerance: format!("rel {GAMMA_REL:e}, h {GAMMA_H:e}"),
        passed: worst <= GAMMA_REL && enough,
        detail: format!("{checked}/{total} points off mask boundaries, worst at t={at}"),
    })
}

/// Power iteration against Jacobi eigenvalues of `MᵀM` on random matrices.
pub fn sigma_check(seed: u64) -> Result<CheckResult> {
    let mut rng = seeds::stream(seed, Stream::Test);
    let shapes = [(8, 2), (16, 8), (8, 16), (1, 8), (16, 16), (3, 3)];
    let mut worst = 0.0f64;
    let mut converged = true;
    let mut count = 0;
    for _ in 0..5 {
        for &(r, c) in &shapes {
            let data: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
            let m = Matrix::from_vec(r, c, data)?;
            let s = m.max_singular_value(DEFAULT_SIGMA_TOL, DEFAULT_SIGMA_MAX_ITERS)?;
            converged &= s.converged;
            worst = worst.max(relative_error(s.value, jacobi_max_singular_value(&m), 0.0));
            count += 1;
        }
    }
    Ok(CheckResult {
        name: "sigma vs jacobi",
        measured: worst,
        limit: SIGMA_REL,
        tolerance: format!("rel {SIGMA_REL:e}"),
        passed: worst <= SIGMA_REL && converged,
        detail: format!("{count} random matrices"),
    })
}

/// Normalized product of Jacobi singular values stays within `γ`.
pub fn specnorm_check(seed: u64) -> Result<CheckResult> {
    let mut net = Mlp::he_init(&[2, 8, 16, 8, 1], seed)?;
    let scaled: Vec<f64> = net.params_flat().iter().map(|v| 5.0 * v).collect();
    net.set_params_flat(&scaled)?;
    let gamma = 32.0;
    spectral_normalize(&mut net, &SpecNormConfig::new(gamma)?)?;
    let product: f64 = net.layers().iter().map(|l| jacobi_max_singular_value(&l.weight)).product();
    let limit = gamma * (1.0 + 1e-8);
    Ok(CheckResult {
        name: "spectral normalization",
        measured: product,
        limit,
        tolerance: "prod sigma <= 32(1+1e-8)".into(),
        passed: product <= limit,
        detail: "4 layers scaled x5".into(),
    })
}

/// One RK4 step against Richardson-extrapolated fine-step Euler.
pub fn rk4_check() -> CheckResult {
    let p = VdpParams { epsilon: 1.0 };
    let s0 = VdpState::new(2.0, 0.0);
    let dt = 0.01;
    let euler = |n: usize| {
        let h = dt / n as f64;
        let mut s = s0;
        for _ in 0..n {
            let (dz, dth) = vdp_derivative(s, p);
            s = VdpState::new(s.z + h * dz, s.theta + h * dth);
        }
        s
    };
    let (a, b) = (euler(1000), euler(2000));
    let rich = [2.0 * b.z - a.z, 2.0 * b.theta - a.theta];
    let rk = integrate_rk4(s0, p, dt);
    let err = (rk.z - rich[0]).abs().max((rk.theta - rich[1]).abs());
    CheckResult {
        name: "rk4 step vs fine euler",
        measured: err,
        limit: RK4_TOL,
        tolerance: format!("abs {RK4_TOL:e}"),
        passed: err <= RK4_TOL,
        detail: "Richardson on 1000/2000 substeps".into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaReferenceFindings {
    /// Time to enter and stay in `|x₁| < 1e-6`, unperturbed.
    pub unperturbed_settling: Option<f64>,
    /// Time to enter and stay in `|x₁| < 1e-3` under `p₂ = 0.5 sign(sin t)`.
    pub matched_settling: Option<f64>,
    /// `sup |x₁|` over 100 s under constant `p₁ = 0.1`.
    pub constant_p1_sup: f64,
    /// Whether the constant-`p₁` run still enters and stays in `|x₁| < 1e-6`.
    pub constant_p1_settling: Option<f64>,
}

pub const STA_DT: f64 = 1e-5;

pub fn sta_reference_findings() -> Result<StaReferenceFindings> {
    let gains = StaGains::preset();
    let unperturbed = sta_reference_sim(&StaTestSystem::new(1.0, 0.0, gains), STA_DT, 2.0)?;
    let matched = StaTestSystem::new(1.0, 0.0, gains).with_p2(|_, _, t| 0.5 * sign(t.sin()));
    let matched = sta_reference_sim(&matched, STA_DT, 10.0)?;
    let constant = StaTestSystem::new(1.0, 0.0, gains).with_p1(|_, _, _| 0.1);
    let constant = sta_reference_sim(&constant, STA_DT, 100.0)?;
    Ok(StaReferenceFindings {
        unperturbed_settling: unperturbed.settling_time(1e-6),
        matched_settling: matched.settling_time(1e-3),
        constant_p1_sup: constant.sup_abs_x1(0.0),
        constant_p1_settling: constant.settling_time(1e-6),
    })
}

pub fn sta_checks() -> Result<Vec<CheckResult>> {
    let f = sta_reference_findings()?;
    let time = |t: Option<f64>| t.unwrap_or(f64::INFINITY);
    Ok(vec![
        CheckResult {
            name: "sta unperturbed",
            measured: time(f.unperturbed_settling),
            limit: 2.0,
            tolerance: "|x1| < 1e-6 within 2 s".into(),
            passed: f.unperturbed_settling.is_some(),
            detail: format!("settling time, dt {STA_DT:e}"),
        },
        CheckResult {
            name: "sta matched perturbation",
            measured: time(f.matched_settling),
            limit: 10.0,
            tolerance: "|x1| < 1e-3 within 10 s".into(),
            passed: f.matched_settling.is_some(),
            detail: "p2 = 0.5 sign(sin t)".into(),
        },
        CheckResult {
            name: "sta constant p1 bounded",
            measured: f.constant_p1_sup,
            limit: 1.0,
            tolerance: "sup |x1| finite, <= x1(0)".into(),
            passed: f.constant_p1_sup.is_finite() && f.constant_p1_sup <= 1.0,
            detail: "p1 = 0.1 over 100 s".into(),
        },
    ])
}

/// All checks with the production gradient.
pub fn run_self_checks() -> Result<Vec<CheckResult>> {
    run_self_checks_with(backprop_mse)
}

pub fn run_self_checks_with(gradient: GradientFn) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        gradient_check(gradient, 17)?,
        gamma_check(21)?,
        sigma_check(5)?,
        specnorm_check(7)?,
        rk4_check(),
    ];
    out.extend(sta_checks()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broken_gradient(net: &Mlp, xs: &[Vector], ys: &[Vector]) -> Result<LossAndGradients> {
        let mut lg = backprop_mse(net, xs, ys)?;
        lg.gradients.layers[3].bias[0] *= 1.5;
        Ok(lg)
    }

    #[test]
    fn all_pass_on_production_code() {
        for c in run_self_checks().unwrap() {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn injected_gradient_bug_is_named() {
        let c = gradient_check(broken_gradient, 17).unwrap();
        assert!(!c.passed);
        assert!(c.detail.contains("b4[0]"), "{}", c.detail);
    }
}
