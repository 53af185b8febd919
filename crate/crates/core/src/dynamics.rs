//! Van der Pol plant, fixed-step integration, dataset generation and
//! input-derivative noise.
//!
//! ```text
//! ż = ε (z − z³/3 − θ)
//! θ̇ = z
//! ```

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VdpParams {
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VdpState {
    pub z: f64,
    pub theta: f64,
}

impl VdpState {
    pub fn new(z: f64, theta: f64) -> Self {
        VdpState { z, theta }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.z, self.theta]
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.theta.is_finite()
    }
}

impl From<[f64; 2]> for VdpState {
    fn from([z, theta]: [f64; 2]) -> Self {
        VdpState { z, theta }
    }
}

/// `(ż, θ̇)`.
pub fn vdp_derivative(s: VdpState, p: VdpParams) -> (f64, f64) {
    let z_dot = p.epsilon * (s.z - s.z * s.z * s.z / 3.0 - s.theta);
    (z_dot, s.z)
}

/// One classical Runge–Kutta step for an autonomous field on `ℝᴺ`.
pub fn rk4_step<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], y: &[f64; N], dt: f64) -> [f64; N] {
    let shift = |base: &[f64; N], k: &[f64; N], h: f64| -> [f64; N] {
        let mut out = *base;
        out.iter_mut().zip(k).for_each(|(o, ki)| *o += h * ki);
        out
    };
    let k1 = f(y);
    let k2 = f(&shift(y, &k1, dt / 2.0));
    let k3 = f(&shift(y, &k2, dt / 2.0));
    let k4 = f(&shift(y, &k3, dt));
    let mut out = *y;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

pub fn integrate_rk4(state: VdpState, params: VdpParams, dt: f64) -> VdpState {
    let field = |y: &[f64; 2]| {
        let (zd, td) = vdp_derivative(VdpState::from(*y), params);
        [zd, td]
    };
    rk4_step(field, &state.as_array(), dt).into()
}

/// Number of samples `k·dt` with `k·dt < T`, robust to float rounding of `T/dt`.
pub fn sample_count(duration: f64, dt: f64) -> usize {
    (duration / dt - 1e-9).ceil().max(0.0) as usize
}

/// Training data: features `(z, θ)`, labels the analytic `ż` of the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub features: Vec<Vector>,
    pub labels: Vec<Vector>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// CSV with header `t,z,theta,z_dot`, shortest round-trip float format.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "z", "theta", "z_dot"])?;
        for ((t, x), y) in self.times.iter().zip(&self.features).zip(&self.labels) {
            w.write_record([t.to_string(), x[0].to_string(), x[1].to_string(), y[0].to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<dataset csv>", e))?;
        Ok(())
    }
}

pub fn generate_dataset(params: VdpParams, dt: f64, duration: f64, initial: VdpState) -> Result<Dataset> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration}")));
    }
    let n = sample_count(duration, dt);
    let mut ds = Dataset {
        times: Vec::with_capacity(n),
        features: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    let mut s = initial;
    for k in 0..n {
        let (z_dot, _) = vdp_derivative(s, params);
        ds.times.push(k as f64 * dt);
        ds.features.push(Vector::from([s.z, s.theta]));
        ds.labels.push(Vector::from([z_dot]));
        s = integrate_rk4(s, params, dt);
        if !s.is_finite() {
            return Err(Error::NonFinite {
                context: "dataset trajectory",
                step: k,
            });
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Sinusoid,
}

/// Additive `amplitude·sin(2π·frequency·t)` on one input-derivative channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub amplitude: f64,
    pub frequency: f64,
    pub channel: usize,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            amplitude: 0.0,
            frequency: 0.0,
            channel: 1,
        }
    }

    /// `10·sin(20πt)` on the θ̇ channel.
    pub fn preset_sinusoid() -> Self {
        NoiseSpec {
            kind: NoiseKind::Sinusoid,
            amplitude: 10.0,
            frequency: 10.0,
            channel: 1,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::Sinusoid => self.amplitude * (2.0 * PI * self.frequency * t).sin(),
        }
    }
}

pub fn noisy_xdot(true_xdot: &Vector, spec: &NoiseSpec, t: f64) -> Result<Vector> {
    let mut out = true_xdot.clone();
    if spec.kind == NoiseKind::None {
        return Ok(out);
    }
    let slot = out
        .get_mut(spec.channel)
        .ok_or_else(|| Error::shape("noise channel", format!("< {}", true_xdot.len()), spec.channel))?;
    *slot += spec.value(t);
    Ok(out)
}
