//! Scenario configuration and its TOML form.
//!
//! The file is flat key-value. `schema_version` and `case` are required;
//! every other key falls back to the preset for that case, so a config only
//! needs to spell out what it changes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{NoiseKind, NoiseSpec, VdpParams, VdpState};
use crate::error::{Error, Result};
use crate::specnorm::SpecNormConfig;
use crate::sta::StaGains;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseId {
    /// Input derivative known, spectral normalization with γ = 32.
    #[serde(rename = "case1")]
    CaseI,
    /// Noisy input derivative, spectral normalization with γ = 1.
    #[serde(rename = "case2a")]
    CaseIIa,
    /// Noisy input derivative, no spectral normalization.
    #[serde(rename = "case2b")]
    CaseIIb,
}

impl CaseId {
    pub const ALL: [CaseId; 3] = [CaseId::CaseI, CaseId::CaseIIa, CaseId::CaseIIb];

    pub fn slug(self) -> &'static str {
        match self {
            CaseId::CaseI => "case1",
            CaseId::CaseIIa => "case2a",
            CaseId::CaseIIb => "case2b",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CaseId::CaseI => "Case I",
            CaseId::CaseIIa => "Case II.a",
            CaseId::CaseIIb => "Case II.b",
        }
    }

    pub fn uses_estimate(self) -> bool {
        self != CaseId::CaseI
    }
}

impl std::str::FromStr for CaseId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseId::ALL
            .into_iter()
            .find(|c| c.slug() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown case {s:?} (expected case1, case2a or case2b)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub case: CaseId,
    pub eps_nominal: f64,
    pub eps_real: f64,
    /// Layer sizes including the input, e.g. `[2, 8, 16, 8, 1]`.
    pub net_shape: Vec<usize>,
    /// Spectral-normalization target; `None` trains without it.
    pub gamma: Option<f64>,
    /// `γ` used for the online `‖Γ − Γ̂‖` bound line. Defaults to `gamma`.
    pub bound_gamma: Option<f64>,
    /// `None` freezes the last layer online.
    pub gains: Option<StaGains>,
    pub dt: f64,
    pub t_train: f64,
    pub t_online: f64,
    pub trailing_window: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub initial_state: VdpState,
}

impl ScenarioConfig {
    pub fn preset(case: CaseId) -> Self {
        let (gamma, noise) = match case {
            CaseId::CaseI => (Some(32.0), NoiseSpec::none()),
            CaseId::CaseIIa => (Some(1.0), NoiseSpec::preset_sinusoid()),
            CaseId::CaseIIb => (None, NoiseSpec::preset_sinusoid()),
        };
        ScenarioConfig {
            case,
            eps_nominal: 1.0,
            eps_real: 1.5,
            net_shape: vec![2, 8, 16, 8, 1],
            gamma,
            // II.b is compared against the II.a certificate
            bound_gamma: if case == CaseId::CaseIIb { Some(1.0) } else { gamma },
            gains: Some(StaGains::preset()),
            dt: 0.01,
            t_train: 30.0,
            t_online: 30.0,
            trailing_window: 10.0,
            epochs: 20_000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            noise,
            initial_state: VdpState::new(2.0, 0.0),
        }
    }

    pub fn nominal(&self) -> VdpParams {
        VdpParams { epsilon: self.eps_nominal }
    }

    pub fn real(&self) -> VdpParams {
        VdpParams { epsilon: self.eps_real }
    }

    pub fn spec_norm(&self) -> Result<SpecNormConfig> {
        match self.gamma {
            Some(g) => SpecNormConfig::new(g),
            None => Ok(SpecNormConfig::disabled()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = [
            ("dt", self.dt),
            ("t_train", self.t_train),
            ("t_online", self.t_online),
            ("trailing_window", self.trailing_window),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.eps_nominal.is_finite() || !self.eps_real.is_finite() {
            return bad("epsilon values must be finite".into());
        }
        if self.trailing_window > self.t_online {
            return bad(format!(
                "trailing_window {} exceeds t_online {}",
                self.trailing_window, self.t_online
            ));
        }
        if self.net_shape.len() < 2 || self.net_shape.contains(&0) {
            return bad(format!("net_shape must list at least two positive sizes, got {:?}", self.net_shape));
        }
        if self.net_shape[0] != 2 || *self.net_shape.last().unwrap() != 1 {
            return bad(format!("net_shape must map (z, theta) to z_dot: [2, ..., 1], got {:?}", self.net_shape));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, g) in [("gamma", self.gamma), ("bound_gamma", self.bound_gamma)] {
            if let Some(g) = g {
                if !(g > 0.0 && g.is_finite()) {
                    return bad(format!("{name} must be positive, got {g}"));
                }
            }
        }
        if self.noise.kind == NoiseKind::Sinusoid {
            if !(self.noise.amplitude >= 0.0 && self.noise.amplitude.is_finite()) {
                return bad(format!("noise_amplitude must be non-negative, got {}", self.noise.amplitude));
            }
            if self.noise.channel >= self.net_shape[0] {
                return bad(format!("noise_channel {} out of range", self.noise.channel));
            }
        }
        let sinusoid = self.noise.kind == NoiseKind::Sinusoid;
        match self.case {
            CaseId::CaseI if sinusoid => bad("case1 runs without noise".into()),
            CaseId::CaseI | CaseId::CaseIIa if self.gamma.is_none() => {
                bad(format!("{} needs spectral normalization (set gamma)", self.case.slug()))
            }
            CaseId::CaseIIa | CaseId::CaseIIb if !sinusoid => {
                bad(format!("{} needs noise = \"sinusoid\"", self.case.slug()))
            }
            CaseId::CaseIIb if self.gamma.is_some() => bad("case2b trains without spectral normalization".into()),
            _ => Ok(()),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        raw.resolve()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Every key written out, so the file documents the full scenario.
    pub fn to_toml(&self) -> String {
        let raw = RawConfig {
            schema_version: Some(SCHEMA_VERSION),
            case: Some(self.case),
            eps_nominal: Some(self.eps_nominal),
            eps_real: Some(self.eps_real),
            net_shape: Some(self.net_shape.clone()),
            spectral_norm: Some(self.gamma.is_some()),
            gamma: self.gamma,
            bound_gamma: self.bound_gamma,
            adapt: Some(self.gains.is_some()),
            k1: self.gains.map(|g| g.k1),
            k2: self.gains.map(|g| g.k2),
            dt: Some(self.dt),
            t_train: Some(self.t_train),
            t_online: Some(self.t_online),
            trailing_window: Some(self.trailing_window),
            epochs: Some(self.epochs),
            batch_size: Some(self.batch_size),
            learning_rate: Some(self.learning_rate),
            seed: Some(self.seed),
            noise: Some(self.noise.kind),
            noise_amplitude: (self.noise.kind != NoiseKind::None).then_some(self.noise.amplitude),
            noise_frequency: (self.noise.kind != NoiseKind::None).then_some(self.noise.frequency),
            noise_channel: (self.noise.kind != NoiseKind::None).then_some(self.noise.channel),
            z0: Some(self.initial_state.z),
            theta0: Some(self.initial_state.theta),
        };
        toml::to_string(&raw).expect("flat config always serializes")
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    case: Option<CaseId>,
    eps_nominal: Option<f64>,
    eps_real: Option<f64>,
    net_shape: Option<Vec<usize>>,
    spectral_norm: Option<bool>,
    gamma: Option<f64>,
    bound_gamma: Option<f64>,
    adapt: Option<bool>,
    k1: Option<f64>,
    k2: Option<f64>,
    dt: Option<f64>,
    t_train: Option<f64>,
    t_online: Option<f64>,
    trailing_window: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    noise: Option<NoiseKind>,
    noise_amplitude: Option<f64>,
    noise_frequency: Option<f64>,
    noise_channel: Option<usize>,
    z0: Option<f64>,
    theta0: Option<f64>,
}

impl RawConfig {
    fn resolve(self) -> Result<ScenarioConfig> {
        match self.schema_version {
            Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::InvalidConfig(format!("unsupported schema_version {v} (expected {SCHEMA_VERSION})"))),
            None => return Err(Error::InvalidConfig("missing schema_version".into())),
        }
        let case = self.case.ok_or_else(|| Error::InvalidConfig("missing case".into()))?;
        let mut cfg = ScenarioConfig::preset(case);

        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { cfg.$field = v; } )* };
        }
        take!(eps_nominal, eps_real, net_shape, dt, t_train, t_online, trailing_window, epochs, batch_size, learning_rate, seed);

        match (self.spectral_norm, self.gamma) {
            (Some(false), Some(_)) => {
                return Err(Error::InvalidConfig("gamma given with spectral_norm = false".into()));
            }
            (Some(false), None) => cfg.gamma = None,
            (Some(true), None) if cfg.gamma.is_none() => {
                return Err(Error::InvalidConfig("spectral_norm = true needs gamma".into()));
            }
            (_, Some(g)) => cfg.gamma = Some(g),
            _ => {}
        }
        // an untouched bound line follows gamma
        cfg.bound_gamma = self.bound_gamma.or(if case == CaseId::CaseIIb { cfg.bound_gamma } else { cfg.gamma });

        let adapt = self.adapt.unwrap_or(true);
        cfg.gains = match (adapt, self.k1, self.k2) {
            (false, None, None) => None,
            (false, _, _) => return Err(Error::InvalidConfig("k1/k2 given with adapt = false".into())),
            (true, Some(k1), Some(k2)) if k1 == 0.0 && k2 == 0.0 => None,
            (true, k1, k2) => {
                let base = StaGains::preset();
                let (k1, k2) = (k1.unwrap_or(base.k1), k2.unwrap_or(base.k2));
                Some(StaGains::new(k1, k2).map_err(|_| {
                    Error::InvalidConfig(format!("gains must both be positive (or both zero to freeze), got k1={k1}, k2={k2}"))
                })?)
            }
        };

        if let Some(kind) = self.noise {
            cfg.noise = match kind {
                NoiseKind::None => NoiseSpec::none(),
                NoiseKind::Sinusoid => NoiseSpec::preset_sinusoid(),
            };
        }
        if cfg.noise.kind == NoiseKind::Sinusoid {
            take_noise(&mut cfg.noise, self.noise_amplitude, self.noise_frequency, self.noise_channel);
        } else if self.noise_amplitude.is_some() || self.noise_frequency.is_some() || self.noise_channel.is_some() {
            return Err(Error::InvalidConfig("noise_* keys need noise = \"sinusoid\"".into()));
        }
        cfg.initial_state = VdpState::new(
            self.z0.unwrap_or(cfg.initial_state.z),
            self.theta0.unwrap_or(cfg.initial_state.theta),
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

fn take_noise(noise: &mut NoiseSpec, amplitude: Option<f64>, frequency: Option<f64>, channel: Option<usize>) {
    if let Some(a) = amplitude {
        noise.amplitude = a;
    }
    if let Some(f) = frequency {
        noise.frequency = f;
    }
    if let Some(c) = channel {
        noise.channel = c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for case in CaseId::ALL {
            ScenarioConfig::preset(case).validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip() {
        for case in CaseId::ALL {
            let cfg = ScenarioConfig::preset(case);
            let text = cfg.to_toml();
            assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn minimal_file_uses_preset() {
        let cfg = ScenarioConfig::from_toml("schema_version = 1\ncase = \"case2a\"\nseed = 9\n").unwrap();
        let mut expected = ScenarioConfig::preset(CaseId::CaseIIa);
        expected.seed = 9;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn zero_gains_freeze() {
        let cfg = ScenarioConfig::from_toml("schema_version = 1\ncase = \"case1\"\nk1 = 0.0\nk2 = 0.0\n").unwrap();
        assert_eq!(cfg.gains, None);
        assert!(ScenarioConfig::from_toml("schema_version = 1\ncase = \"case1\"\nk1 = 0.0\nk2 = 1.0\n").is_err());
    }

    #[test]
    fn rejects_bad_files() {
        for text in [
            "case = \"case1\"\n",
            "schema_version = 2\ncase = \"case1\"\n",
            "schema_version = 1\n",
            "schema_version = 1\ncase = \"case3\"\n",
            "schema_version = 1\ncase = \"case1\"\nbogus = 1\n",
            "schema_version = 1\ncase = \"case1\"\nnoise = \"sinusoid\"\n",
            "schema_version = 1\ncase = \"case2b\"\ngamma = 1.0\n",
            "schema_version = 1\ncase = \"case2a\"\nspectral_norm = false\n",
            "schema_version = 1\ncase = \"case1\"\ndt = -0.01\n",
            "schema_version = 1\ncase = \"case1\"\nnet_shape = [3, 4, 1]\n",
            "schema_version = 1\ncase = \"case1\"\nt_online = 5.0\n",
        ] {
            assert!(ScenarioConfig::from_toml(text).is_err(), "accepted:\n{text}");
        }
    }

    #[test]
    fn case2b_bound_line_defaults_to_one() {
        let cfg = ScenarioConfig::from_toml("schema_version = 1\ncase = \"case2b\"\n").unwrap();
        assert_eq!(cfg.gamma, None);
        assert_eq!(cfg.bound_gamma, Some(1.0));
        let cfg = ScenarioConfig::from_toml("schema_version = 1\ncase = \"case2a\"\ngamma = 4.0\n").unwrap();
        assert_eq!(cfg.bound_gamma, Some(4.0));
    }
}
