//! Versioned JSON checkpoint for a trained network.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! round-tripping, so save/load is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, Mlp};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub activation: Activation,
    /// `[n, width_1, …, m]`.
    pub shape: Vec<usize>,
    /// Lipschitz target used by spectral normalization during training, if any.
    pub gamma: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Checkpoint {
    pub fn new(net: &Mlp, gamma: Option<f64>, seed: u64, epochs: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            activation: net.activation(),
            shape: net.shape(),
            gamma,
            seed,
            epochs,
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weight.rows(),
                    cols: l.weight.cols(),
                    weight: l.weight.as_slice().to_vec(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn network(&self) -> Result<Mlp> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: self.version,
            });
        }
        let layers = self
            .layers
            .iter()
            .map(|r| Layer::new(Matrix::from_vec(r.rows, r.cols, r.weight.clone())?, Vector::from(r.bias.clone())))
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp::new(layers)?;
        if net.shape() != self.shape {
            return Err(Error::shape("checkpoint shape", format!("{:?}", self.shape), format!("{:?}", net.shape())));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_lossless(seed in any::<u64>(), gamma in prop::option::of(1e-3f64..1e3)) {
            let net = Mlp::he_init(&[2, 8, 16, 8, 1], seed).unwrap();
            let ck = Checkpoint::new(&net, gamma, seed, 7);
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            prop_assert_eq!(&back, &ck);
            let restored = back.network().unwrap();
            let bits = |n: &Mlp| n.params_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&restored), bits(&net));
        }
    }

    #[test]
    fn version_and_shape_are_checked() {
        let net = Mlp::he_init(&[2, 3, 1], 0).unwrap();
        let mut ck = Checkpoint::new(&net, None, 0, 0);
        ck.version = 99;
        assert!(matches!(ck.network(), Err(Error::CheckpointVersion { .. })));
        let mut ck = Checkpoint::new(&net, None, 0, 0);
        ck.shape = vec![2, 4, 1];
        assert!(ck.network().is_err());
        assert!(Checkpoint::from_json("{\"version\": 1}").is_err());
    }
}
