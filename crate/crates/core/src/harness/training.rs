//! Offline training on the nominal plant.

use std::io::Write;

use rand::seq::SliceRandom;

use super::config::ScenarioConfig;
use crate::dynamics::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::mlp::{adam_step, AdamConfig, AdamState, Checkpoint, Gradients, Mlp, Workspace};
use crate::seeds::{self, Stream};
use crate::specnorm::{lipschitz_bound, spectral_normalize, LipschitzReport};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss seen during the epoch.
    pub loss: f64,
    /// `∏σ(W_i)` after the epoch's normalization pass.
    pub sigma_product: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub network: Mlp,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Full-dataset loss at initialization.
    pub initial_loss: f64,
    /// Full-dataset loss after the last epoch.
    pub final_loss: f64,
    pub lipschitz: LipschitzReport,
    /// Epochs whose singular-value estimate hit the iteration cap.
    pub unconverged_sigma_epochs: usize,
}

pub fn nominal_dataset(cfg: &ScenarioConfig) -> Result<Dataset> {
    generate_dataset(cfg.nominal(), cfg.dt, cfg.t_train, cfg.initial_state)
}

pub fn dataset_loss(net: &Mlp, data: &Dataset) -> f64 {
    let mut ws = Workspace::new(net);
    let scale = 1.0 / data.len() as f64;
    data.features
        .iter()
        .zip(&data.labels)
        .map(|(x, y)| ws.loss(net, x, y, scale))
        .sum()
}

pub fn run_training(cfg: &ScenarioConfig) -> Result<TrainingOutcome> {
    run_training_with(cfg, |_| {})
}

/// Adam over seeded shuffled minibatches, then one spectral-normalization
/// pass per epoch when `gamma` is set. `on_epoch` sees every log record.
pub fn run_training_with(cfg: &ScenarioConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let data = nominal_dataset(cfg)?;
    let sn = cfg.spec_norm()?;
    let mut net = Mlp::he_init(&cfg.net_shape, cfg.seed)?;
    let mut adam = AdamState::new(
        &net,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut grads = Gradients::zeros_like(&net);
    let mut ws = Workspace::new(&net);
    let mut shuffle = seeds::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let initial_loss = dataset_loss(&net, &data);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut unconverged_sigma_epochs = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                loss += ws.accumulate(&net, &data.features[i], &data.labels[i], scale, &mut grads);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            adam_step(&mut net, &grads, &mut adam)?;
            loss_sum += loss;
            batches += 1;
        }
        let outcome = spectral_normalize(&mut net, &sn)?;
        if !outcome.converged {
            unconverged_sigma_epochs += 1;
        }
        let loss = loss_sum / batches as f64;
        if !net.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        let record = EpochRecord {
            epoch,
            loss,
            sigma_product: outcome.sigmas.iter().product(),
        };
        on_epoch(&record);
        log.push(record);
    }

    let final_loss = dataset_loss(&net, &data);
    let lipschitz = lipschitz_bound(&net)?.certified_by(&sn);
    Ok(TrainingOutcome {
        checkpoint: Checkpoint::new(&net, cfg.gamma, cfg.seed, cfg.epochs),
        network: net,
        log,
        initial_loss,
        final_loss,
        lipschitz,
        unconverged_sigma_epochs,
    })
}

/// CSV with header `epoch,loss,sigma_product`.
pub fn write_training_log<W: Write>(log: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "sigma_product"])?;
    for r in log {
        w.write_record([r.epoch.to_string(), r.loss.to_string(), r.sigma_product.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<training log>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::CaseId;

    fn short(epochs: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::preset(CaseId::CaseIIa);
        cfg.epochs = epochs;
        cfg.t_train = 2.0;
        cfg
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = short(0);
        let out = run_training(&cfg).unwrap();
        assert_eq!(out.network, Mlp::he_init(&cfg.net_shape, cfg.seed).unwrap());
        assert_eq!(out.final_loss, out.initial_loss);
        assert!(out.log.is_empty());
    }

    #[test]
    fn deterministic_and_certified() {
        let cfg = short(30);
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
        assert_eq!(a.log, b.log);
        assert!(a.lipschitz.product_bound <= 1.0 + 1e-6);
        assert_eq!(a.lipschitz.certified_gamma, 1.0);
        assert_eq!(a.checkpoint.gamma, Some(1.0));
        assert!(a.log.iter().all(|r| r.sigma_product <= 1.0 + 1e-6));
    }

    #[test]
    fn divergence_aborts() {
        let mut cfg = short(5);
        cfg.learning_rate = 1e300;
        cfg.gamma = None;
        cfg.case = CaseId::CaseIIb;
        match run_training(&cfg) {
            Err(e) => assert!(e.is_numerical(), "{e}"),
            Ok(out) => panic!("trained to loss {}", out.final_loss),
        }
    }

    #[test]
    fn log_csv_header() {
        let mut buf = Vec::new();
        write_training_log(
            &[EpochRecord {
                epoch: 1,
                loss: 0.5,
                sigma_product: 2.0,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss,sigma_product\n1,0.5,2\n");
    }
}
