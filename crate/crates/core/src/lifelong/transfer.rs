use serde::{Deserialize, Serialize};

use super::config::TransferConfig;
use crate::baseline::{ClassifierHead, Embedder, StageSnapshot};
use crate::bict::TransferPair;
use crate::error::{Error, Result};
use crate::losses::{objective_step, DirectionBatch, DomainStatistics};
use crate::numkernel::{Mode, ParamSet, Rng, Sgd};
use crate::synthdata::{LabeledSet, PkSampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferEpoch {
    pub total: f64,
    pub bcd: f64,
    pub bad: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    /// Networks in eval mode.
    pub pair: TransferPair,
    pub epochs: Vec<TransferEpoch>,
}

/// Trains the forward and backward transfer networks between the frozen
/// snapshot and the frozen new embedder on stage `stage`'s training split.
///
/// Both models are only read: features of every training sample are
/// extracted once up front.
pub fn train_transfer_networks(
    old: &StageSnapshot,
    new_embedder: &Embedder,
    new_classifier: &ClassifierHead,
    data: &LabeledSet,
    cfg: &TransferConfig,
    stage: u32,
    rng: &mut Rng,
) -> Result<TransferOutcome> {
    if stage < 2 || old.stage() + 1 != stage {
        return Err(Error::Protocol(format!(
            "transfer into stage {stage} needs the stage {} snapshot, got stage {}",
            stage.saturating_sub(1),
            old.stage()
        )));
    }
    cfg.sgd.validate()?;
    cfg.weights.validate()?;
    let z_old = old.embed(&data.x)?;
    let z_new = new_embedder.forward(&data.x)?;
    let stats_old = DomainStatistics::from_features(&z_old)?;
    let stats_new = DomainStatistics::from_features(&z_new)?;

    let mut pair = TransferPair::new(&cfg.bict, old.stage(), stage, &mut rng.split_named("init"));
    let sampler = PkSampler::new(&data.y);
    let k = if sampler.eligible(cfg.batch_per_id) >= 2 { cfg.batch_per_id } else { 2 };
    let p = cfg.batch_ids.min(sampler.eligible(k));
    if p < 2 {
        return Err(Error::InsufficientData("transfer training needs >= 2 identities with >= 2 samples".into()));
    }
    let batches = (data.len() / (p * k)).max(1);
    let mut sgd = Sgd::new(cfg.sgd)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    pair.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        let mut acc = TransferEpoch {
            total: 0.0,
            bcd: 0.0,
            bad: 0.0,
            alignment: 0.0,
        };
        for _ in 0..batches {
            let idx = sampler.sample(p, k, rng)?;
            let ids: Vec<u32> = idx.iter().map(|&i| data.y[i]).collect();
            let zo = z_old.select_rows(&idx);
            let zn = z_new.select_rows(&idx);
            let fwd = DirectionBatch {
                source: &zo,
                target: &zn,
                ids: &ids,
                classifier: old.classifier(),
                stats: &stats_old,
            };
            let bwd = DirectionBatch {
                source: &zn,
                target: &zo,
                ids: &ids,
                classifier: new_classifier,
                stats: &stats_new,
            };
            pair.zero_grad();
            let out = objective_step(&mut pair, &fwd, &bwd, &cfg.weights, cfg.renormalize, true)?;
            if !out.total.is_finite() {
                return Err(Error::TrainingDiverged(format!("transfer objective non-finite at epoch {epoch}")));
            }
            sgd.step(pair.params_mut(), epoch)?;
            acc.total += out.total;
            acc.bcd += out.bcd;
            acc.bad += out.bad;
            acc.alignment += (out.forward.alignment + out.backward.alignment) / 2.0;
        }
        let n = batches as f64;
        log.push(TransferEpoch {
            total: acc.total / n,
            bcd: acc.bcd / n,
            bad: acc.bad / n,
            alignment: acc.alignment / n,
        });
    }
    pair.set_mode(Mode::Eval);
    Ok(TransferOutcome { pair, epochs: log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{compute_domain_stats, snapshot_freeze, train_stage_embedder, BaselineConfig, EmbedderConfig};
    use crate::bict::BictConfig;
    use crate::synthdata::{make_stream, StreamConfig};

    fn setup(seed: u64) -> (StageSnapshot, Embedder, ClassifierHead, LabeledSet) {
        let scfg = StreamConfig {
            stages: 2,
            ids_per_stage: 12,
            samples_per_id: 8,
            raw_dim: 10,
            ..StreamConfig::default()
        };
        let stream = make_stream(&scfg, &Rng::new(seed)).unwrap();
        let ecfg = EmbedderConfig {
            raw_dim: 10,
            hidden: 16,
            hidden_layers: 1,
            dim: 8,
        };
        let bcfg = BaselineConfig {
            batch_ids: 4,
            ..BaselineConfig::default()
        };
        let mut rng = Rng::new(seed);
        let mut e1 = Embedder::new(&ecfg, &mut rng);
        let h1 = train_stage_embedder(&mut e1, &stream[0].train, &bcfg, 3, &mut rng).unwrap();
        let snap = snapshot_freeze(1, &e1, &h1, compute_domain_stats(&e1, &stream[0].train.x).unwrap());
        let mut e2 = e1.clone();
        let h2 = train_stage_embedder(&mut e2, &stream[1].train, &bcfg, 3, &mut rng).unwrap();
        (snap, e2, h2, stream[1].train.clone())
    }

    fn small() -> TransferConfig {
        TransferConfig {
            epochs: 6,
            batch_ids: 4,
            bict: BictConfig {
                dim: 8,
                prototypes: 4,
                bottleneck: 4,
                fixed_gate: None,
                branch_init_scale: 0.1,
            },
            ..TransferConfig::default()
        }
    }

    #[test]
    fn frozen_models_are_untouched() {
        let (snap, e2, h2, data) = setup(1);
        let (s0, e0, c0) = (snap.clone(), e2.clone(), h2.clone());
        let out = train_transfer_networks(&snap, &e2, &h2, &data, &small(), 2, &mut Rng::new(5)).unwrap();
        assert_eq!(out.epochs.len(), 6);
        assert_eq!(snap, s0);
        assert_eq!(e2, e0);
        assert_eq!(h2, c0);
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let (snap, e2, h2, data) = setup(2);
        let cfg = TransferConfig { epochs: 0, ..small() };
        let out = train_transfer_networks(&snap, &e2, &h2, &data, &cfg, 2, &mut Rng::new(3)).unwrap();
        let mut init = TransferPair::new(&cfg.bict, 1, 2, &mut Rng::new(3).split_named("init"));
        init.set_mode(Mode::Eval);
        assert_eq!(out.pair, init);
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn objective_decreases_over_training() {
        let mut improved = 0;
        for seed in 0..10 {
            let (snap, e2, h2, data) = setup(seed);
            let out = train_transfer_networks(&snap, &e2, &h2, &data, &small(), 2, &mut Rng::new(seed)).unwrap();
            if out.epochs.last().unwrap().total <= out.epochs[0].total {
                improved += 1;
            }
        }
        assert!(improved > 5, "{improved}/10");
    }

    #[test]
    fn identical_models_align_quickly() {
        let (_, e2, h2, data) = setup(4);
        let snap = snapshot_freeze(1, &e2, &h2, DomainStatistics::neutral(8));
        let cfg = TransferConfig { epochs: 15, ..small() };
        let out = train_transfer_networks(&snap, &e2, &h2, &data, &cfg, 2, &mut Rng::new(0)).unwrap();
        let last = out.epochs.last().unwrap();
        assert!(last.alignment < 0.01, "{:?}", out.epochs);
    }

    #[test]
    fn wrong_stage_is_a_protocol_error() {
        let (snap, e2, h2, data) = setup(5);
        let err = train_transfer_networks(&snap, &e2, &h2, &data, &small(), 3, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
