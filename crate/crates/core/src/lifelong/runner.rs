use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, RunMode};
use super::fusion::{compute_epsilon, dff_fuse_models, EpsilonValue};
use super::transfer::{train_transfer_networks, TransferEpoch};
use crate::baseline::{
    compute_domain_stats, snapshot_freeze, train_stage_embedder_logged, Embedder, StageSnapshot,
};
use crate::bict::TransferPair;
use crate::error::{Error, Result};
use crate::evaltheory::{evaluate_stage, EpsilonEntry, MetricsReport, QuerySet, StageEval};
use crate::gallery::GalleryStore;
use crate::numkernel::ops::normalize_rows;
use crate::numkernel::{Matrix, Rng};
use crate::synthdata::{make_stream, LabeledSet, StageData};

/// Raw training and gallery inputs of every stage, with a counter of reads
/// that reach into stages already closed.
#[derive(Debug, Default)]
pub struct RawVault {
    stages: BTreeMap<u32, (LabeledSet, LabeledSet)>,
    current: u32,
    closed_reads: u64,
}

impl RawVault {
    fn deposit(&mut self, stage: u32, train: LabeledSet, gallery: LabeledSet) {
        self.stages.insert(stage, (train, gallery));
        self.current = stage;
    }

    fn touch(&mut self, stage: u32) -> Result<&(LabeledSet, LabeledSet)> {
        if stage < self.current {
            self.closed_reads += 1;
        }
        self.stages
            .get(&stage)
            .ok_or_else(|| Error::Protocol(format!("no raw inputs recorded for stage {stage}")))
    }

    pub fn train(&mut self, stage: u32) -> Result<&LabeledSet> {
        Ok(&self.touch(stage)?.0)
    }

    pub fn gallery(&mut self, stage: u32) -> Result<&LabeledSet> {
        Ok(&self.touch(stage)?.1)
    }

    /// Reads of raw inputs belonging to stages before the current one.
    pub fn closed_reads(&self) -> u64 {
        self.closed_reads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub baseline_secs: f64,
    pub transfer_secs: f64,
    pub gallery_secs: f64,
    pub eval_secs: f64,
}

/// Everything recorded about one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u32,
    pub epsilon_raw: Option<f64>,
    pub epsilon_used: Option<f64>,
    /// Weight actually applied to historical features.
    pub gallery_epsilon: Option<f64>,
    pub baseline_losses: Vec<f64>,
    pub transfer_losses: Vec<TransferEpoch>,
    pub gallery_size: usize,
    pub eval: StageEval,
    pub timings: StageTimings,
}

/// The orchestrator's state between stages.
#[derive(Debug)]
pub struct LifelongState {
    cfg: ExperimentConfig,
    root: Rng,
    stage: u32,
    store: GalleryStore,
    serving: Option<Embedder>,
    trained: Option<Embedder>,
    snapshot: Option<StageSnapshot>,
    transfer: Option<TransferPair>,
    vault: RawVault,
    queries: Vec<(u32, LabeledSet)>,
}

impl LifelongState {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            root: Rng::new(cfg.seed).split_named("lifelong"),
            store: GalleryStore::new(cfg.embedder.dim, 1)?,
            cfg,
            stage: 0,
            serving: None,
            trained: None,
            snapshot: None,
            transfer: None,
            vault: RawVault::default(),
            queries: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn stage(&self) -> u32 {
        self.stage
    }

    pub fn store(&self) -> &GalleryStore {
        &self.store
    }

    /// The model that embeds queries and initializes the next stage.
    pub fn serving(&self) -> Option<&Embedder> {
        self.serving.as_ref()
    }

    /// The embedder produced by the latest baseline training, before fusion.
    pub fn trained(&self) -> Option<&Embedder> {
        self.trained.as_ref()
    }

    pub fn snapshot(&self) -> Option<&StageSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn transfer(&self) -> Option<&TransferPair> {
        self.transfer.as_ref()
    }

    pub fn raw_closed_reads(&self) -> u64 {
        self.vault.closed_reads()
    }

    fn embed_all(model: &Embedder, sets: &[&LabeledSet]) -> Result<Matrix> {
        let owned: Vec<LabeledSet> = sets.iter().map(|s| (*s).clone()).collect();
        let refs: Vec<&LabeledSet> = owned.iter().collect();
        Ok(normalize_rows(&model.forward(&LabeledSet::concat(&refs)?.x)?)?.0)
    }

    /// Runs stage `data.stage`, which must directly follow the last one run.
    pub fn run_stage(&mut self, data: &StageData) -> Result<StageRecord> {
        let t = data.stage;
        if t != self.stage + 1 {
            return Err(Error::Protocol(format!("stage {t} offered after stage {}", self.stage)));
        }
        let mode = self.cfg.mode;
        let rng = self.root.split(t as u64);
        self.vault.deposit(t, data.train.clone(), data.gallery.clone());
        self.queries.push((t, data.query.clone()));

        let clock = Instant::now();
        let train_set = if mode == RunMode::Joint && t > 1 {
            let mut parts = Vec::with_capacity(t as usize);
            for s in 1..=t {
                parts.push(self.vault.train(s)?.clone());
            }
            LabeledSet::concat(&parts.iter().collect::<Vec<_>>())?
        } else {
            data.train.clone()
        };
        let mut embedder = match &self.serving {
            Some(prev) => prev.clone(),
            None => Embedder::new(&self.cfg.embedder, &mut self.root.split_named("embedder.init")),
        };
        let (classifier, baseline_losses) = train_stage_embedder_logged(
            &mut embedder,
            &train_set,
            &self.cfg.baseline,
            self.cfg.baseline.epochs_for(t),
            &mut rng.split_named("baseline"),
        )?;
        let baseline_secs = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let mut epsilon: Option<EpsilonValue> = None;
        let mut transfer_losses = Vec::new();
        let serving = match (&self.snapshot, mode) {
            (Some(old), RunMode::Rfl | RunMode::Reindex | RunMode::Frozen) => {
                let eps = compute_epsilon(
                    Some(old.embedder()),
                    &embedder,
                    &data.train.x,
                    self.cfg.fusion.epsilon_batch,
                    self.cfg.fusion.epsilon_scale,
                )?;
                epsilon = Some(eps);
                if mode != RunMode::Frozen {
                    let out = train_transfer_networks(
                        old,
                        &embedder,
                        &classifier,
                        &data.train,
                        &self.cfg.transfer,
                        t,
                        &mut rng.split_named("transfer"),
                    )?;
                    transfer_losses = out.epochs;
                    self.transfer = Some(out.pair);
                }
                dff_fuse_models(old, &embedder, eps.used)?
            }
            _ => embedder.clone(),
        };
        let transfer_secs = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let mut gallery_epsilon = None;
        if t > 1 {
            match mode {
                RunMode::Rfl => {
                    let w = if self.cfg.fusion.feature_fusion {
                        epsilon.map(|e| e.used).unwrap_or(0.0)
                    } else {
                        0.0
                    };
                    let net = &self.transfer.as_ref().expect("trained above").forward;
                    self.store.update_all(net, w, t)?;
                    gallery_epsilon = Some(w);
                }
                RunMode::Reindex | RunMode::Joint => {
                    let mut raws = Vec::with_capacity(t as usize - 1);
                    for s in 1..t {
                        raws.push(self.vault.gallery(s)?.clone());
                    }
                    let feats = Self::embed_all(&serving, &raws.iter().collect::<Vec<_>>())?;
                    self.store.reextract_all(&feats, t)?;
                }
                RunMode::Frozen => self.store.advance_frozen(t)?,
            }
        }
        let (fresh, _) = normalize_rows(&serving.forward(&data.gallery.x)?)?;
        self.store.append_features(&fresh, &data.gallery.y, t)?;
        let gallery_secs = clock.elapsed().as_secs_f64();

        let stats = compute_domain_stats(&serving, &data.train.x)?;
        self.snapshot = Some(snapshot_freeze(t, &serving, &classifier, stats));
        self.trained = Some(embedder);
        self.serving = Some(serving);
        self.stage = t;

        let clock = Instant::now();
        let sets: Vec<QuerySet<'_>> = self
            .queries
            .iter()
            .map(|(d, q)| QuerySet { dataset: *d, data: q })
            .collect();
        let eval = evaluate_stage(self.serving.as_ref().expect("set above"), &self.store, &sets, t)?;
        let eval_secs = clock.elapsed().as_secs_f64();

        Ok(StageRecord {
            stage: t,
            epsilon_raw: epsilon.map(|e| e.raw),
            epsilon_used: epsilon.map(|e| e.used),
            gallery_epsilon,
            baseline_losses,
            transfer_losses,
            gallery_size: self.store.len(),
            eval,
            timings: StageTimings {
                baseline_secs,
                transfer_secs,
                gallery_secs,
                eval_secs,
            },
        })
    }
}

/// Models needed to re-evaluate a finished run against its persisted gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub stage: u32,
    pub serving: Embedder,
    pub snapshot: StageSnapshot,
    pub transfer: Option<TransferPair>,
}

/// Fields of a run that must reproduce bit for bit; excludes the config echo
/// and wall-clock timings.
#[derive(Serialize)]
struct HashedContent<'a> {
    mode: &'a str,
    seed: u64,
    metrics: &'a MetricsReport,
    stages: Vec<HashedStage<'a>>,
    raw_closed_reads: u64,
    gallery_sha256: &'a str,
}

#[derive(Serialize)]
struct HashedStage<'a> {
    stage: u32,
    epsilon_raw: Option<f64>,
    epsilon_used: Option<f64>,
    gallery_epsilon: Option<f64>,
    baseline_losses: &'a [f64],
    transfer_losses: &'a [TransferEpoch],
    gallery_size: usize,
    eval: &'a StageEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub metrics: MetricsReport,
    pub stages: Vec<StageRecord>,
    pub raw_closed_reads: u64,
    pub gallery_sha256: String,
    pub hash: String,
}

impl RunReport {
    fn content_hash(&self) -> String {
        let mut metrics = self.metrics.clone();
        metrics.runtime_secs = 0.0;
        let content = HashedContent {
            mode: &metrics.mode,
            seed: metrics.seed,
            metrics: &metrics,
            stages: self
                .stages
                .iter()
                .map(|s| HashedStage {
                    stage: s.stage,
                    epsilon_raw: s.epsilon_raw,
                    epsilon_used: s.epsilon_used,
                    gallery_epsilon: s.gallery_epsilon,
                    baseline_losses: &s.baseline_losses,
                    transfer_losses: &s.transfer_losses,
                    gallery_size: s.gallery_size,
                    eval: &s.eval,
                })
                .collect(),
            raw_closed_reads: self.raw_closed_reads,
            gallery_sha256: &self.gallery_sha256,
        };
        let bytes = serde_json::to_vec(&content).expect("report content serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Recomputes the content hash and compares it with the stored one.
    pub fn verify_hash(&self) -> bool {
        self.content_hash() == self.hash
    }

    pub fn mean_final_map(&self) -> f64 {
        self.metrics.final_mean(|c| c.map).unwrap_or(f64::NAN)
    }
}

/// A finished run: its report plus the final state.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub state: LifelongState,
}

impl RunOutcome {
    pub fn checkpoint(&self) -> Option<Checkpoint> {
        Some(Checkpoint {
            config: self.state.cfg.clone(),
            stage: self.state.stage,
            serving: self.state.serving.clone()?,
            snapshot: self.state.snapshot.clone()?,
            transfer: self.state.transfer.clone(),
        })
    }
}

/// Generates the stream fixed by the config's seed.
pub fn stream_for(cfg: &ExperimentConfig) -> Result<Vec<StageData>> {
    make_stream(&cfg.stream, &Rng::new(cfg.seed).split_named("stream"))
}

/// Runs every stage of the configured stream in the configured mode.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let stream = stream_for(cfg)?;
    let mut state = LifelongState::new(cfg.clone())?;
    let mut metrics = MetricsReport::new(cfg.mode.as_str(), cfg.seed);
    let mut stages = Vec::with_capacity(stream.len());
    for data in &stream {
        let record = state.run_stage(data)?;
        metrics.push_stage(&record.eval);
        if let (Some(raw), Some(used)) = (record.epsilon_raw, record.epsilon_used) {
            metrics.epsilon.push(EpsilonEntry {
                stage: record.stage,
                raw,
                used,
            });
        }
        stages.push(record);
    }
    metrics.finalize_forgetting();
    metrics.runtime_secs = started.elapsed().as_secs_f64();
    let mut report = RunReport {
        config: cfg.clone(),
        metrics,
        stages,
        raw_closed_reads: state.raw_closed_reads(),
        gallery_sha256: state.store.content_sha256(),
        hash: String::new(),
    };
    report.hash = report.content_hash();
    Ok(RunOutcome { report, state })
}

/// Runs the same config under several modes on separate threads.
pub fn run_arms(cfg: &ExperimentConfig, modes: &[RunMode]) -> Result<Vec<RunReport>> {
    modes
        .par_iter()
        .map(|&mode| {
            let cfg = ExperimentConfig { mode, ..cfg.clone() };
            run_experiment(&cfg).map(|o| o.report)
        })
        .collect()
}
