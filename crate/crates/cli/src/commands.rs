use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use bicr_core::baseline::{Embedder, EmbedderConfig};
use bicr_core::bict::{BiCTNetwork, BictConfig, Direction};
use bicr_core::evaltheory::{evaluate_stage, QuerySet, StageEval, SweepConfig, TheoryReport};
use bicr_core::gallery::GalleryStore;
use bicr_core::gradsuite::{run_gradcheck, CheckResult, Component, GradSuiteConfig};
use bicr_core::lifelong::{
    run_experiment, stream_for, Checkpoint, ExperimentConfig, OutputConfig, RunMode, RunReport,
};
use bicr_core::numkernel::{ParamSet, Rng};

use crate::error::CliError;

/// Where a run's configuration comes from, in increasing precedence.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

pub fn load_config(src: &ConfigSource) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &src.path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
                bicr_core::Error::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                other => other.into(),
            })?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = src.seed {
        cfg.seed = seed;
    }
    cfg.apply_overrides(&src.overrides)?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    Ok(path)
}

fn json<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamSummary {
    pub stage: u32,
    pub train: usize,
    pub gallery: usize,
    pub query: usize,
    pub identities: usize,
}

/// Writes the configured stream to `stream.json` plus a per-stage `stream.csv`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StreamSummary>, CliError> {
    let stream = stream_for(cfg)?;
    let summary: Vec<StreamSummary> = stream
        .iter()
        .map(|s| StreamSummary {
            stage: s.stage,
            train: s.train.len(),
            gallery: s.gallery.len(),
            query: s.query.len(),
            identities: s.train.identities().len() + s.gallery.identities().len(),
        })
        .collect();
    write(out, "stream.json", serde_json::to_vec(&stream)?)?;
    let mut csv = String::from("stage,train,gallery,query,identities\n");
    for s in &summary {
        csv += &format!("{},{},{},{},{}\n", s.stage, s.train, s.gallery, s.query, s.identities);
    }
    write(out, "stream.csv", csv)?;
    write(out, "config.toml", cfg.to_toml_string())?;
    Ok(summary)
}

/// Runs one arm per mode, in parallel. A single arm writes straight into `out`;
/// several arms get one subdirectory each plus a `summary.csv`.
pub fn cmd_run(cfg: &ExperimentConfig, modes: &[RunMode], out: &Path) -> Result<Vec<RunReport>, CliError> {
    if modes.is_empty() {
        return Err(CliError::Config("no mode selected".into()));
    }
    let results: Vec<Result<RunReport, CliError>> = modes
        .par_iter()
        .map(|&mode| {
            let arm = ExperimentConfig { mode, ..cfg.clone() };
            let dir = if modes.len() == 1 { out.to_path_buf() } else { out.join(mode.as_str()) };
            let outcome = run_experiment(&arm)?;
            let report = &outcome.report;
            let names = &arm.output;
            write(&dir, "config.toml", arm.to_toml_string())?;
            write(&dir, &names.report, json(report)?)?;
            write(&dir, &names.metrics_csv, report.metrics.to_csv())?;
            write(&dir, &names.stages, json(&report.stages)?)?;
            write(&dir, &names.gallery, outcome.state.store().to_bytes())?;
            if let Some(ckpt) = outcome.checkpoint() {
                write(&dir, &names.checkpoint, serde_json::to_vec(&ckpt)?)?;
            }
            Ok(outcome.report)
        })
        .collect();
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    if reports.len() > 1 {
        let mut csv = String::from("mode,seed,mean_final_map,mean_final_r1,af_map,af_r1,raw_closed_reads,hash\n");
        for r in &reports {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.metrics.mode,
                r.metrics.seed,
                r.mean_final_map(),
                opt(r.metrics.final_mean(|c| c.r1)),
                opt(r.metrics.af_map),
                opt(r.metrics.af_r1),
                r.raw_closed_reads,
                r.hash
            );
        }
        write(out, "summary.csv", csv)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub stage: u32,
    pub eval: StageEval,
    pub gallery_sha256: String,
    /// Whether `report.json` was present and its stored hash verifies.
    pub report_hash_ok: Option<bool>,
    /// Whether the fresh evaluation reproduces the report's final stage exactly.
    pub matches_report: Option<bool>,
}

/// Re-evaluates a finished run from its persisted gallery and checkpoint. File
/// names come from the run's `config.toml` when present.
pub fn cmd_eval(run_dir: &Path) -> Result<EvalSummary, CliError> {
    let names = match fs::read_to_string(run_dir.join("config.toml")) {
        Ok(text) => ExperimentConfig::from_toml_str(&text)?.output,
        Err(_) => OutputConfig::default(),
    };
    let read = |name: &str| fs::read(run_dir.join(name)).map_err(|e| CliError::Runtime(format!("{name}: {e}")));
    let ckpt: Checkpoint = serde_json::from_slice(&read(&names.checkpoint)?)?;
    let store = GalleryStore::from_bytes(&read(&names.gallery)?)?;
    let stream = stream_for(&ckpt.config)?;
    let queries: Vec<QuerySet> = stream
        .iter()
        .take(ckpt.stage as usize)
        .map(|s| QuerySet {
            dataset: s.stage,
            data: &s.query,
        })
        .collect();
    let eval = evaluate_stage(&ckpt.serving, &store, &queries, ckpt.stage)?;
    let gallery_sha256 = store.content_sha256();
    let (report_hash_ok, matches_report) = match fs::read(run_dir.join(&names.report)) {
        Ok(bytes) => {
            let report: RunReport = serde_json::from_slice(&bytes)?;
            let same = report.stages.last().map(|s| s.eval == eval).unwrap_or(false)
                && report.gallery_sha256 == gallery_sha256;
            (Some(report.verify_hash()), Some(same))
        }
        Err(_) => (None, None),
    };
    let summary = EvalSummary {
        stage: ckpt.stage,
        eval,
        gallery_sha256,
        report_hash_ok,
        matches_report,
    };
    let mut csv = String::from("dataset,stage,map,r1,evaluated,excluded\n");
    for d in &summary.eval.datasets {
        csv += &format!("{},{},{},{},{},{}\n", d.dataset, summary.stage, d.map, d.r1, d.evaluated, d.excluded);
    }
    write(run_dir, "eval.csv", csv)?;
    write(run_dir, "eval.json", json(&summary)?)?;
    Ok(summary)
}

/// Runs both theory sweeps; writes `theory.json`, `error_sweep.csv` and
/// `fusion_sweep.csv` when `out` is given.
pub fn cmd_theory(cfg: &SweepConfig, out: Option<&Path>) -> Result<TheoryReport, CliError> {
    let report = TheoryReport::run(cfg)?;
    if let Some(dir) = out {
        write(dir, "theory.json", json(&report)?)?;
        write(dir, "error_sweep.csv", report.error_csv())?;
        write(dir, "fusion_sweep.csv", report.fusion_csv())?;
    }
    Ok(report)
}

pub fn cmd_gradcheck(
    cfg: &GradSuiteConfig,
    components: &[Component],
    out: Option<&Path>,
) -> Result<Vec<CheckResult>, CliError> {
    let results = run_gradcheck(cfg, components)?;
    if let Some(dir) = out {
        write(dir, "gradcheck.json", json(&results)?)?;
    }
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub repeats: usize,
    pub embedder_params: usize,
    pub transfer_params: usize,
    /// Best-of-`repeats` wall time of re-embedding `n` raw inputs.
    pub reextract_secs: f64,
    /// Best-of-`repeats` wall time of `update_all` over `n` stored features.
    pub update_secs: f64,
    pub speedup: f64,
}

/// Times gallery maintenance by transfer against re-extraction with the deep
/// embedder profile.
pub fn cmd_bench(n: usize, repeats: usize, seed: u64, out: Option<&Path>) -> Result<BenchReport, CliError> {
    if n == 0 || repeats == 0 {
        return Err(CliError::Config("bench needs n >= 1 and repeats >= 1".into()));
    }
    let base = ExperimentConfig::default();
    let root = Rng::new(seed);
    let embedder = Embedder::new(
        &EmbedderConfig::deep(base.embedder.raw_dim, base.embedder.dim),
        &mut root.split_named("embedder"),
    );
    let bict = BictConfig {
        dim: base.embedder.dim,
        ..base.transfer.bict
    };
    let mut net = BiCTNetwork::new(&bict, Direction::Forward, 1, 2, &mut root.split_named("transfer"));
    net.set_mode(bicr_core::numkernel::Mode::Eval);
    let raw = root.split_named("raw").normal_matrix(n, base.embedder.raw_dim, 1.0);
    let mut store = GalleryStore::new(base.embedder.dim, 1)?;
    store.append_features(&embedder.forward(&raw)?, &vec![0; n], 1)?;

    let (mut reextract, mut update) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats {
        let clock = Instant::now();
        std::hint::black_box(embedder.forward(&raw)?);
        reextract = reextract.min(clock.elapsed().as_secs_f64());

        let mut s = store.clone();
        let clock = Instant::now();
        s.update_all(&net, 0.2, 2)?;
        update = update.min(clock.elapsed().as_secs_f64());
        std::hint::black_box(&s);
    }
    let report = BenchReport {
        n,
        repeats,
        embedder_params: embedder.num_params(),
        transfer_params: net.num_params(),
        reextract_secs: reextract,
        update_secs: update,
        speedup: reextract / update.max(f64::MIN_POSITIVE),
    };
    if let Some(dir) = out {
        write(dir, "bench.json", json(&report)?)?;
    }
    Ok(report)
}
