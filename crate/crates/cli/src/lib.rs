//! `bicr`: generate streams, run lifelong experiments, re-evaluate persisted
//! galleries, and run the theory, gradient and efficiency checks.
//!
//! Exit codes: 0 success, 1 other runtime failure, 2 configuration error,
//! 3 training divergence, 4 failed verdict.

mod commands;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use bicr_core::evaltheory::{SweepConfig, Verdict};
use bicr_core::gradsuite::{Component, GradSuiteConfig};
use bicr_core::lifelong::RunMode;

pub use commands::{
    cmd_bench, cmd_eval, cmd_generate, cmd_gradcheck, cmd_run, cmd_theory, load_config, BenchReport, ConfigSource,
    EvalSummary, StreamSummary,
};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bicr", version, about = "Re-indexing-free lifelong retrieval experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, env = "BICR_SEED")]
    pub seed: Option<u64>,
    /// `dotted.key=value` override, applied after the file and the seed.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn source(&self) -> ConfigSource {
        ConfigSource {
            path: self.config.clone(),
            seed: self.seed,
            overrides: self.overrides.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic stream selected by the config.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a lifelong experiment and write its reports and gallery.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// rfl, reindex, frozen, joint or all; defaults to the config's mode.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a run directory from its persisted gallery and checkpoint.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Error-accumulation and fusion-weight sweeps.
    Theory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, env = "BICR_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        /// kernel, bict, bcd, bad or total; repeatable, all when omitted.
        #[arg(long)]
        component: Vec<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, env = "BICR_SEED", default_value_t = 0)]
        seed: u64,
        /// Corrupts one analytic coordinate per check.
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gallery update by transfer versus re-extraction with the deep embedder.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, env = "BICR_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_modes(arg: Option<&str>, default: RunMode) -> Result<Vec<RunMode>, CliError> {
    match arg {
        None => Ok(vec![default]),
        Some("all") => Ok(RunMode::ALL.to_vec()),
        Some(s) => s.parse::<RunMode>().map(|m| vec![m]).map_err(CliError::from),
    }
}

/// Runs a parsed command, printing a summary to stdout, and returns the exit code.
pub fn execute(cli: Cli) -> u8 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { config, out } => {
            let cfg = load_config(&config.source())?;
            for s in cmd_generate(&cfg, &out)? {
                println!(
                    "stage {}: {} train, {} gallery, {} query, {} identities",
                    s.stage, s.train, s.gallery, s.query, s.identities
                );
            }
        }
        Command::Run { config, mode, out } => {
            let cfg = load_config(&config.source())?;
            let modes = parse_modes(mode.as_deref(), cfg.mode)?;
            for r in cmd_run(&cfg, &modes, &out)? {
                println!(
                    "{:<8} seed {:<4} mean final mAP {:.4}  AF {}  closed raw reads {}  hash {}",
                    r.metrics.mode,
                    r.metrics.seed,
                    r.mean_final_map(),
                    r.metrics.af_map.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                    r.raw_closed_reads,
                    &r.hash[..16]
                );
            }
        }
        Command::Eval { out } => {
            let s = cmd_eval(&out)?;
            for d in &s.eval.datasets {
                println!("dataset {}: mAP {:.4}  R1 {:.4}  ({} queries)", d.dataset, d.map, d.r1, d.evaluated);
            }
            if s.report_hash_ok == Some(false) || s.matches_report == Some(false) {
                return Err(CliError::Verdict("evaluation does not reproduce report.json".into()));
            }
        }
        Command::Theory { trials, pairs, seed, out } => {
            let cfg = SweepConfig {
                trials,
                pairs: if trials == 0 { 0 } else { pairs },
                seed,
                ..SweepConfig::default()
            };
            let r = cmd_theory(&cfg, out.as_deref())?;
            println!(
                "error accumulation: {} ({} trials, min gap {:e})",
                r.error.verdict.as_str(),
                r.error.trials.len(),
                r.error.min_diff
            );
            println!("fusion weights: {} ({} pairs)", r.fusion.verdict.as_str(), r.fusion.pairs.len());
            if r.error.verdict == Verdict::Fail || r.fusion.verdict == Verdict::Fail {
                return Err(CliError::Verdict("theory sweep".into()));
            }
        }
        Command::Gradcheck {
            component,
            seeds,
            seed,
            inject_fault,
            out,
        } => {
            let components = component
                .iter()
                .map(|c| Component::parse(c))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = GradSuiteConfig {
                seeds,
                base_seed: seed,
                inject_fault,
                ..GradSuiteConfig::default()
            };
            let results = cmd_gradcheck(&cfg, &components, out.as_deref())?;
            for r in &results {
                println!(
                    "{:<7} {:<14} max rel-err {:.3e}  {}",
                    r.component.name(),
                    r.name,
                    r.max_rel_err,
                    if r.pass { "ok" } else { "FAIL" }
                );
            }
            let failed = results.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CliError::Verdict(format!("{failed} gradient checks above tolerance")));
            }
        }
        Command::Bench { n, repeats, seed, out } => {
            let r = cmd_bench(n, repeats, seed, out.as_deref())?;
            println!(
                "n {}: re-extraction {:.4}s, update_all {:.4}s, speedup {:.1}x ({} vs {} parameters)",
                r.n, r.reextract_secs, r.update_secs, r.speedup, r.embedder_params, r.transfer_params
            );
        }
    }
    Ok(())
}
