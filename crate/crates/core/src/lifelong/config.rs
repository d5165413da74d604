use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, EmbedderConfig};
use crate::bict::BictConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numkernel::SgdConfig;
use crate::synthdata::StreamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Transfer and fuse historical features; raw inputs never revisited.
    Rfl,
    /// Re-extract every stored gallery input with the newest model.
    Reindex,
    /// Leave historical features untouched.
    Frozen,
    /// One model trained on the union of all stages seen so far.
    Joint,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [RunMode::Rfl, RunMode::Reindex, RunMode::Frozen, RunMode::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Rfl => "rfl",
            RunMode::Reindex => "reindex",
            RunMode::Frozen => "frozen",
            RunMode::Joint => "joint",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected rfl, reindex, frozen or joint)")))
    }
}

/// How the raw knowledge-change value in `[0, 2]` becomes a fusion weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonScale {
    Clamp,
    Halve,
}

impl EpsilonScale {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            EpsilonScale::Clamp => raw.min(1.0),
            EpsilonScale::Halve => raw / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub batch_ids: usize,
    pub batch_per_id: usize,
    pub bict: BictConfig,
    pub weights: LossWeights,
    /// Renormalize masked relation rows over different-identity entries only.
    pub renormalize: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            sgd: SgdConfig {
                lr: 0.03,
                decay_factor: 0.1,
                decay_epoch: 20,
                momentum: 0.0,
            },
            batch_ids: 16,
            batch_per_id: 4,
            bict: BictConfig::default(),
            weights: LossWeights::default(),
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub epsilon_scale: EpsilonScale,
    /// When false, historical features are replaced by the pure transfer
    /// output; model fusion is unaffected.
    pub feature_fusion: bool,
    /// Samples per affinity block when estimating the knowledge change.
    pub epsilon_batch: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            epsilon_scale: EpsilonScale::Clamp,
            feature_fusion: true,
            epsilon_batch: 64,
        }
    }
}

/// File names written by a run, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub report: String,
    pub metrics_csv: String,
    pub stages: String,
    pub gallery: String,
    pub checkpoint: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            report: "report.json".into(),
            metrics_csv: "metrics.csv".into(),
            stages: "stages.json".into(),
            gallery: "gallery.bin".into(),
            checkpoint: "checkpoint.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub stream: StreamConfig,
    pub embedder: EmbedderConfig,
    pub baseline: BaselineConfig,
    pub transfer: TransferConfig,
    pub fusion: FusionConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: RunMode::Rfl,
            stream: StreamConfig::default(),
            embedder: EmbedderConfig::default(),
            baseline: BaselineConfig::default(),
            transfer: TransferConfig::default(),
            fusion: FusionConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// A validation failure tied to a dotted key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

fn issue(path: &str, err: Error) -> ConfigIssue {
    let message = match err {
        Error::Config(m) => m,
        other => other.to_string(),
    };
    // sub-validators lead with the offending field name
    let field = message.split_whitespace().next().unwrap_or("").trim_end_matches(':');
    let path = if !field.is_empty() && field.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        format!("{path}.{field}")
    } else {
        path.to_string()
    };
    ConfigIssue { path, message }
}

impl ExperimentConfig {
    pub fn check(&self) -> std::result::Result<(), ConfigIssue> {
        let wrap = |path: &str, r: Result<()>| r.map_err(|e| issue(path, e));
        wrap("stream", self.stream.validate())?;
        wrap("embedder", self.embedder.validate())?;
        wrap("baseline", self.baseline.validate())?;
        wrap("baseline.sgd", self.baseline.sgd.validate())?;
        wrap("transfer.sgd", self.transfer.sgd.validate())?;
        wrap("transfer.weights", self.transfer.weights.validate())?;
        wrap("transfer.bict", self.transfer.bict.validate())?;
        let fail = |path: &str, message: String| {
            Err(ConfigIssue {
                path: path.into(),
                message,
            })
        };
        if self.embedder.raw_dim != self.stream.raw_dim {
            return fail(
                "embedder.raw_dim",
                format!("embedder.raw_dim {} differs from stream.raw_dim {}", self.embedder.raw_dim, self.stream.raw_dim),
            );
        }
        if self.transfer.bict.dim != self.embedder.dim {
            return fail(
                "transfer.bict.dim",
                format!("transfer.bict.dim {} differs from embedder.dim {}", self.transfer.bict.dim, self.embedder.dim),
            );
        }
        if self.transfer.batch_ids < 2 || self.transfer.batch_per_id < 2 {
            return fail(
                "transfer.batch_ids",
                format!(
                    "transfer batches need >= 2 identities with >= 2 samples, got {}x{}",
                    self.transfer.batch_ids, self.transfer.batch_per_id
                ),
            );
        }
        if self.fusion.epsilon_batch < 2 {
            return fail("fusion.epsilon_batch", format!("epsilon_batch must be >= 2, got {}", self.fusion.epsilon_batch));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|i| Error::Config(format!("{}: {}", i.path, i.message)))
    }

    /// Parses and validates; error messages name the offending line when possible.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.check().map_err(|i| match locate_key(src, &i.path) {
            Some(line) => Error::Config(format!("line {line}: {}: {}", i.path, i.message)),
            None => Error::Config(format!("{}: {}", i.path, i.message)),
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies overrides in order and validates the result once, so coupled
    /// fields such as the two raw widths can change together.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        let mut next = self.clone();
        for a in assignments {
            next.set_value(a.as_ref())?;
        }
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Applies a single `dotted.key=value` override; the value is parsed as a TOML
    /// literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        self.apply_overrides(&[assignment])
    }

    fn set_value(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), value.clone());
                break;
            }
            node = table
                .entry((*part).to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: Self = tree.try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("override {key:?}: {}", e.to_string().trim_end()))
        })?;
        *self = updated;
        Ok(())
    }
}

/// 1-based line of `path` in a TOML document, falling back to the nearest
/// enclosing table or inline-table key.
fn locate_key(src: &str, path: &str) -> Option<usize> {
    let mut parts: Vec<&str> = path.split('.').collect();
    while !parts.is_empty() {
        let want = parts.join(".");
        let mut table = String::new();
        for (n, line) in src.lines().enumerate() {
            let t = line.trim();
            if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
                table = h.trim().to_string();
                if table == want {
                    return Some(n + 1);
                }
                continue;
            }
            if let Some((k, _)) = t.split_once('=') {
                let k = k.trim();
                let full = if table.is_empty() { k.to_string() } else { format!("{table}.{k}") };
                if full == want {
                    return Some(n + 1);
                }
            }
        }
        parts.pop();
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_use_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 4\nmode = \"frozen\"\n[stream]\nstages = 3\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.mode, RunMode::Frozen);
        assert_eq!(cfg.stream.stages, 3);
        assert_eq!(cfg.stream.ids_per_stage, 50);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[stream]\nstagez = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn validation_errors_name_the_line() {
        let src = "seed = 1\n\n[transfer.weights]\nmu1 = 1.0\nmu2 = -2.0\n";
        let msg = ExperimentConfig::from_toml_str(src).unwrap_err().to_string();
        assert!(msg.contains("line 5") && msg.contains("mu2"), "{msg}");
        let msg = ExperimentConfig::from_toml_str("[stream]\nids_per_stage = 2\n").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("transfer.weights.mu3=0.5").unwrap();
        cfg.apply_override("mode=reindex").unwrap();
        cfg.apply_override("fusion.epsilon_scale=halve").unwrap();
        cfg.apply_override("stream.stages=2").unwrap();
        assert_eq!(cfg.transfer.weights.mu3, 0.5);
        assert_eq!(cfg.mode, RunMode::Reindex);
        assert_eq!(cfg.fusion.epsilon_scale, EpsilonScale::Halve);
        assert_eq!(cfg.stream.stages, 2);
        assert!(cfg.apply_override("stream.nope=1").is_err());
        assert!(cfg.apply_override("stream.stages=0").is_err());
        assert!(cfg.apply_override("novalue").is_err());
        assert!(cfg.apply_override("stream.raw_dim=24").is_err());
        cfg.apply_overrides(&["stream.raw_dim=24", "embedder.raw_dim=24"]).unwrap();
        assert_eq!(cfg.embedder.raw_dim, 24);
    }

    #[test]
    fn epsilon_scaling() {
        assert_eq!(EpsilonScale::Clamp.apply(1.4), 1.0);
        assert_eq!(EpsilonScale::Clamp.apply(0.3), 0.3);
        assert_eq!(EpsilonScale::Halve.apply(1.4), 0.7);
    }
}
