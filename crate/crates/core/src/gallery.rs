//! Versioned gallery feature store.
//!
//! Holds only fp32 feature vectors and their bookkeeping. Raw inputs never
//! enter the store, so nothing of a closed stage can be re-extracted through it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bict::{BiCTNetwork, Direction};
use crate::error::{dim_err, Error, Result};
use crate::numkernel::ops::{normalize_rows, DEGENERATE_NORM};
use crate::numkernel::Matrix;

pub const MAGIC: &[u8; 8] = b"BICRGAL1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8;
/// Rows pushed through the transfer network at once during [`GalleryStore::update_all`].
const UPDATE_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryRecord {
    pub entry_id: u64,
    /// Ground-truth label, used only by evaluation.
    pub identity: u32,
    pub origin_stage: u32,
    /// Stage whose feature space the vector currently lives in.
    pub space_version: u32,
    pub feature: Vec<f32>,
}

/// One entry of a ranked list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub entry_id: u64,
    pub identity: u32,
    pub origin_stage: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryStore {
    dim: usize,
    current_version: u32,
    records: Vec<GalleryRecord>,
    next_id: u64,
}

impl GalleryStore {
    pub fn new(dim: usize, current_version: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("gallery feature width must be positive".into()));
        }
        Ok(Self {
            dim,
            current_version,
            records: Vec::new(),
            next_id: 0,
        })
    }

    /// Builds a store from existing records, checking every record invariant.
    pub fn from_records(dim: usize, current_version: u32, records: Vec<GalleryRecord>) -> Result<Self> {
        let mut store = Self::new(dim, current_version)?;
        let mut seen = std::collections::HashSet::with_capacity(records.len());
        for r in &records {
            store.check_record(r).map_err(Error::Config)?;
            if !seen.insert(r.entry_id) {
                return Err(Error::Config(format!("duplicate entry_id {}", r.entry_id)));
            }
        }
        store.next_id = records.iter().map(|r| r.entry_id + 1).max().unwrap_or(0);
        store.records = records;
        Ok(store)
    }

    fn check_record(&self, r: &GalleryRecord) -> std::result::Result<(), String> {
        if r.feature.len() != self.dim {
            return Err(format!("entry {}: {} values, expected {}", r.entry_id, r.feature.len(), self.dim));
        }
        if r.space_version < r.origin_stage {
            return Err(format!(
                "entry {}: space_version {} precedes origin_stage {}",
                r.entry_id, r.space_version, r.origin_stage
            ));
        }
        if r.space_version > self.current_version {
            return Err(format!(
                "entry {}: space_version {} is ahead of store version {}",
                r.entry_id, r.space_version, self.current_version
            ));
        }
        if r.feature.iter().any(|v| !v.is_finite()) {
            return Err(format!("entry {}: non-finite feature value", r.entry_id));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn current_version(&self) -> u32 {
        self.current_version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[GalleryRecord] {
        &self.records
    }

    pub fn record(&self, entry_id: u64) -> Option<&GalleryRecord> {
        self.records.iter().find(|r| r.entry_id == entry_id)
    }

    /// True when every record lives in the store's current feature space.
    pub fn is_uniform(&self) -> bool {
        self.records.iter().all(|r| r.space_version == self.current_version)
    }

    /// All features widened to fp64, in record order.
    pub fn feature_matrix(&self) -> Matrix {
        let data = self.records.iter().flat_map(|r| r.feature.iter().map(|&v| f64::from(v))).collect();
        Matrix::new(self.records.len(), self.dim, data).expect("record widths checked")
    }

    /// Appends features extracted at `stage`; returns the new entry ids.
    pub fn append_features(&mut self, features: &Matrix, identities: &[u32], stage: u32) -> Result<Vec<u64>> {
        if stage != self.current_version {
            return Err(Error::StaleStore {
                store: self.current_version,
                requested: stage,
            });
        }
        if features.cols() != self.dim || features.rows() != identities.len() {
            return Err(dim_err(
                "append_features",
                format!(
                    "{}x{} features with {} identities into width {}",
                    features.rows(),
                    features.cols(),
                    identities.len(),
                    self.dim
                ),
            ));
        }
        let mut rows = Vec::with_capacity(features.rows());
        for (row, &identity) in features.row_iter().zip(identities) {
            let feature: Vec<f32> = row.iter().map(|&v| v as f32).collect();
            if feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation("non-finite feature offered to the gallery".into()));
            }
            rows.push((identity, feature));
        }
        let ids: Vec<u64> = (self.next_id..self.next_id + rows.len() as u64).collect();
        for (&entry_id, (identity, feature)) in ids.iter().zip(rows) {
            self.records.push(GalleryRecord {
                entry_id,
                identity,
                origin_stage: stage,
                space_version: stage,
                feature,
            });
        }
        self.next_id += ids.len() as u64;
        Ok(ids)
    }

    fn check_step(&self, new_stage: u32) -> Result<()> {
        if self.current_version.checked_add(1) != Some(new_stage) {
            return Err(Error::SkippedStage {
                found: self.current_version,
                requested: new_stage,
            });
        }
        Ok(())
    }

    /// Replaces every historical feature with `ε·old + (1−ε)·θ̂(old)`, where `θ̂`
    /// is the transfer output rescaled to unit length, and moves the store to
    /// `new_stage`.
    pub fn update_all(&mut self, transfer: &BiCTNetwork, epsilon: f64, new_stage: u32) -> Result<()> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        if transfer.direction() != Direction::Forward {
            return Err(Error::Config("gallery updates need the forward transfer network".into()));
        }
        if transfer.dim() != self.dim {
            return Err(dim_err("update_all", format!("transfer width {} vs gallery {}", transfer.dim(), self.dim)));
        }
        self.check_step(new_stage)?;
        if let Some(r) = self.records.iter().find(|r| r.space_version + 1 != new_stage) {
            return Err(Error::SkippedStage {
                found: r.space_version,
                requested: new_stage,
            });
        }

        if epsilon < 1.0 {
            let mut updated = Vec::with_capacity(self.records.len());
            for chunk in self.records.chunks(UPDATE_CHUNK) {
                let data = chunk.iter().flat_map(|r| r.feature.iter().map(|&v| f64::from(v))).collect();
                let old = Matrix::new(chunk.len(), self.dim, data)?;
                let (moved, _) = normalize_rows(&transfer.transfer(&old)?)?;
                for (o, t) in old.row_iter().zip(moved.row_iter()) {
                    let fused: Vec<f32> = o
                        .iter()
                        .zip(t)
                        .map(|(&a, &b)| if epsilon == 0.0 { b as f32 } else { (epsilon * a + (1.0 - epsilon) * b) as f32 })
                        .collect();
                    if fused.iter().any(|v| !v.is_finite()) {
                        return Err(Error::TrainingDiverged("transfer produced a non-finite gallery feature".into()));
                    }
                    updated.push(fused);
                }
            }
            for (r, f) in self.records.iter_mut().zip(updated) {
                r.feature = f;
            }
        }
        for r in &mut self.records {
            r.space_version = new_stage;
        }
        self.current_version = new_stage;
        Ok(())
    }

    /// Moves the store to `new_stage` without touching any historical feature.
    /// Records keep the space version they were extracted in.
    pub fn advance_frozen(&mut self, new_stage: u32) -> Result<()> {
        self.check_step(new_stage)?;
        self.current_version = new_stage;
        Ok(())
    }

    /// Overwrites every feature, in record order, with a fresh extraction in the
    /// `new_stage` space. Only the re-indexing arm can produce such features.
    pub fn reextract_all(&mut self, features: &Matrix, new_stage: u32) -> Result<()> {
        self.check_step(new_stage)?;
        if features.rows() != self.records.len() || features.cols() != self.dim {
            return Err(dim_err(
                "reextract_all",
                format!("{}x{} for {} records of width {}", features.rows(), features.cols(), self.len(), self.dim),
            ));
        }
        for (r, row) in self.records.iter_mut().zip(features.row_iter()) {
            r.feature = row.iter().map(|&v| v as f32).collect();
            r.space_version = new_stage;
        }
        self.current_version = new_stage;
        Ok(())
    }

    /// Entries sorted by descending cosine similarity to `q`, ties by ascending entry id.
    pub fn rank_query(&self, q: &[f64]) -> Result<Vec<RankedEntry>> {
        if self.records.is_empty() {
            return Err(Error::EmptyGallery);
        }
        if q.len() != self.dim {
            return Err(dim_err("rank_query", format!("query width {} vs gallery {}", q.len(), self.dim)));
        }
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn < DEGENERATE_NORM {
            return Err(Error::DegenerateVector { op: "rank_query", norm: qn });
        }
        let mut out: Vec<RankedEntry> = self
            .records
            .iter()
            .map(|r| {
                let (mut d, mut n) = (0.0, 0.0);
                for (&a, &g) in q.iter().zip(&r.feature) {
                    let g = f64::from(g);
                    d += a * g;
                    n += g * g;
                }
                let score = if n > 0.0 { d / (qn * n.sqrt()) } else { 0.0 };
                RankedEntry {
                    entry_id: r.entry_id,
                    identity: r.identity,
                    origin_stage: r.origin_stage,
                    score,
                }
            })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.records.len() * (20 + 4 * self.dim));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.current_version.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&r.entry_id.to_le_bytes());
            buf.extend_from_slice(&r.identity.to_le_bytes());
            buf.extend_from_slice(&r.origin_stage.to_le_bytes());
            buf.extend_from_slice(&r.space_version.to_le_bytes());
            for v in &r.feature {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic = rd.take(8, "magic")?;
        if magic != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let version = rd.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(format_err(8, format!("unsupported format version {version}")));
        }
        let dim = rd.u32("feature width")? as usize;
        if dim == 0 {
            return Err(format_err(12, "feature width is zero"));
        }
        let current_version = rd.u32("store version")?;
        let count = rd.u64("record count")?;
        let record_len = 20 + 4 * dim as u64;
        let remaining = (bytes.len() - rd.pos) as u64;
        if count.checked_mul(record_len).is_none_or(|need| need > remaining) {
            return Err(format_err(
                bytes.len() as u64,
                format!("truncated: {count} records of {record_len} bytes need more than {remaining} remaining"),
            ));
        }
        let mut store = Self::new(dim, current_version)?;
        let mut seen = std::collections::HashSet::with_capacity(count as usize);
        for _ in 0..count {
            let start = rd.pos as u64;
            let entry_id = rd.u64("entry_id")?;
            let identity = rd.u32("identity")?;
            let origin_stage = rd.u32("origin_stage")?;
            let space_version = rd.u32("space_version")?;
            let mut feature = Vec::with_capacity(dim);
            for _ in 0..dim {
                feature.push(f32::from_le_bytes(rd.array("feature value")?));
            }
            let r = GalleryRecord {
                entry_id,
                identity,
                origin_stage,
                space_version,
                feature,
            };
            store.check_record(&r).map_err(|d| format_err(start, d))?;
            if !seen.insert(entry_id) {
                return Err(format_err(start, format!("duplicate entry_id {entry_id}")));
            }
            store.records.push(r);
        }
        if rd.pos != bytes.len() {
            return Err(format_err(rd.pos as u64, "trailing bytes after last record"));
        }
        store.next_id = store.records.iter().map(|r| r.entry_id + 1).max().unwrap_or(0);
        Ok(store)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 of the persisted byte form.
    pub fn content_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn format_err(offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(self.pos as u64, format!("truncated while reading {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice of length N"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}
