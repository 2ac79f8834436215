//! Dataset dump format: one JSON header line, then one JSON record per
//! sample with base64-encoded little-endian f64 token arrays, shapes, the
//! per-sample seed, mask audit facts, and a content hash. `verify` re-derives
//! every record from its seed and compares hashes, naming the first bad
//! record.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;
use crate::scene::GridConfig;
use crate::tasks::{Featurizer, MaskAudit, SampleGen, TaskKind, TaskSample};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse at line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {index}: {reason}")]
    BadRecord { index: u64, reason: String },
    #[error("dataset header: {0}")]
    Header(String),
    #[error("data config: {0}")]
    Config(#[from] crate::tasks::DataError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub task: String,
    pub count: u64,
    pub master_seed: u64,
    pub grid: GridConfig,
    pub patch_cells: usize,
    pub d_model: usize,
    pub codebook_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayField {
    pub shape: Vec<usize>,
    pub data_b64: String,
}

impl ArrayField {
    fn from_tensor(t: &Tensor) -> Self {
        ArrayField {
            shape: t.shape.clone(),
            data_b64: base64::engine::general_purpose::STANDARD.encode(t.to_le_bytes()),
        }
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        let bytes = base64::engine::general_purpose::STANDARD.decode(&self.data_b64).ok()?;
        Tensor::from_le_bytes(self.shape.clone(), &bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: u64,
    pub task: String,
    pub sample_seed: u64,
    pub h: ArrayField,
    pub y: ArrayField,
    pub target: ArrayField,
    pub mask_audit: Option<MaskAudit>,
    pub sha256: String,
}

fn content_hash(sample: &TaskSample) -> String {
    let mut hasher = Sha256::new();
    hasher.update(sample.h_tokens.to_le_bytes());
    hasher.update(sample.y_tokens.to_le_bytes());
    hasher.update(sample.target_tokens.to_le_bytes());
    hex::encode(hasher.finalize())
}

fn record_seed(master_seed: u64, index: u64) -> u64 {
    rng::derive_seed(master_seed, "synth", index)
}

/// Mixture and IoU audit accumulated over a generated dataset.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditSummary {
    pub total: u64,
    pub kind_counts: BTreeMap<String, u64>,
    /// Highest object IoU among accepted random masks (must stay <= 0.3).
    pub max_random_iou: f64,
    pub polygons_checked: u64,
    pub polygons_bad: u64,
}

impl AuditSummary {
    fn absorb(&mut self, audit: &MaskAudit) {
        *self.kind_counts.entry(audit.kind.name().to_string()).or_insert(0) += 1;
        if audit.kind == crate::mask::MaskKind::Random {
            self.max_random_iou = self.max_random_iou.max(audit.max_object_iou);
        }
        if let Some(n) = audit.polygon_vertices {
            self.polygons_checked += 1;
            if n != crate::mask::IRREGULAR_POLYGON_POINTS || audit.polygon_simple != Some(true) {
                self.polygons_bad += 1;
            }
        }
    }

    pub fn kind_fraction(&self, kind: &str) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        *self.kind_counts.get(kind).unwrap_or(&0) as f64 / self.total as f64
    }
}

impl fmt::Display for AuditSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples: {}", self.total)?;
        for (kind, count) in &self.kind_counts {
            writeln!(
                f,
                "  {kind}: {count} ({:.4})",
                *count as f64 / self.total.max(1) as f64
            )?;
        }
        writeln!(f, "  max accepted random-mask IoU: {:.4}", self.max_random_iou)?;
        write!(f, "  irregular polygons checked: {} bad: {}", self.polygons_checked, self.polygons_bad)
    }
}

/// Generate `count` samples of `task` and write the dump file. Returns the
/// audit summary over the generated records.
pub fn write_dataset(
    path: &Path,
    gen: &SampleGen,
    task: TaskKind,
    count: u64,
    master_seed: u64,
    codebook_seed: u64,
) -> Result<AuditSummary, DatasetError> {
    let header = DatasetHeader {
        version: DATASET_VERSION,
        task: task.name().to_string(),
        count,
        master_seed,
        grid: *gen.grid(),
        patch_cells: gen.feat.patch,
        d_model: gen.feat.d_model,
        codebook_seed,
    };
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&header).expect("header serialize"));
    out.push('\n');

    let mut audit = AuditSummary::default();
    for index in 0..count {
        let sample_seed = record_seed(master_seed, index);
        let sample = gen.generate(task, sample_seed);
        if let Some(a) = &sample.mask_audit {
            audit.absorb(a);
        }
        audit.total += 1;
        let record = DatasetRecord {
            index,
            task: task.name().to_string(),
            sample_seed,
            h: ArrayField::from_tensor(&sample.h_tokens),
            y: ArrayField::from_tensor(&sample.y_tokens),
            target: ArrayField::from_tensor(&sample.target_tokens),
            mask_audit: sample.mask_audit.clone(),
            sha256: content_hash(&sample),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serialize"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(audit)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>), DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| DatasetError::Header("empty file".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|source| DatasetError::Parse { line: 1, source })?;
    if header.version != DATASET_VERSION {
        return Err(DatasetError::Header(format!("version {} unsupported", header.version)));
    }
    let mut records = Vec::with_capacity(header.count as usize);
    for (lineno, line) in lines {
        let rec: DatasetRecord = serde_json::from_str(line)
            .map_err(|source| DatasetError::Parse { line: lineno + 1, source })?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Re-derive every record from its seed and compare content hashes. Fails on
/// the first mismatching record.
pub fn verify_dataset(path: &Path) -> Result<AuditSummary, DatasetError> {
    let (header, records) = read_dataset(path)?;
    let task = TaskKind::parse(&header.task)
        .ok_or_else(|| DatasetError::Header(format!("unknown task {:?}", header.task)))?;
    let feat = Featurizer::new(header.grid, header.patch_cells, header.d_model, header.codebook_seed)?;
    let gen = SampleGen::new(feat);
    if records.len() as u64 != header.count {
        return Err(DatasetError::Header(format!(
            "header promises {} records, file holds {}",
            header.count,
            records.len()
        )));
    }
    let mut audit = AuditSummary::default();
    for (pos, rec) in records.iter().enumerate() {
        if rec.index != pos as u64 {
            return Err(DatasetError::BadRecord {
                index: rec.index,
                reason: format!("out-of-order record at position {pos}"),
            });
        }
        let expect_seed = record_seed(header.master_seed, rec.index);
        if rec.sample_seed != expect_seed {
            return Err(DatasetError::BadRecord { index: rec.index, reason: "seed mismatch".into() });
        }
        let sample = gen.generate(task, rec.sample_seed);
        let want = content_hash(&sample);
        if want != rec.sha256 {
            return Err(DatasetError::BadRecord {
                index: rec.index,
                reason: "content hash mismatch".into(),
            });
        }
        // decoded arrays must also equal the re-derived ones bit-for-bit
        let h = rec.h.to_tensor().ok_or_else(|| DatasetError::BadRecord {
            index: rec.index,
            reason: "h array undecodable".into(),
        })?;
        if h.data != sample.h_tokens.data {
            return Err(DatasetError::BadRecord {
                index: rec.index,
                reason: "h array differs from derivation".into(),
            });
        }
        if let Some(a) = &sample.mask_audit {
            audit.absorb(a);
        }
        audit.total += 1;
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen() -> SampleGen {
        let grid = GridConfig { height: 8, width: 8, channels: 3, max_objects: 3 };
        SampleGen::new(Featurizer::new(grid, 2, 16, 0xC0DE).unwrap())
    }

    #[test]
    fn write_then_verify_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ds.jsonl");
        let gen = small_gen();
        let audit = write_dataset(&path, &gen, TaskKind::MaskInpainting, 50, 3, 0xC0DE).unwrap();
        assert_eq!(audit.total, 50);
        let verified = verify_dataset(&path).unwrap();
        assert_eq!(verified.total, 50);
        assert!(verified.max_random_iou <= crate::mask::RANDOM_MASK_IOU_LIMIT);
    }

    #[test]
    fn tampered_record_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ds.jsonl");
        let gen = small_gen();
        write_dataset(&path, &gen, TaskKind::Grounding, 10, 4, 0xC0DE).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // corrupt record index 3 (line 5: header + records 0..=3)
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[4] = lines[4].replace("\"sha256\":\"", "\"sha256\":\"00");
        fs::write(&path, lines.join("\n")).unwrap();
        let err = verify_dataset(&path).unwrap_err();
        match err {
            DatasetError::BadRecord { index, .. } => assert_eq!(index, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rewriting_same_seed_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a.jsonl");
        let b = tmp.path().join("b.jsonl");
        let gen = small_gen();
        write_dataset(&a, &gen, TaskKind::Controllable, 20, 9, 0xC0DE).unwrap();
        write_dataset(&b, &gen, TaskKind::Controllable, 20, 9, 0xC0DE).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}
