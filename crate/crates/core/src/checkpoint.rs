//! Checkpoint I/O: a JSON manifest (parameter names, shapes, element type,
//! content hashes, stage history, seed) plus one raw little-endian f64 file
//! per parameter array. Round-trips are bit-exact; hashes are verified on
//! load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, PrwModel};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::{StageConfig, TrainModeKind, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("content hash mismatch for {name}")]
    HashMismatch { name: String },
    #[error("parameter {name}: {reason}")]
    BadParam { name: String, reason: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CkptError + '_ {
    move |source| CkptError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

/// Pool build recipe: rank and alpha of each expert, in growth order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMeta {
    pub rank: usize,
    pub lora_alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub mode: TrainModeKind,
    pub master_seed: u64,
    pub step_counter: u64,
    pub model: ModelConfig,
    pub experts: Vec<ExpertMeta>,
    pub stage_history: Vec<StageConfig>,
    /// Per-block trainability flags of the expert pool.
    pub pool_trainable: Vec<Vec<bool>>,
    pub noise_enabled: bool,
    /// Documentation of the seed-derivation scheme: every generator is a
    /// named sub-stream of the master seed.
    pub rng_streams: Vec<String>,
    pub params: Vec<ParamEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<(), CkptError> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(io_err(&params_dir))?;

    let mut entries = Vec::new();
    let mut failure: Option<CkptError> = None;
    state.model.visit_params(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let bytes = t.to_le_bytes();
        let file = params_dir.join(format!("{name}.f64"));
        if let Err(e) = fs::write(&file, &bytes) {
            failure = Some(CkptError::Io { path: file, source: e });
            return;
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            dtype: "f64le".to_string(),
            sha256: sha256_hex(&bytes),
        });
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let experts = expert_recipe(state);
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        mode: state.mode,
        master_seed: state.master_seed,
        step_counter: state.step_counter,
        model: state.model.cfg.clone(),
        experts,
        stage_history: state.completed_stages.clone(),
        pool_trainable: state.model.blocks.iter().map(|b| b.pool.trainable.clone()).collect(),
        noise_enabled: state.model.blocks[0].router.noise_enabled,
        rng_streams: ["data", "noise", "init", "order", "flow", "grow", "pos", "codebook"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        params: entries,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

fn expert_recipe(state: &TrainState) -> Vec<ExpertMeta> {
    state.model.blocks[0]
        .pool
        .experts
        .iter()
        .map(|e| ExpertMeta { rank: e.rank, lora_alpha: e.scale * e.rank as f64 })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CkptError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CkptError::Incompatible(format!(
            "manifest version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Load and hash-verify a checkpoint, rebuilding the model structurally from
/// the manifest recipe and overwriting every parameter from its array file.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState, CkptError> {
    let manifest = read_manifest(dir)?;
    if manifest.experts.is_empty() {
        return Err(CkptError::Incompatible("checkpoint with an empty expert pool".into()));
    }

    let mut model =
        PrwModel::init(manifest.model.clone(), manifest.experts[0].rank, manifest.experts[0].lora_alpha);
    for meta in &manifest.experts[1..] {
        // values are overwritten below; the stream only shapes the pool
        let mut throwaway = rng::stream(0, "ckpt-rebuild", 0);
        model.grow_pool(meta.rank, meta.lora_alpha, &mut throwaway);
    }
    if manifest.pool_trainable.len() != model.blocks.len() {
        return Err(CkptError::Incompatible("pool_trainable/block count mismatch".into()));
    }
    for (block, flags) in model.blocks.iter_mut().zip(&manifest.pool_trainable) {
        if flags.len() != block.pool.len() {
            return Err(CkptError::Incompatible("pool_trainable/expert count mismatch".into()));
        }
        block.pool.trainable = flags.clone();
        block.router.noise_enabled = manifest.noise_enabled;
    }

    let params_dir = dir.join("params");
    let mut by_name: std::collections::BTreeMap<&str, &ParamEntry> =
        manifest.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut failure: Option<CkptError> = None;
    model.visit_params_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.remove(name) else {
            failure = Some(CkptError::BadParam { name: name.into(), reason: "missing from manifest".into() });
            return;
        };
        if entry.shape != t.shape {
            failure = Some(CkptError::BadParam {
                name: name.into(),
                reason: format!("shape {:?} vs model {:?}", entry.shape, t.shape),
            });
            return;
        }
        let file = params_dir.join(format!("{name}.f64"));
        let bytes = match fs::read(&file) {
            Ok(b) => b,
            Err(e) => {
                failure = Some(CkptError::Io { path: file, source: e });
                return;
            }
        };
        if sha256_hex(&bytes) != entry.sha256 {
            failure = Some(CkptError::HashMismatch { name: name.into() });
            return;
        }
        match Tensor::from_le_bytes(entry.shape.clone(), &bytes) {
            Some(loaded) => t.data = loaded.data,
            None => {
                failure = Some(CkptError::BadParam {
                    name: name.into(),
                    reason: "byte length does not match shape".into(),
                })
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(CkptError::BadParam {
            name: name.into(),
            reason: "listed in manifest but absent from model".into(),
        });
    }

    Ok(TrainState {
        model,
        completed_stages: manifest.stage_history,
        step_counter: manifest.step_counter,
        master_seed: manifest.master_seed,
        mode: manifest.mode,
    })
}

/// Hash-verify a checkpoint without keeping the model.
pub fn verify_checkpoint(dir: &Path) -> Result<Manifest, CkptError> {
    let manifest = read_manifest(dir)?;
    let params_dir = dir.join("params");
    for entry in &manifest.params {
        let file = params_dir.join(format!("{}.f64", entry.name));
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(CkptError::HashMismatch { name: entry.name.clone() });
        }
    }
    Ok(manifest)
}

/// Byte-level digest of every frozen expert array (freezing contract checks).
pub fn frozen_expert_digest(state: &TrainState) -> Vec<(String, String)> {
    let mut out = Vec::new();
    state.model.visit_params(&mut |name, t| {
        if state.model.is_frozen_expert(name) {
            out.push((name.to_string(), sha256_hex(&t.to_le_bytes())));
        }
    });
    out
}
