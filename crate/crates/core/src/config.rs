//! Run configuration: versioned, human-readable TOML with explicit units in
//! field names. Unknown keys are hard errors — recipes must not silently
//! drift. Parse → serialize → parse is a fixed point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::scene::GridConfig;
use crate::tasks::{Featurizer, SampleGen, TaskKind};
use crate::trainer::{StageConfig, STAGE_TASKS};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field {path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("config version {found} (this build reads version {CONFIG_VERSION})")]
    Version { found: u32 },
}

fn invalid(path: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: String,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub stages: Vec<StageSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub grid_height_cells: usize,
    pub grid_width_cells: usize,
    pub patch_cells: usize,
    pub max_objects: usize,
    /// Fixed independently of the run seed so checkpoints stay readable
    /// under a different evaluation seed.
    pub codebook_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// 0 disables mid-stage checkpoints; stage-end checkpoints always write.
    pub checkpoint_every_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub samples_per_task: usize,
    pub eval_seed: u64,
    /// Seeds for the staged-vs-co-training study.
    pub study_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub stage_index: usize,
    pub task: String,
    pub rho: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub lora_rank: usize,
    /// Defaults to twice the rank.
    pub lora_alpha: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialize")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: self.version });
        }
        self.grid().validate().map_err(|r| invalid("data", r))?;
        let feat = self.featurizer().map_err(|e| invalid("data", e.to_string()))?;
        let mc = self.model_config_with(&feat);
        mc.validate().map_err(|r| invalid("model", r))?;
        if self.stages.is_empty() {
            return Err(invalid("stages", "at least one stage required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let path = format!("stages[{i}]");
            let task = TaskKind::parse(&s.task)
                .ok_or_else(|| invalid(&format!("{path}.task"), format!("unknown task {:?}", s.task)))?;
            if s.stage_index != i {
                return Err(invalid(&format!("{path}.stage_index"), "stages must be ordered 0.."));
            }
            if task != STAGE_TASKS[i] {
                return Err(invalid(
                    &format!("{path}.task"),
                    format!("stage {i} trains {}", STAGE_TASKS[i].name()),
                ));
            }
            self.stage_config(i).validate().map_err(|r| invalid(&path, r))?;
        }
        if self.eval.samples_per_task == 0 {
            return Err(invalid("eval.samples_per_task", "must be > 0"));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            height: self.data.grid_height_cells,
            width: self.data.grid_width_cells,
            channels: 3,
            max_objects: self.data.max_objects,
        }
    }

    pub fn featurizer(&self) -> Result<Featurizer, crate::tasks::DataError> {
        Featurizer::new(self.grid(), self.data.patch_cells, self.model.d_model, self.data.codebook_seed)
    }

    pub fn sample_gen(&self) -> Result<SampleGen, crate::tasks::DataError> {
        Ok(SampleGen::new(self.featurizer()?))
    }

    fn model_config_with(&self, feat: &Featurizer) -> ModelConfig {
        let (len_x, len_y, len_h) = feat.stream_lens();
        ModelConfig {
            d_model: self.model.d_model,
            n_blocks: self.model.n_blocks,
            n_heads: self.model.n_heads,
            len_x,
            len_y,
            len_h,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let feat = self.featurizer().map_err(|e| invalid("data", e.to_string()))?;
        Ok(self.model_config_with(&feat))
    }

    pub fn stage_config(&self, i: usize) -> StageConfig {
        let s = &self.stages[i];
        StageConfig {
            stage_index: s.stage_index,
            task: TaskKind::parse(&s.task).expect("validated"),
            rho: s.rho,
            alpha: s.alpha,
            learning_rate: s.learning_rate,
            iterations: s.iterations,
            batch_size: s.batch_size,
            lora_rank: s.lora_rank,
            lora_alpha: s.lora_alpha.unwrap_or(2.0 * s.lora_rank as f64),
        }
    }

    pub fn stage_configs(&self) -> Vec<StageConfig> {
        (0..self.stages.len()).map(|i| self.stage_config(i)).collect()
    }

    /// Desk-scale default: 8×8 grids, d=16 blocks, a five-stage curriculum
    /// small enough for test runs.
    pub fn toy_default() -> RunConfig {
        let stages = STAGE_TASKS
            .iter()
            .enumerate()
            .map(|(i, &task)| StageSection {
                stage_index: i,
                task: task.name().to_string(),
                rho: if i == 0 { 1.0 } else { 0.8 },
                alpha: if i == 0 { 0.0 } else { 0.5 },
                learning_rate: 3e-3,
                iterations: 150,
                batch_size: 4,
                lora_rank: 4,
                lora_alpha: None,
            })
            .collect();
        RunConfig {
            version: CONFIG_VERSION,
            seed: 17,
            output_dir: "runs/toy".to_string(),
            model: ModelSection { d_model: 16, n_blocks: 2, n_heads: 2 },
            data: DataSection {
                grid_height_cells: 8,
                grid_width_cells: 8,
                patch_cells: 2,
                max_objects: 3,
                codebook_seed: 0xC0DE,
            },
            train: TrainSection { checkpoint_every_steps: 0 },
            eval: EvalSection {
                samples_per_task: 64,
                eval_seed: 9090,
                study_seeds: vec![11, 22, 33, 44, 55],
            },
            stages,
        }
    }
}
