//! The progressive staged training loop.
//!
//! Five ordered stages grow the expert pool one expert at a time (pool size
//! = stage index + 1). During a stage only the newest expert and the router
//! train; veterans and — after stage 0 — the base attention weights stay
//! frozen byte-for-byte. Stage 0 doubles as base pretraining: there is no
//! pretrained backbone at this scale, so the base attention weights train
//! jointly with expert 0.
//!
//! The task objective is rectified-flow velocity matching: samples are noisy
//! interpolants x_u = (1-u)·z0 + u·z1 and the model's x-stream output is
//! regressed onto the constant velocity z1 - z0. The veteran routing loss is
//! added on the soft usage of the stage expert; the hard usage ratio is
//! reported in the metrics.
//!
//! A co-training baseline runs the same data budget with a single expert,
//! all tasks mixed, and every parameter trainable throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsRecord;
use crate::model::{ArchMode, Binding, ForwardOpts, LatentTriple, PrwModel};
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::router::RoutingDecision;
use crate::supervision::{
    expert_histogram, soft_usage, usage_ratio, veteran_loss, RoutingTrace, SupervisionConfig,
};
use crate::tape::{Tape, VarId};
use crate::tasks::{SampleGen, TaskKind, TaskSample};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage order violation: {0}")]
    StageOrder(String),
    #[error("non-finite {term} at step {step} (magnitude {magnitude})")]
    NonFiniteLoss { step: u64, term: &'static str, magnitude: f64 },
    #[error("tensor error at step {step}: {source}")]
    Tensor {
        step: u64,
        #[source]
        source: TensorError,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

/// One curriculum stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_index: usize,
    pub task: TaskKind,
    /// Target routing density of the stage expert.
    pub rho: f64,
    /// Veteran-loss weight.
    pub alpha: f64,
    pub learning_rate: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub lora_rank: usize,
    /// Defaults to 2 × lora_rank when omitted in configs.
    pub lora_alpha: f64,
}

impl StageConfig {
    pub fn supervision(&self) -> SupervisionConfig {
        SupervisionConfig { rho: self.rho, alpha: self.alpha }
    }

    pub fn validate(&self) -> Result<(), String> {
        SupervisionConfig { rho: self.rho, alpha: self.alpha }.validate()?;
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(format!("stage {}: iterations and batch_size must be > 0", self.stage_index));
        }
        if self.lora_rank == 0 {
            return Err(format!("stage {}: lora_rank must be > 0", self.stage_index));
        }
        Ok(())
    }
}

/// The canonical stage → task curriculum order.
pub const STAGE_TASKS: [TaskKind; 5] = [
    TaskKind::MaskInpainting,
    TaskKind::Grounding,
    TaskKind::Controllable,
    TaskKind::Customized,
    TaskKind::InstructionEdit,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainModeKind {
    Staged,
    Cotrain,
}

/// Model plus curriculum progress. Optimizer moments are not carried across
/// stages — each stage trains a different parameter set and starts Adam
/// fresh, which is also what makes resuming from a stage checkpoint exact.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PrwModel,
    pub completed_stages: Vec<StageConfig>,
    pub step_counter: u64,
    pub master_seed: u64,
    pub mode: TrainModeKind,
}

impl TrainState {
    pub fn new(model: PrwModel, master_seed: u64) -> Self {
        TrainState {
            model,
            completed_stages: Vec::new(),
            step_counter: 0,
            master_seed,
            mode: TrainModeKind::Staged,
        }
    }
}

/// One rectified-flow training sample: endpoints, time, and conditioning.
#[derive(Debug, Clone)]
pub struct FlowSample {
    /// Clean target tokens.
    pub z1: Tensor,
    /// Standard-normal noise tokens.
    pub z0: Tensor,
    /// Interpolant time in (0, 1).
    pub u: f64,
    /// Condition tokens with the time slot filled.
    pub y: Tensor,
    /// Source tokens.
    pub h: Tensor,
}

impl FlowSample {
    /// x_u = (1-u)·z0 + u·z1.
    pub fn interpolant(&self) -> Tensor {
        let data = self
            .z0
            .data
            .iter()
            .zip(&self.z1.data)
            .map(|(&a, &b)| (1.0 - self.u) * a + self.u * b)
            .collect();
        Tensor::new(self.z1.shape.clone(), data)
    }

    /// Target velocity z1 - z0.
    pub fn velocity(&self) -> Tensor {
        let data = self.z0.data.iter().zip(&self.z1.data).map(|(&a, &b)| b - a).collect();
        Tensor::new(self.z1.shape.clone(), data)
    }

    /// Draw (z0, u) for a task sample and stamp the time token. Times are
    /// drawn as the square of a uniform draw: low-u interpolants carry
    /// little of the target, so the conditional (h, y) pathways — where the
    /// tasks actually differ — dominate the objective.
    pub fn from_task_sample(sample: &TaskSample, gen: &SampleGen, flow_rng: &mut Rng) -> Self {
        let mut z0 = Tensor::zeros(sample.target_tokens.shape.clone());
        rng::fill_normal(flow_rng, &mut z0.data, 1.0);
        let raw = rng::uniform(flow_rng);
        let u = (raw * raw).clamp(1e-3, 1.0 - 1e-3);
        let mut y = sample.y_tokens.clone();
        gen.feat.apply_time(&mut y, u);
        FlowSample { z1: sample.target_tokens.clone(), z0, u, y, h: sample.h_tokens.clone() }
    }
}

/// Forward one flow sample and return the velocity-MSE node plus the block
/// routing records.
pub fn flow_matching_loss(
    tape: &mut Tape,
    model: &PrwModel,
    bind: &Binding,
    sample: &FlowSample,
    noise: Option<&mut Rng>,
    mode: ArchMode,
) -> crate::tape::Result<(VarId, Vec<crate::model::BlockRouting>)> {
    let triple = LatentTriple { x: sample.interpolant(), y: sample.y.clone(), h: sample.h.clone() };
    let opts = ForwardOpts { noise, pinned: None, mode };
    let (out, traces) = model.forward_on_tape(tape, bind, &triple, opts)?;
    let target = tape.constant(sample.velocity());
    let loss = tape.mse(out.x, target)?;
    Ok((loss, traces))
}

/// Append one expert per block (zero residual, zero router columns) and
/// freeze all veterans. The pool must currently hold exactly `stage_index`
/// experts — stages may be neither skipped nor repeated.
pub fn grow_expert_pool(state: &mut TrainState, cfg: &StageConfig) -> Result<(), TrainError> {
    let pool = state.model.n_experts();
    if pool != cfg.stage_index {
        return Err(TrainError::StageOrder(format!(
            "pool holds {pool} experts, stage {} expects {}",
            cfg.stage_index, cfg.stage_index
        )));
    }
    let mut grow_rng = rng::stream(state.master_seed, "grow", cfg.stage_index as u64);
    state.model.grow_pool(cfg.lora_rank, cfg.lora_alpha, &mut grow_rng);
    Ok(())
}

fn trainable_policy(
    model: &PrwModel,
    stage_index: usize,
    mode: TrainModeKind,
) -> impl Fn(&str) -> bool + 'static {
    let mut frozen = std::collections::BTreeSet::new();
    model.visit_params(&mut |name, _| {
        if model.is_frozen_expert(name) {
            frozen.insert(name.to_string());
        }
    });
    let base_plastic = match mode {
        TrainModeKind::Cotrain => true,
        // the backbone is fine-tuned at every stage (there is no pretrained
        // base at this scale); only veteran experts freeze
        TrainModeKind::Staged => {
            let _ = stage_index;
            std::env::var("PRW_FREEZE_BASE_AFTER")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .map(|k| stage_index <= k)
                .unwrap_or(true)
        }
    };
    move |name: &str| {
        if name.contains(".router.") {
            return true;
        }
        if name.contains(".expert") {
            return !frozen.contains(name);
        }
        base_plastic
    }
}

/// Data/noise/flow seeds for one (stage, step, sample) coordinate.
fn sample_seed(master: u64, tag: &str, stage: usize, step: u64, i: usize) -> u64 {
    rng::derive_seed(master, tag, (stage as u64) << 48 | step << 8 | i as u64)
}

struct StepOutcome {
    l_task: f64,
    l_veteran: f64,
    u_hard: f64,
    u_soft: f64,
    histogram: Vec<f64>,
}

/// One optimizer step over a batch. Mixed-task batches pass `task = None`.
fn train_step(
    state: &mut TrainState,
    cfg: &StageConfig,
    gen: &SampleGen,
    opt: &mut Adam,
    step_in_stage: u64,
    task: Option<TaskKind>,
) -> Result<StepOutcome, TrainError> {
    let step = state.step_counter;
    let stage = cfg.stage_index;
    let sup = cfg.supervision();
    let stage_expert = state.model.n_experts() - 1;
    let terr = |source| TrainError::Tensor { step, source };

    let mut tape = Tape::new();
    let policy = trainable_policy(&state.model, stage, state.mode);
    let bind = state.model.bind(&mut tape, &policy);

    let mut losses = Vec::with_capacity(cfg.batch_size);
    let mut probs_nodes = Vec::new();
    let mut decisions: Vec<RoutingDecision> = Vec::new();
    for i in 0..cfg.batch_size {
        let data_seed = sample_seed(state.master_seed, "data", stage, step_in_stage, i);
        let sample = match task {
            Some(t) => gen.generate(t, data_seed),
            None => gen.generate_mixed(data_seed),
        };
        let mut flow_rng = rng::stream(
            sample_seed(state.master_seed, "flow", stage, step_in_stage, i),
            "flow",
            0,
        );
        let fs = FlowSample::from_task_sample(&sample, gen, &mut flow_rng);
        let mut noise_rng = rng::stream(
            sample_seed(state.master_seed, "noise", stage, step_in_stage, i),
            "noise",
            0,
        );
        let (loss, traces) =
            flow_matching_loss(&mut tape, &state.model, &bind, &fs, Some(&mut noise_rng), ArchMode::Prw)
                .map_err(terr)?;
        losses.push(loss);
        for t in traces {
            probs_nodes.push(t.probs_node);
            decisions.push(t.decision);
        }
    }

    let l_task = tape.mean_of(&losses).map_err(terr)?;
    let u_soft = soft_usage(&mut tape, &probs_nodes, stage_expert).map_err(terr)?;
    let l_vet = veteran_loss(&mut tape, u_soft, &sup).map_err(terr)?;
    let total = crate::supervision::total_loss(&mut tape, l_task, l_vet).map_err(terr)?;

    let l_task_v = tape.value(l_task).item();
    let l_vet_v = tape.value(l_vet).item();
    for (term, v) in [("task loss", l_task_v), ("veteran loss", l_vet_v)] {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, term, magnitude: v });
        }
    }

    let mut grads = tape.backward(total).map_err(terr)?;
    let mut grad_map: std::collections::BTreeMap<String, Vec<f64>> = std::collections::BTreeMap::new();
    for (name, &id) in bind.iter() {
        if let Some(g) = grads.take(id) {
            grad_map.insert(name.clone(), g);
        }
    }
    opt.begin_step();
    state.model.visit_params_mut(&mut |name, t| {
        if let Some(g) = grad_map.remove(name) {
            opt.update(name, &mut t.data, &g);
        }
    });
    debug_assert!(grad_map.is_empty(), "unapplied gradients: {:?}", grad_map.keys());

    let refs: Vec<&RoutingDecision> = decisions.iter().collect();
    let trace = RoutingTrace::new(decisions.clone(), stage_expert);
    let outcome = StepOutcome {
        l_task: l_task_v,
        l_veteran: l_vet_v,
        u_hard: usage_ratio(&trace).unwrap_or(0.0),
        u_soft: tape.value(u_soft).item(),
        histogram: expert_histogram(&refs, state.model.n_experts()),
    };
    state.step_counter += 1;
    Ok(outcome)
}

/// Run one stage: `grow_expert_pool` must already have been applied (stage 0
/// starts with the pool of one). Emits one metrics record per step and calls
/// the mid-stage hook every `checkpoint_every` steps when nonzero.
pub fn train_stage(
    state: &mut TrainState,
    cfg: &StageConfig,
    gen: &SampleGen,
    metrics: &mut dyn FnMut(MetricsRecord),
    checkpoint_every: u64,
    mid_checkpoint: &mut dyn FnMut(&TrainState, u64),
) -> Result<(), TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if state.model.n_experts() != cfg.stage_index + 1 {
        return Err(TrainError::StageOrder(format!(
            "stage {} requires pool size {}, found {}",
            cfg.stage_index,
            cfg.stage_index + 1,
            state.model.n_experts()
        )));
    }
    state.model.set_noise_enabled(true);
    let mut opt = Adam::new(cfg.learning_rate);
    let task = match state.mode {
        TrainModeKind::Staged => Some(cfg.task),
        TrainModeKind::Cotrain => None,
    };
    for step_in_stage in 0..cfg.iterations {
        let t0 = std::time::Instant::now();
        let out = train_step(state, cfg, gen, &mut opt, step_in_stage, task)?;
        metrics(MetricsRecord {
            step: state.step_counter - 1,
            stage: cfg.stage_index,
            l_task: out.l_task,
            l_veteran: out.l_veteran,
            u_hard: out.u_hard,
            u_soft: out.u_soft,
            expert_histogram: out.histogram,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if checkpoint_every > 0 && (step_in_stage + 1) % checkpoint_every == 0 {
            mid_checkpoint(state, step_in_stage + 1);
        }
    }
    state.model.set_noise_enabled(false);
    state.completed_stages.push(cfg.clone());
    Ok(())
}

/// Validate the canonical curriculum: indices 0..n in order, tasks matching
/// the stage/task mapping.
pub fn validate_curriculum(stages: &[StageConfig]) -> Result<(), TrainError> {
    if stages.is_empty() || stages.len() > STAGE_TASKS.len() {
        return Err(TrainError::StageOrder(format!("{} stages (want 1..=5)", stages.len())));
    }
    for (i, s) in stages.iter().enumerate() {
        if s.stage_index != i {
            return Err(TrainError::StageOrder(format!(
                "stage at position {i} has index {}",
                s.stage_index
            )));
        }
        if s.task != STAGE_TASKS[i] {
            return Err(TrainError::StageOrder(format!(
                "stage {i} task {} does not match the curriculum ({})",
                s.task.name(),
                STAGE_TASKS[i].name()
            )));
        }
        s.validate().map_err(TrainError::Config)?;
    }
    Ok(())
}

/// Run the staged curriculum from wherever `state` left off: growth between
/// stages, a metrics stream, and a checkpoint sink called after every stage.
/// Resuming a loaded checkpoint with the same stage list reproduces the
/// remaining stages exactly.
pub fn run_curriculum(
    state: &mut TrainState,
    stages: &[StageConfig],
    gen: &SampleGen,
    metrics: &mut dyn FnMut(MetricsRecord),
    checkpoint_every: u64,
    stage_checkpoint: &mut dyn FnMut(&TrainState) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    validate_curriculum(stages)?;
    state.mode = TrainModeKind::Staged;
    let done = state.completed_stages.len();
    for cfg in stages.iter().skip(done) {
        if cfg.stage_index > 0 {
            grow_expert_pool(state, cfg)?;
        } else if state.model.n_experts() != 1 {
            return Err(TrainError::StageOrder("stage 0 expects a pool of one".into()));
        }
        let mut noop = |_: &TrainState, _: u64| {};
        train_stage(state, cfg, gen, metrics, checkpoint_every, &mut noop)?;
        stage_checkpoint(state)?;
    }
    Ok(())
}

/// The co-training baseline: one expert, mixed-task data, everything
/// trainable, same total step budget as the staged stages it mirrors.
pub fn run_cotrain(
    state: &mut TrainState,
    stages: &[StageConfig],
    gen: &SampleGen,
    metrics: &mut dyn FnMut(MetricsRecord),
) -> Result<(), TrainError> {
    validate_curriculum(stages)?;
    state.mode = TrainModeKind::Cotrain;
    if state.model.n_experts() != 1 {
        return Err(TrainError::StageOrder("co-training keeps a single expert".into()));
    }
    let total: u64 = stages.iter().map(|s| s.iterations).sum();
    let base = &stages[0];
    let merged = StageConfig {
        stage_index: 0,
        task: TaskKind::MaskInpainting, // unused: batches are mixed
        rho: 1.0,
        alpha: 0.0,
        learning_rate: base.learning_rate,
        iterations: total,
        batch_size: base.batch_size,
        lora_rank: base.lora_rank,
        lora_alpha: base.lora_alpha,
    };
    let mut noop = |_: &TrainState, _: u64| {};
    train_stage(state, &merged, gen, metrics, 0, &mut noop)
}
