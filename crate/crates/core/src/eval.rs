//! Held-out evaluation and the staged-vs-co-training conflict study.
//!
//! Held-out loss is the rectified-flow velocity MSE over a fixed evaluation
//! set: per-sample seeds derive from the evaluation seed, and interpolant
//! times are stratified over (0, 1), so two evaluations of the same model
//! agree bit-for-bit. The duality study trains a staged model and an
//! equal-budget single-expert co-training baseline per seed and compares the
//! combined held-out loss across all five tasks.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::model::{ArchMode, LatentTriple, PrwModel};
use crate::rng;
use crate::supervision::{expert_histogram, soft_usage_value, usage_ratio, RoutingTrace};
use crate::tasks::{SampleGen, TaskKind};
use crate::tensor::Tensor;
use crate::trainer::{run_cotrain, run_curriculum, StageConfig, TrainError, TrainState};

/// Velocity MSE of one model on a fixed held-out set for one task.
pub fn held_out_task_loss(
    model: &PrwModel,
    gen: &SampleGen,
    task: TaskKind,
    n_samples: usize,
    eval_seed: u64,
) -> f64 {
    assert!(n_samples > 0);
    let mut acc = 0.0;
    for i in 0..n_samples {
        let sample_seed =
            rng::derive_seed(eval_seed, "eval-data", (task.index() as u64) << 32 | i as u64);
        let sample = gen.generate(task, sample_seed);
        let mut z0 = Tensor::zeros(sample.target_tokens.shape.clone());
        let mut zrng = rng::stream(eval_seed, "eval-z0", (task.index() as u64) << 32 | i as u64);
        rng::fill_normal(&mut zrng, &mut z0.data, 1.0);
        // stratified times with the training emphasis on low u, where the
        // conditional pathways carry the prediction
        let raw = (i as f64 + 0.5) / n_samples as f64;
        let u = raw * raw;

        let mut y = sample.y_tokens.clone();
        gen.feat.apply_time(&mut y, u);
        let x_u = Tensor::new(
            sample.target_tokens.shape.clone(),
            z0.data
                .iter()
                .zip(&sample.target_tokens.data)
                .map(|(&a, &b)| (1.0 - u) * a + u * b)
                .collect(),
        );
        let triple = LatentTriple { x: x_u, y, h: sample.h_tokens.clone() };
        let (out, _) = model.infer(&triple, ArchMode::Prw).expect("eval forward");
        let mut mse = 0.0;
        for (p, (&a, &b)) in out.x.data.iter().zip(z0.data.iter().zip(&sample.target_tokens.data)) {
            let v = b - a;
            mse += (p - v) * (p - v);
        }
        acc += mse / out.x.data.len() as f64;
    }
    acc / n_samples as f64
}

/// Per-task and combined held-out losses.
#[derive(Debug, Clone, Serialize)]
pub struct HeldOutReport {
    pub per_task: Vec<(String, f64)>,
    pub combined: f64,
}

pub fn held_out_report(
    model: &PrwModel,
    gen: &SampleGen,
    n_samples: usize,
    eval_seed: u64,
) -> HeldOutReport {
    let per_task: Vec<(String, f64)> = TaskKind::ALL
        .iter()
        .map(|&t| (t.name().to_string(), held_out_task_loss(model, gen, t, n_samples, eval_seed)))
        .collect();
    let combined = per_task.iter().map(|(_, l)| l).sum::<f64>() / per_task.len() as f64;
    HeldOutReport { per_task, combined }
}

fn build_state(cfg: &RunConfig, seed: u64) -> Result<(TrainState, SampleGen), TrainError> {
    let gen = cfg.sample_gen().map_err(|e| TrainError::Config(e.to_string()))?;
    let mut mc = cfg.model_config().map_err(|e| TrainError::Config(e.to_string()))?;
    mc.seed = seed;
    let stage0 = cfg.stage_config(0);
    let model = PrwModel::init(mc, stage0.lora_rank, stage0.lora_alpha);
    Ok((TrainState::new(model, seed), gen))
}

/// Train one staged model from scratch; metrics are discarded.
pub fn run_staged_once(
    cfg: &RunConfig,
    stages: &[StageConfig],
    seed: u64,
) -> Result<TrainState, TrainError> {
    let (mut state, gen) = build_state(cfg, seed)?;
    run_curriculum(&mut state, stages, &gen, &mut |_| {}, 0, &mut |_| Ok(()))?;
    Ok(state)
}

/// Train one co-training baseline from scratch; metrics are discarded.
pub fn run_cotrain_once(
    cfg: &RunConfig,
    stages: &[StageConfig],
    seed: u64,
) -> Result<TrainState, TrainError> {
    let (mut state, gen) = build_state(cfg, seed)?;
    run_cotrain(&mut state, stages, &gen, &mut |_| {})?;
    Ok(state)
}

#[derive(Debug, Clone, Serialize)]
pub struct DualitySeedOutcome {
    pub seed: u64,
    pub staged: HeldOutReport,
    pub cotrain: HeldOutReport,
    pub staged_wins: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub outcomes: Vec<DualitySeedOutcome>,
    pub wins: usize,
    pub total: usize,
}

/// Equal-budget staged vs co-training comparison across seeds. Runs are
/// independent, so they parallelize across seeds without affecting results.
pub fn duality_study(cfg: &RunConfig, seeds: &[u64]) -> Result<DualityReport, TrainError> {
    let stages = cfg.stage_configs();
    let gen = cfg.sample_gen().map_err(|e| TrainError::Config(e.to_string()))?;
    let n = cfg.eval.samples_per_task;
    let eval_seed = cfg.eval.eval_seed;

    let outcomes: Result<Vec<DualitySeedOutcome>, TrainError> = seeds
        .par_iter()
        .map(|&seed| {
            let staged_state = run_staged_once(cfg, &stages, seed)?;
            let cotrain_state = run_cotrain_once(cfg, &stages, seed)?;
            let staged = held_out_report(&staged_state.model, &gen, n, eval_seed);
            let cotrain = held_out_report(&cotrain_state.model, &gen, n, eval_seed);
            let staged_wins = staged.combined <= cotrain.combined;
            Ok(DualitySeedOutcome { seed, staged, cotrain, staged_wins })
        })
        .collect();
    let outcomes = outcomes?;
    let wins = outcomes.iter().filter(|o| o.staged_wins).count();
    Ok(DualityReport { total: outcomes.len(), wins, outcomes })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub combined_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
    pub best_value: f64,
}

fn best_point(points: &[SweepPoint]) -> f64 {
    points
        .iter()
        .min_by(|a, b| a.combined_loss.total_cmp(&b.combined_loss))
        .map(|p| p.value)
        .unwrap_or(f64::NAN)
}

/// Retrain tiny staged models across one hyperparameter axis and report the
/// combined held-out loss per setting. `apply` rewrites the stage list for a
/// given value.
fn sweep_axis(
    cfg: &RunConfig,
    parameter: &str,
    values: &[f64],
    seed: u64,
    apply: impl Fn(&mut Vec<StageConfig>, f64) + Sync,
) -> Result<SweepReport, TrainError> {
    let gen = cfg.sample_gen().map_err(|e| TrainError::Config(e.to_string()))?;
    let points: Result<Vec<SweepPoint>, TrainError> = values
        .par_iter()
        .map(|&v| {
            let mut stages = cfg.stage_configs();
            apply(&mut stages, v);
            let state = run_staged_once(cfg, &stages, seed)?;
            let report =
                held_out_report(&state.model, &gen, cfg.eval.samples_per_task, cfg.eval.eval_seed);
            Ok(SweepPoint { value: v, combined_loss: report.combined })
        })
        .collect();
    let points = points?;
    Ok(SweepReport { parameter: parameter.to_string(), best_value: best_point(&points), points })
}

/// Routing-density sweep over stages 1.. (stage 0 keeps rho = 1, alpha = 0).
pub fn rho_sweep(cfg: &RunConfig, values: &[f64], seed: u64) -> Result<SweepReport, TrainError> {
    sweep_axis(cfg, "rho", values, seed, |stages, v| {
        for s in stages.iter_mut().skip(1) {
            s.rho = v;
        }
    })
}

pub fn alpha_sweep(cfg: &RunConfig, values: &[f64], seed: u64) -> Result<SweepReport, TrainError> {
    sweep_axis(cfg, "alpha", values, seed, |stages, v| {
        for s in stages.iter_mut().skip(1) {
            s.alpha = v;
        }
    })
}

pub fn rank_sweep(cfg: &RunConfig, values: &[usize], seed: u64) -> Result<SweepReport, TrainError> {
    let as_f64: Vec<f64> = values.iter().map(|&r| r as f64).collect();
    sweep_axis(cfg, "rank", &as_f64, seed, |stages, v| {
        for s in stages.iter_mut() {
            s.lora_rank = v as usize;
            s.lora_alpha = 2.0 * v;
        }
    })
}

/// Outcome of the router-only supervision trial.
#[derive(Debug, Clone, Serialize)]
pub struct RouterTrialOutcome {
    /// Noise-free soft usage after every step (index = step count).
    pub trajectory: Vec<f64>,
    /// First step at which |soft - rho| dropped within tolerance, if any.
    pub converged_at: Option<u64>,
    pub final_soft_usage: f64,
}

/// Train only the router (everything else frozen, in fact absent) with the
/// veteran surrogate loss on fixed random inputs, and track the noise-free
/// soft usage of expert N-1.
pub fn router_supervision_trial(
    d_model: usize,
    n_experts: usize,
    tokens: usize,
    sup: &crate::supervision::SupervisionConfig,
    steps: u64,
    learning_rate: f64,
    tolerance: f64,
    seed: u64,
) -> RouterTrialOutcome {
    use crate::optim::Adam;
    use crate::router::route;
    use crate::supervision::{soft_usage, veteran_loss};
    use crate::tape::Tape;

    let mut init_rng = rng::stream(seed, "init", 0);
    let inputs = Tensor::randn(vec![tokens, d_model], 1.0, &mut init_rng);
    let mut w_r = Tensor::zeros(vec![d_model, n_experts]);
    let mut w_n = Tensor::zeros(vec![d_model, n_experts]);
    let stage_expert = n_experts - 1;

    let mut opt = Adam::new(learning_rate);
    let mut trajectory = Vec::with_capacity(steps as usize);
    let mut converged_at = None;
    for step in 0..steps {
        let mut tape = Tape::new();
        let h = tape.constant(inputs.clone());
        let wr_id = tape.leaf(w_r.clone().with_grad());
        let wn_id = tape.leaf(w_n.clone().with_grad());
        let mut noise = rng::stream(seed, "noise", step);
        let (_, nodes) = route(&mut tape, h, wr_id, wn_id, Some(&mut noise), None)
            .expect("router trial forward");
        let u = soft_usage(&mut tape, &[nodes.gate_probs], stage_expert).unwrap();
        let loss = veteran_loss(&mut tape, u, sup).unwrap();
        let mut grads = tape.backward(loss).expect("router trial backward");
        opt.begin_step();
        if let Some(g) = grads.take(wr_id) {
            opt.update("w_r", &mut w_r.data, &g);
        }
        if let Some(g) = grads.take(wn_id) {
            opt.update("w_n", &mut w_n.data, &g);
        }

        // deterministic (noise-free) readout
        let mut etape = Tape::new();
        let h = etape.constant(inputs.clone());
        let wr_id = etape.leaf(w_r.clone());
        let wn_id = etape.leaf(w_n.clone());
        let (_, nodes) = route(&mut etape, h, wr_id, wn_id, None, None).unwrap();
        let u = soft_usage(&mut etape, &[nodes.gate_probs], stage_expert).unwrap();
        let value = etape.value(u).item();
        trajectory.push(value);
        if converged_at.is_none() && (value - sup.rho).abs() <= tolerance {
            converged_at = Some(step + 1);
        }
    }
    let final_soft_usage = *trajectory.last().unwrap_or(&0.0);
    RouterTrialOutcome { trajectory, converged_at, final_soft_usage }
}

/// Routing statistics of a model over held-out data of each task: hard and
/// soft usage of the newest expert plus per-block selection histograms.
#[derive(Debug, Clone, Serialize)]
pub struct RouteStats {
    pub per_task: Vec<TaskRouteStats>,
    /// Experts whose overall utilization falls below 1%.
    pub underused_experts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskRouteStats {
    pub task: String,
    pub u_hard: f64,
    pub u_soft: f64,
    pub per_block_histogram: Vec<Vec<f64>>,
}

pub fn route_stats(
    model: &PrwModel,
    gen: &SampleGen,
    n_samples: usize,
    eval_seed: u64,
) -> RouteStats {
    let n_experts = model.n_experts();
    let stage_expert = n_experts - 1;
    let mut per_task = Vec::new();
    let mut overall = vec![0.0; n_experts];
    let mut overall_weight: f64 = 0.0;
    for &task in &TaskKind::ALL {
        let mut decisions_by_block: Vec<Vec<crate::router::RoutingDecision>> =
            vec![Vec::new(); model.cfg.n_blocks];
        for i in 0..n_samples {
            let sample_seed =
                rng::derive_seed(eval_seed, "route-data", (task.index() as u64) << 32 | i as u64);
            let sample = gen.generate(task, sample_seed);
            let mut y = sample.y_tokens.clone();
            gen.feat.apply_time(&mut y, 0.5);
            let triple = LatentTriple {
                x: sample.target_tokens.clone(),
                y,
                h: sample.h_tokens.clone(),
            };
            let (_, decisions) = model.infer(&triple, ArchMode::Prw).expect("route forward");
            for (b, d) in decisions.into_iter().enumerate() {
                decisions_by_block[b].push(d);
            }
        }
        let flat: Vec<crate::router::RoutingDecision> =
            decisions_by_block.iter().flatten().cloned().collect();
        let trace = RoutingTrace::new(flat, stage_expert);
        let per_block_histogram: Vec<Vec<f64>> = decisions_by_block
            .iter()
            .map(|ds| {
                let refs: Vec<&crate::router::RoutingDecision> = ds.iter().collect();
                expert_histogram(&refs, n_experts)
            })
            .collect();
        for hist in &per_block_histogram {
            for (e, &f) in hist.iter().enumerate() {
                overall[e] += f;
            }
            overall_weight += 1.0;
        }
        per_task.push(TaskRouteStats {
            task: task.name().to_string(),
            u_hard: usage_ratio(&trace).unwrap_or(0.0),
            u_soft: soft_usage_value(&trace).unwrap_or(0.0),
            per_block_histogram,
        });
    }
    let underused_experts = overall
        .iter()
        .enumerate()
        .filter(|(_, &f)| f / overall_weight.max(1.0) < 0.01)
        .map(|(e, _)| e)
        .collect();
    RouteStats { per_task, underused_experts }
}
