//! Veteran-gate routing supervision.
//!
//! Aggregates routing decisions across blocks into the usage ratio of the
//! stage's newest expert, and turns deviation from the target density into a
//! loss. The hard ratio (an indicator average) is reported as a metric; the
//! gradient path uses the soft surrogate — the mean gate probability of the
//! supervised expert — which coincides with the hard ratio in the one-hot
//! limit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::router::RoutingDecision;
use crate::tape::{Result as TapeResult, Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("usage ratio over an empty trace")]
    EmptyTrace,
    #[error("non-finite loss input: {0}")]
    NonFinite(f64),
}

/// Target routing density and loss weight for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisionConfig {
    /// Desired usage fraction of the stage expert, in [0, 1].
    pub rho: f64,
    /// Loss weight, >= 0.
    pub alpha: f64,
}

impl SupervisionConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(format!("rho {} outside [0, 1]", self.rho));
        }
        if self.alpha < 0.0 {
            return Err(format!("alpha {} negative", self.alpha));
        }
        Ok(())
    }
}

/// Routing decisions of every block for one forward pass.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    pub per_block: Vec<RoutingDecision>,
    /// Index of the expert under supervision (the pool's newest).
    pub stage_expert: usize,
}

impl RoutingTrace {
    pub fn new(per_block: Vec<RoutingDecision>, stage_expert: usize) -> Self {
        RoutingTrace { per_block, stage_expert }
    }
}

/// Hard usage ratio: the fraction of routing decisions (over all blocks and
/// all tokens) that selected the stage expert.
pub fn usage_ratio(trace: &RoutingTrace) -> Result<f64, SupervisionError> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for block in &trace.per_block {
        for &sel in &block.selected {
            total += 1;
            hits += usize::from(sel == trace.stage_expert);
        }
    }
    if total == 0 {
        return Err(SupervisionError::EmptyTrace);
    }
    Ok(hits as f64 / total as f64)
}

/// Soft usage as plain data (reporting path): mean gate probability of the
/// stage expert over all blocks and tokens.
pub fn soft_usage_value(trace: &RoutingTrace) -> Result<f64, SupervisionError> {
    let mut total = 0usize;
    let mut acc = 0.0;
    for block in &trace.per_block {
        let (rows, cols) = block.gate_probs.rows_cols();
        for i in 0..rows {
            acc += block.gate_probs.data[i * cols + trace.stage_expert];
            total += 1;
        }
    }
    if total == 0 {
        return Err(SupervisionError::EmptyTrace);
    }
    Ok(acc / total as f64)
}

/// Fraction of decisions per expert, summing to 1.
pub fn expert_histogram(decisions: &[&RoutingDecision], n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_experts];
    let mut total = 0usize;
    for d in decisions {
        for &sel in &d.selected {
            counts[sel] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![0.0; n_experts];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Differentiable soft usage on the tape: mean over all gate-probability
/// columns of the stage expert.
pub fn soft_usage(
    tape: &mut Tape,
    probs_nodes: &[VarId],
    stage_expert: usize,
) -> TapeResult<VarId> {
    assert!(!probs_nodes.is_empty(), "soft usage over an empty trace");
    let mut cols = Vec::with_capacity(probs_nodes.len());
    for &p in probs_nodes {
        let (rows, _) = tape.value(p).rows_cols();
        cols.push(tape.gather_per_row(p, vec![stage_expert; rows])?);
    }
    let stacked = if cols.len() == 1 { cols[0] } else { tape.concat(0, &cols)? };
    tape.mean_all(stacked)
}

/// alpha * |u - rho| on the tape.
pub fn veteran_loss(tape: &mut Tape, usage: VarId, cfg: &SupervisionConfig) -> TapeResult<VarId> {
    let shifted = tape.scalar_add(usage, -cfg.rho)?;
    let dev = tape.abs(shifted)?;
    tape.scalar_mul(dev, cfg.alpha)
}

/// alpha * |u - rho| as a plain value (reporting path).
pub fn veteran_loss_value(usage: f64, cfg: &SupervisionConfig) -> f64 {
    cfg.alpha * (usage - cfg.rho).abs()
}

/// Total loss: task term plus veteran term. Both must be finite scalars.
pub fn total_loss(tape: &mut Tape, task: VarId, veteran: VarId) -> TapeResult<VarId> {
    tape.add(task, veteran)
}

/// Convenience for tests: build a one-block trace from raw probabilities.
pub fn trace_from_probs(probs: Vec<Tensor>, stage_expert: usize) -> RoutingTrace {
    let per_block = probs
        .into_iter()
        .map(|gate_probs| {
            let (selected, gate_value) = crate::router::select_expert(&gate_probs);
            let (r, c) = gate_probs.rows_cols();
            RoutingDecision {
                logits: Tensor::zeros(vec![r, c]),
                gate_probs,
                selected,
                gate_value,
                noise_draw: Tensor::zeros(vec![r, c]),
            }
        })
        .collect();
    RoutingTrace::new(per_block, stage_expert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn one_hot_probs(rows: &[usize], n: usize) -> Tensor {
        let mut data = vec![0.0; rows.len() * n];
        for (i, &j) in rows.iter().enumerate() {
            data[i * n + j] = 1.0;
        }
        Tensor::new(vec![rows.len(), n], data)
    }

    #[test]
    fn usage_ratio_counts_hard_decisions() {
        // 4 blocks x 2 tokens, stage expert selected in 6 of 8 decisions
        let n = 3;
        let trace = trace_from_probs(
            vec![
                one_hot_probs(&[2, 2], n),
                one_hot_probs(&[2, 0], n),
                one_hot_probs(&[2, 2], n),
                one_hot_probs(&[1, 2], n),
            ],
            2,
        );
        assert_eq!(usage_ratio(&trace).unwrap(), 0.75);

        let all = trace_from_probs(vec![one_hot_probs(&[1, 1], 2)], 1);
        assert_eq!(usage_ratio(&all).unwrap(), 1.0);

        let half = trace_from_probs(vec![one_hot_probs(&[1, 0], 2)], 1);
        assert_eq!(usage_ratio(&half).unwrap(), 0.5);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let trace = RoutingTrace::new(vec![], 0);
        assert!(matches!(usage_ratio(&trace), Err(SupervisionError::EmptyTrace)));
    }

    #[test]
    fn soft_usage_equals_hard_in_one_hot_limit() {
        let trace = trace_from_probs(vec![one_hot_probs(&[1, 1, 1], 2)], 1);
        assert_eq!(soft_usage_value(&trace).unwrap(), 1.0);
        assert_eq!(usage_ratio(&trace).unwrap(), 1.0);
    }

    #[test]
    fn uniform_gates_give_uniform_soft_usage() {
        let n = 5;
        let probs = Tensor::new(vec![4, n], vec![1.0 / n as f64; 4 * n]);
        let trace = trace_from_probs(vec![probs], n - 1);
        assert!((soft_usage_value(&trace).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn soft_hard_gap_is_bounded_by_gate_slack() {
        let mut r = rng::stream(77, "test", 0);
        for _ in 0..100 {
            let rows = 1 + rng::below(&mut r, 6);
            let n = 2 + rng::below(&mut r, 4);
            let mut logits = Tensor::zeros(vec![rows, n]);
            for v in logits.data.iter_mut() {
                *v = rng::normal(&mut r) * 2.0;
            }
            // softmax by hand
            let mut probs = logits.clone();
            for row in probs.data.chunks_exact_mut(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            let stage = n - 1;
            let trace = trace_from_probs(vec![probs], stage);
            let hard = usage_ratio(&trace).unwrap();
            let soft = soft_usage_value(&trace).unwrap();
            let max_slack = trace.per_block[0]
                .gate_value
                .iter()
                .map(|&g| 1.0 - g)
                .fold(0.0, f64::max);
            assert!(
                (soft - hard).abs() <= max_slack + 1e-12,
                "gap {} exceeds slack {max_slack}",
                (soft - hard).abs()
            );
        }
    }

    #[test]
    fn veteran_loss_values_match_by_hand() {
        let cfg = SupervisionConfig { rho: 0.8, alpha: 0.5 };
        assert!((veteran_loss_value(0.6, &cfg) - 0.1).abs() < 1e-15);
        assert_eq!(veteran_loss_value(0.8, &cfg), 0.0);
        let stage0 = SupervisionConfig { rho: 1.0, alpha: 0.0 };
        assert_eq!(veteran_loss_value(0.3, &stage0), 0.0);
    }

    #[test]
    fn total_loss_is_the_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.25));
        let b = tape.leaf(Tensor::scalar(0.1));
        let t = total_loss(&mut tape, a, b).unwrap();
        assert!((tape.value(t).item() - 0.35).abs() < 1e-15);
    }

    #[test]
    fn usage_ratio_is_permutation_invariant() {
        let n = 3;
        let blocks = vec![
            one_hot_probs(&[2, 0, 2], n),
            one_hot_probs(&[1, 2], n),
            one_hot_probs(&[2], n),
        ];
        let base = usage_ratio(&trace_from_probs(blocks.clone(), 2)).unwrap();
        // permute blocks
        let permuted = vec![blocks[2].clone(), blocks[0].clone(), blocks[1].clone()];
        assert_eq!(usage_ratio(&trace_from_probs(permuted, 2)).unwrap(), base);
        // permute tokens within a block
        let swapped = vec![
            one_hot_probs(&[2, 2, 0], n),
            one_hot_probs(&[2, 1], n),
            one_hot_probs(&[2], n),
        ];
        assert_eq!(usage_ratio(&trace_from_probs(swapped, 2)).unwrap(), base);
    }

    #[test]
    fn tape_soft_usage_matches_value_path() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![3, 2], vec![0.3, 1.0, -1.0, 0.2, 2.0, 1.5]));
        let probs = tape.softmax_last(logits).unwrap();
        let u = soft_usage(&mut tape, &[probs], 1).unwrap();
        let trace = trace_from_probs(vec![tape.value(probs).clone()], 1);
        assert!((tape.value(u).item() - soft_usage_value(&trace).unwrap()).abs() < 1e-15);
    }
}
