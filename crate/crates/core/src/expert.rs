//! Low-rank Key/Value-projection experts and the per-block expert pool.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

/// One parameter-efficient expert: rank-r factor pairs for the K and V
/// residuals. Up-projections start at zero so a fresh expert contributes
/// exactly nothing until trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowRankExpert {
    /// Down-projections, d × r.
    pub a_k: Tensor,
    pub a_v: Tensor,
    /// Up-projections, r × d. All-zero at creation.
    pub b_k: Tensor,
    pub b_v: Tensor,
    pub rank: usize,
    /// lora_alpha / rank.
    pub scale: f64,
}

impl LowRankExpert {
    pub fn new(d_model: usize, rank: usize, lora_alpha: f64, rng: &mut Rng) -> Self {
        assert!(rank >= 1 && rank <= d_model, "rank {rank} out of range for d={d_model}");
        let init = 1.0 / (d_model as f64).sqrt();
        LowRankExpert {
            a_k: Tensor::randn(vec![d_model, rank], init, rng),
            a_v: Tensor::randn(vec![d_model, rank], init, rng),
            b_k: Tensor::zeros(vec![rank, d_model]),
            b_v: Tensor::zeros(vec![rank, d_model]),
            rank,
            scale: lora_alpha / rank as f64,
        }
    }

    /// True while both up-projections are still all-zero (untrained).
    pub fn residual_is_zero(&self) -> bool {
        self.b_k.data.iter().all(|&v| v == 0.0) && self.b_v.data.iter().all(|&v| v == 0.0)
    }
}

/// The ordered pool of experts inside one attention block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertPool {
    pub experts: Vec<LowRankExpert>,
    /// Exactly the newest expert is trainable during a curriculum stage.
    pub trainable: Vec<bool>,
}

impl ExpertPool {
    pub fn new(first: LowRankExpert) -> Self {
        ExpertPool { experts: vec![first], trainable: vec![true] }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Append a fresh expert and make it the only trainable one.
    pub fn grow(&mut self, expert: LowRankExpert) {
        self.experts.push(expert);
        for t in self.trainable.iter_mut() {
            *t = false;
        }
        self.trainable.push(true);
    }
}
