//! Noisy top-1 router over the expert pool.
//!
//! Logits per source token: w = h·W_r + ε ⊙ softplus(h·W_n), with ε drawn
//! i.i.d. standard normal during training and omitted entirely at inference.
//! Selection is a hard top-1 over the softmax-normalized logits; ties break
//! toward the lowest index. Selection indices are constants of the backward
//! pass — gradients reach the router only through the selected gate
//! probability.

use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::tape::{Result, Tape, VarId};
use crate::tensor::Tensor;

/// Routing and noise-scale projections, both d × N.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterParams {
    pub w_r: Tensor,
    pub w_n: Tensor,
    /// True in training, false at inference.
    pub noise_enabled: bool,
}

impl RouterParams {
    /// Zero-initialized router: uniform gates, softplus(0) noise scale.
    pub fn new(d_model: usize, n_experts: usize) -> Self {
        RouterParams {
            w_r: Tensor::zeros(vec![d_model, n_experts]),
            w_n: Tensor::zeros(vec![d_model, n_experts]),
            noise_enabled: true,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.w_r.shape[1]
    }

    /// Append one zero column to both projections (pool growth). The new
    /// expert starts from logit 0 against the veterans.
    pub fn grow(&mut self) {
        self.w_r = append_zero_column(&self.w_r);
        self.w_n = append_zero_column(&self.w_n);
    }
}

fn append_zero_column(t: &Tensor) -> Tensor {
    let (r, c) = t.rows_cols();
    let mut data = vec![0.0; r * (c + 1)];
    for i in 0..r {
        data[i * (c + 1)..i * (c + 1) + c].copy_from_slice(&t.data[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![r, c + 1], data)
}

/// Per-token routing outputs for one block.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    /// Pre-softmax logits, L × N.
    pub logits: Tensor,
    /// Softmax of the logits, L × N. Rows sum to 1.
    pub gate_probs: Tensor,
    /// Selected expert per token (|S| = 1).
    pub selected: Vec<usize>,
    /// Probability mass of the selected expert per token, in (0, 1].
    pub gate_value: Vec<f64>,
    /// The ε actually sampled, L × N; all zeros when noise is disabled.
    pub noise_draw: Tensor,
}

/// Tape handles for the differentiable parts of a routing decision.
pub struct RoutingNodes {
    pub logits: VarId,
    pub gate_probs: VarId,
}

/// w = h·W_r + ε ⊙ softplus(h·W_n). Returns the logits node plus the drawn
/// noise (zeros when `noise` is `None`).
pub fn compute_router_logits(
    tape: &mut Tape,
    h: VarId,
    w_r: VarId,
    w_n: VarId,
    noise: Option<&mut Rng>,
) -> Result<(VarId, Tensor)> {
    let clean = tape.matmul(h, w_r)?;
    let (tokens, n_experts) = tape.value(clean).rows_cols();
    match noise {
        Some(rng) => {
            let mut eps = Tensor::zeros(vec![tokens, n_experts]);
            for v in eps.data.iter_mut() {
                *v = rng::normal(rng);
            }
            let eps_id = tape.constant(eps.clone());
            let scale_raw = tape.matmul(h, w_n)?;
            let scale = tape.softplus(scale_raw)?;
            let noisy = tape.mul(eps_id, scale)?;
            let logits = tape.add(clean, noisy)?;
            Ok((logits, eps))
        }
        None => Ok((clean, Tensor::zeros(vec![tokens, n_experts]))),
    }
}

/// Hard top-1 per row of a probability matrix; lowest index wins ties.
pub fn select_expert(gate_probs: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (rows, cols) = gate_probs.rows_cols();
    let mut selected = Vec::with_capacity(rows);
    let mut gate_value = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &gate_probs.data[i * cols..(i + 1) * cols];
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        selected.push(best);
        gate_value.push(row[best]);
    }
    (selected, gate_value)
}

/// Full routing pass: logits, softmax gates, hard selection.
///
/// `pinned` overrides the argmax selection (used by gradient checking, where
/// finite-difference perturbations must not flip the routing).
pub fn route(
    tape: &mut Tape,
    h: VarId,
    w_r: VarId,
    w_n: VarId,
    noise: Option<&mut Rng>,
    pinned: Option<&[usize]>,
) -> Result<(RoutingDecision, RoutingNodes)> {
    let (logits, noise_draw) = compute_router_logits(tape, h, w_r, w_n, noise)?;
    let gate_probs = tape.softmax_last(logits)?;
    let probs = tape.value(gate_probs).clone();
    let (selected, gate_value) = match pinned {
        Some(sel) => {
            let (rows, cols) = probs.rows_cols();
            assert_eq!(sel.len(), rows, "pinned selection length mismatch");
            let gates = sel.iter().enumerate().map(|(i, &j)| probs.data[i * cols + j]).collect();
            (sel.to_vec(), gates)
        }
        None => select_expert(&probs),
    };
    let decision = RoutingDecision {
        logits: tape.value(logits).clone(),
        gate_probs: probs,
        selected,
        gate_value,
        noise_draw,
    };
    Ok((decision, RoutingNodes { logits, gate_probs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn routing_setup(
        tape: &mut Tape,
        h: Tensor,
        w_r: Tensor,
        w_n: Tensor,
    ) -> (VarId, VarId, VarId) {
        let h = tape.leaf(h);
        let w_r = tape.leaf(w_r);
        let w_n = tape.leaf(w_n);
        (h, w_r, w_n)
    }

    #[test]
    fn zero_projection_gives_zero_logits() {
        let mut tape = Tape::new();
        let (h, w_r, w_n) = routing_setup(
            &mut tape,
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 1.0, 2.0]),
            Tensor::zeros(vec![3, 4]),
            Tensor::zeros(vec![3, 4]),
        );
        let (logits, noise) = compute_router_logits(&mut tape, h, w_r, w_n, None).unwrap();
        assert!(tape.value(logits).data.iter().all(|&v| v == 0.0));
        assert!(noise.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_match_hand_matrix_product() {
        let mut tape = Tape::new();
        let (h, w_r, w_n) = routing_setup(
            &mut tape,
            Tensor::new(vec![1, 2], vec![1.0, 0.0]),
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            Tensor::zeros(vec![2, 2]),
        );
        let (logits, _) = compute_router_logits(&mut tape, h, w_r, w_n, None).unwrap();
        assert_eq!(tape.value(logits).data, vec![1.0, 2.0]);
    }

    #[test]
    fn noise_std_is_ln_two_with_zero_weights() {
        // With W_r = W_n = 0 the logit is ε·softplus(0) = ε·ln 2 per slot.
        let mut rng = stream(9, "noise", 0);
        let tokens = 50_000;
        let mut tape = Tape::new();
        let (h, w_r, w_n) = routing_setup(
            &mut tape,
            Tensor::zeros(vec![tokens, 2]),
            Tensor::zeros(vec![2, 2]),
            Tensor::zeros(vec![2, 2]),
        );
        let (logits, _) =
            compute_router_logits(&mut tape, h, w_r, w_n, Some(&mut rng)).unwrap();
        let data = &tape.value(logits).data;
        let n = data.len() as f64;
        let mean: f64 = data.iter().sum::<f64>() / n;
        let var: f64 = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = std::f64::consts::LN_2;
        assert!((var.sqrt() - target).abs() / target < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn top1_selection_and_ties() {
        let probs = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]);
        let (sel, gate) = select_expert(&probs);
        assert_eq!(sel, vec![1]);
        assert_eq!(gate, vec![0.5]);

        let single = Tensor::new(vec![1, 1], vec![1.0]);
        let (sel, gate) = select_expert(&single);
        assert_eq!(sel, vec![0]);
        assert_eq!(gate, vec![1.0]);

        let tie = Tensor::new(vec![1, 2], vec![0.5, 0.5]);
        let (sel, _) = select_expert(&tie);
        assert_eq!(sel, vec![0], "ties break toward the lowest index");
    }

    #[test]
    fn grow_appends_zero_columns() {
        let mut router = RouterParams::new(3, 2);
        router.w_r = Tensor::new(vec![3, 2], (0..6).map(f64::from).collect());
        router.grow();
        assert_eq!(router.w_r.shape, vec![3, 3]);
        for i in 0..3 {
            assert_eq!(router.w_r.data[i * 3 + 2], 0.0);
            assert_eq!(router.w_r.data[i * 3], (i * 2) as f64);
            assert_eq!(router.w_r.data[i * 3 + 1], (i * 2 + 1) as f64);
        }
    }
}
