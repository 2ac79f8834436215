//! Adaptive-moment optimizer over named parameter groups.

use std::collections::BTreeMap;

/// Adam with bias correction and no schedule. Moment buffers are keyed by
/// parameter name; callers drive updates in a fixed name order, so training
/// is deterministic.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the step counter; call once per optimizer step, before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter in place with its gradient.
    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len(), "gradient length mismatch for {name}");
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
