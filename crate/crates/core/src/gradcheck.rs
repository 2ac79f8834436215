//! Central finite-difference gradient checking.
//!
//! `finite_difference_gradient` is deliberately independent of the tape's
//! backward pass: it only calls the supplied scalar function, so it can serve
//! as the oracle for every analytic gradient in this crate.
//!
//! `model_gradcheck` compares analytic gradients of the total training loss
//! (task + veteran) against central differences for every trainable
//! parameter group. Routing selections are pinned from a reference forward
//! and the router noise is replayed from a fixed seed, so the loss is a
//! smooth deterministic function of the parameters.

use serde::Serialize;

use crate::model::{ForwardOpts, ArchMode, PrwModel};
use crate::rng;
use crate::supervision::{soft_usage, veteran_loss, SupervisionConfig};
use crate::tape::Tape;
use crate::tensor::TensorError;
use crate::trainer::FlowSample;

/// Central-difference estimate of df/dp for each coordinate of `params`:
/// (f(p + h·e_i) − f(p − h·e_i)) / (2h).
///
/// `f` must be deterministic in `params` (fix seeds and routing before
/// calling). `step` must be positive.
pub fn finite_difference_gradient<F>(mut f: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite differences need a positive step");
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work);
        work[i] = orig - step;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error between an analytic and a reference gradient entry.
/// The denominator floor keeps exact zero-vs-zero comparisons at 0.
pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(1e-8);
    (analytic - reference).abs() / denom
}

/// Worst relative error across a gradient vector.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| rel_err(a, r))
        .fold(0.0, f64::max)
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Group-level relative error: the worst absolute deviation normalized by
/// the group's gradient scale. Near-zero coordinates inside a group are
/// dominated by finite-difference roundoff (~1e-11 for f ~ 1, h = 1e-5), so
/// the scale of comparison is per group, not per coordinate.
pub fn group_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = linf(analytic).max(linf(reference)).max(1e-8);
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Acceptance threshold for analytic-vs-finite-difference agreement.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Default central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub n_params: usize,
    pub max_rel_err: f64,
    /// L-infinity norm of the veteran-loss share of the gradient
    /// (exactly zero when alpha = 0).
    pub veteran_grad_linf: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }

    pub fn worst_group(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn total_loss_parts(
    tape: &mut Tape,
    model: &PrwModel,
    bind: &crate::model::Binding,
    sample: &FlowSample,
    sup: &SupervisionConfig,
    noise_seed: u64,
    pinned: Option<&[Vec<usize>]>,
) -> Result<(crate::tape::VarId, crate::tape::VarId, Vec<Vec<usize>>), TensorError> {
    let mut noise_rng = rng::stream(noise_seed, "noise", 0);
    let triple = crate::model::LatentTriple {
        x: sample.interpolant(),
        y: sample.y.clone(),
        h: sample.h.clone(),
    };
    let opts = ForwardOpts { noise: Some(&mut noise_rng), pinned, mode: ArchMode::Prw };
    let (out, traces) = model.forward_on_tape(tape, bind, &triple, opts)?;
    let target = tape.constant(sample.velocity());
    let task = tape.mse(out.x, target)?;
    let probs: Vec<_> = traces.iter().map(|t| t.probs_node).collect();
    let stage_expert = model.n_experts() - 1;
    let u = soft_usage(tape, &probs, stage_expert)?;
    let vet = veteran_loss(tape, u, sup)?;
    let selections = traces.into_iter().map(|t| t.decision.selected).collect();
    Ok((task, vet, selections))
}

/// Analytic vs finite-difference gradients of the total loss for every
/// trainable parameter group. `corrupt` multiplies the analytic gradient of
/// the named group by 1.5 before comparison — a negative-control fixture for
/// tests of this harness itself.
pub fn model_gradcheck(
    model: &PrwModel,
    sample: &FlowSample,
    sup: &SupervisionConfig,
    step: f64,
    noise_seed: u64,
    trainable: &dyn Fn(&str) -> bool,
    corrupt: Option<&str>,
) -> Result<GradcheckReport, TensorError> {
    assert!(model.cfg.d_model <= 16, "gradient checking is restricted to d_model <= 16");

    // reference forward: free routing fixes the selections for every eval
    let pinned: Vec<Vec<usize>> = {
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, &|_| false);
        let (_, _, sel) = total_loss_parts(&mut tape, model, &bind, sample, sup, noise_seed, None)?;
        sel
    };

    // analytic gradients at the reference point
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, trainable);
    let (task, vet, _) =
        total_loss_parts(&mut tape, model, &bind, sample, sup, noise_seed, Some(&pinned))?;
    let total = tape.add(task, vet)?;
    let mut total_grads = tape.backward(total)?;
    let mut vet_grads = tape.backward(vet)?;

    let mut groups = Vec::new();
    let names: Vec<String> = {
        let mut v = Vec::new();
        model.visit_params(&mut |name, _| {
            if trainable(name) {
                v.push(name.to_string());
            }
        });
        v
    };
    for name in names {
        let id = bind.id(&name);
        let mut analytic =
            total_grads.take(id).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]);
        let veteran_grad_linf = vet_grads
            .take(id)
            .map(|g| g.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
            .unwrap_or(0.0);
        if corrupt == Some(name.as_str()) {
            for g in analytic.iter_mut() {
                *g *= 1.5;
            }
        }

        let base = tape.value(id).data.clone();
        let f = |params: &[f64]| -> f64 {
            let mut probe = model.clone();
            probe.visit_params_mut(&mut |n, t| {
                if n == name {
                    t.data.copy_from_slice(params);
                }
            });
            let mut ftape = Tape::new();
            let fbind = probe.bind(&mut ftape, &|_| false);
            let (task, vet, _) =
                total_loss_parts(&mut ftape, &probe, &fbind, sample, sup, noise_seed, Some(&pinned))
                    .expect("gradcheck eval forward");
            ftape.value(task).item() + ftape.value(vet).item()
        };
        let reference = finite_difference_gradient(f, &base, step);
        groups.push(GroupReport {
            name,
            n_params: base.len(),
            max_rel_err: group_rel_err(&analytic, &reference),
            veteran_grad_linf,
        });
    }

    let max = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { groups, max_rel_err: max, threshold: GRADCHECK_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope_at_three() {
        let g = finite_difference_gradient(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8, "{}", g[0]);
    }

    #[test]
    fn softplus_slope_at_zero_is_half() {
        let f = |p: &[f64]| p.iter().map(|&z| (1.0 + z.exp()).ln()).sum::<f64>();
        let g = finite_difference_gradient(f, &[0.0], 1e-5);
        assert!((g[0] - 0.5).abs() < 1e-8, "{}", g[0]);
    }

    #[test]
    fn rel_err_handles_double_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
    }
}
