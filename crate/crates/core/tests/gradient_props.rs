//! Gradient properties: every differentiable kernel agrees with central
//! finite differences on random small tensors, and full-block gradients pass
//! the model-level check with routing pinned.

use prw_core::gradcheck::{finite_difference_gradient, max_rel_err, model_gradcheck};
use prw_core::model::{ModelConfig, PrwModel};
use prw_core::rng;
use prw_core::scene::GridConfig;
use prw_core::supervision::SupervisionConfig;
use prw_core::tape::{Tape, VarId};
use prw_core::tasks::{Featurizer, SampleGen, TaskKind};
use prw_core::tensor::Tensor;
use prw_core::trainer::FlowSample;

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CASES: usize = 100;

/// Check d(loss)/d(a) for a graph builder against finite differences, over
/// `CASES` random tensors of the given shape.
fn check_kernel(
    name: &str,
    shape: Vec<usize>,
    build: impl Fn(&mut Tape, VarId, &mut rng::Rng) -> VarId,
) {
    for case in 0..CASES {
        let mut data_rng = rng::stream(0xA11CE, name, case as u64);
        let a = Tensor::randn(shape.clone(), 1.0, &mut data_rng);

        // analytic
        let mut tape = Tape::new();
        let mut aux_rng = rng::stream(0xB0B, name, case as u64);
        let leaf = tape.leaf(a.clone().with_grad());
        let loss = build(&mut tape, leaf, &mut aux_rng);
        assert_eq!(tape.value(loss).numel(), 1, "{name}: loss must be scalar");
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaf).expect("missing gradient").to_vec();

        // oracle
        let f = |params: &[f64]| -> f64 {
            let mut ftape = Tape::new();
            let mut faux = rng::stream(0xB0B, name, case as u64);
            let fleaf = ftape.leaf(Tensor::new(shape.clone(), params.to_vec()));
            let floss = build(&mut ftape, fleaf, &mut faux);
            ftape.value(floss).item()
        };
        let reference = finite_difference_gradient(f, &a.data, FD_STEP);
        let err = max_rel_err(&analytic, &reference);
        assert!(err < TOL, "{name} case {case}: max rel err {err}");
    }
}

fn rand_const(tape: &mut Tape, shape: Vec<usize>, rng: &mut rng::Rng) -> VarId {
    tape.constant(Tensor::randn(shape, 1.0, rng))
}

#[test]
fn matmul_left_and_right_gradients() {
    check_kernel("matmul_lhs", vec![3, 4], |t, a, r| {
        let b = rand_const(t, vec![4, 5], r);
        let c = t.matmul(a, b).unwrap();
        let target = rand_const(t, vec![3, 5], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("matmul_rhs", vec![4, 5], |t, b, r| {
        let a = rand_const(t, vec![3, 4], r);
        let c = t.matmul(a, b).unwrap();
        let target = rand_const(t, vec![3, 5], r);
        t.mse(c, target).unwrap()
    });
}

#[test]
fn transpose_gradient() {
    check_kernel("transpose", vec![4, 6], |t, a, r| {
        let at = t.transpose(a).unwrap();
        let target = rand_const(t, vec![6, 4], r);
        t.mse(at, target).unwrap()
    });
}

#[test]
fn elementwise_gradients() {
    check_kernel("add", vec![5, 3], |t, a, r| {
        let b = rand_const(t, vec![5, 3], r);
        let c = t.add(a, b).unwrap();
        let target = rand_const(t, vec![5, 3], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("sub", vec![5, 3], |t, a, r| {
        let b = rand_const(t, vec![5, 3], r);
        let c = t.sub(b, a).unwrap();
        let target = rand_const(t, vec![5, 3], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("mul", vec![5, 3], |t, a, r| {
        let b = rand_const(t, vec![5, 3], r);
        let c = t.mul(a, b).unwrap();
        let target = rand_const(t, vec![5, 3], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("scalar_mul", vec![7], |t, a, r| {
        let c = t.scalar_mul(a, 1.7).unwrap();
        let target = rand_const(t, vec![7], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("scalar_add", vec![7], |t, a, r| {
        let c = t.scalar_add(a, -0.4).unwrap();
        let target = rand_const(t, vec![7], r);
        t.mse(c, target).unwrap()
    });
}

#[test]
fn activation_gradients() {
    check_kernel("softplus", vec![6], |t, a, r| {
        let c = t.softplus(a).unwrap();
        let target = rand_const(t, vec![6], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("softmax", vec![4, 5], |t, a, r| {
        let c = t.softmax_last(a).unwrap();
        let target = rand_const(t, vec![4, 5], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("abs", vec![8], |t, a, r| {
        let c = t.abs(a).unwrap();
        let target = rand_const(t, vec![8], r);
        t.mse(c, target).unwrap()
    });
}

#[test]
fn softmax_then_mse_composite_is_tight() {
    // the composite on a random 4-vector agrees to 1e-6, much tighter than
    // the generic kernel tolerance
    for case in 0..20 {
        let mut r = rng::stream(0xC0FFEE, "softmax-mse", case);
        let a = Tensor::randn(vec![1, 4], 1.0, &mut r);
        let target = Tensor::randn(vec![1, 4], 1.0, &mut r);

        let mut tape = Tape::new();
        let leaf = tape.leaf(a.clone().with_grad());
        let sm = tape.softmax_last(leaf).unwrap();
        let tgt = tape.constant(target.clone());
        let loss = tape.mse(sm, tgt).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaf).unwrap().to_vec();

        let f = |p: &[f64]| {
            let mut t2 = Tape::new();
            let l = t2.leaf(Tensor::new(vec![1, 4], p.to_vec()));
            let sm = t2.softmax_last(l).unwrap();
            let tg = t2.constant(target.clone());
            let loss = t2.mse(sm, tg).unwrap();
            t2.value(loss).item()
        };
        let reference = finite_difference_gradient(f, &a.data, FD_STEP);
        let err = max_rel_err(&analytic, &reference);
        assert!(err < 1e-6, "case {case}: rel err {err}");
    }
}

#[test]
fn reduction_gradients() {
    check_kernel("mean_all", vec![4, 4], |t, a, _| t.mean_all(a).unwrap());
    check_kernel("mse_lhs", vec![4, 4], |t, a, r| {
        let b = rand_const(t, vec![4, 4], r);
        t.mse(a, b).unwrap()
    });
    check_kernel("mse_rhs", vec![4, 4], |t, a, r| {
        let b = rand_const(t, vec![4, 4], r);
        t.mse(b, a).unwrap()
    });
}

#[test]
fn structural_op_gradients() {
    check_kernel("concat_axis0", vec![3, 4], |t, a, r| {
        let b = rand_const(t, vec![2, 4], r);
        let c = t.concat(0, &[a, b]).unwrap();
        let target = rand_const(t, vec![5, 4], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("concat_axis1", vec![3, 4], |t, a, r| {
        let b = rand_const(t, vec![3, 2], r);
        let c = t.concat(1, &[b, a]).unwrap();
        let target = rand_const(t, vec![3, 6], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("slice_rows", vec![6, 3], |t, a, r| {
        let c = t.slice(a, 0, 1, 4).unwrap();
        let target = rand_const(t, vec![3, 3], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("slice_cols", vec![3, 8], |t, a, r| {
        let c = t.slice(a, 1, 2, 7).unwrap();
        let target = rand_const(t, vec![3, 5], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("gather_rows", vec![5, 3], |t, a, r| {
        let g = t.gather_rows(a, vec![4, 0, 2, 2]).unwrap();
        let target = rand_const(t, vec![4, 3], r);
        t.mse(g, target).unwrap()
    });
    check_kernel("scatter_rows", vec![3, 4], |t, a, r| {
        let s = t.scatter_rows(a, vec![5, 1, 3], 6).unwrap();
        let target = rand_const(t, vec![6, 4], r);
        t.mse(s, target).unwrap()
    });
    check_kernel("gather_per_row", vec![4, 5], |t, a, r| {
        let g = t.gather_per_row(a, vec![3, 0, 4, 2]).unwrap();
        let target = rand_const(t, vec![4, 1], r);
        t.mse(g, target).unwrap()
    });
    check_kernel("scale_rows_data", vec![4, 3], |t, a, r| {
        let s = rand_const(t, vec![4, 1], r);
        let c = t.scale_rows(a, s).unwrap();
        let target = rand_const(t, vec![4, 3], r);
        t.mse(c, target).unwrap()
    });
    check_kernel("scale_rows_scale", vec![4, 1], |t, s, r| {
        let a = rand_const(t, vec![4, 3], r);
        let c = t.scale_rows(a, s).unwrap();
        let target = rand_const(t, vec![4, 3], r);
        t.mse(c, target).unwrap()
    });
}

// ── full-block gradient checking ─────────────────────────────────────

fn tiny_model_and_sample(seed: u64, n_grow: usize) -> (PrwModel, SampleGen, FlowSample) {
    let grid = GridConfig { height: 6, width: 6, channels: 3, max_objects: 2 };
    let feat = Featurizer::new(grid, 2, 16, 0xC0DE).unwrap();
    let gen = SampleGen::new(feat);
    let (lx, ly, lh) = gen.feat.stream_lens();
    let cfg = ModelConfig {
        d_model: 16,
        n_blocks: 2,
        n_heads: 2,
        len_x: lx,
        len_y: ly,
        len_h: lh,
        seed,
    };
    let mut model = PrwModel::init(cfg, 2, 4.0);
    let mut grow_rng = rng::stream(seed, "grow", 0);
    for _ in 0..n_grow {
        model.grow_pool(2, 4.0, &mut grow_rng);
    }
    // randomize everything (including expert up-projections and output
    // projections) so no gradient path is structurally zero
    let mut r = rng::stream(seed, "init", 99);
    model.randomize_all(&mut r);
    let sample = gen.generate(TaskKind::Grounding, seed);
    let mut frng = rng::stream(seed, "flow", 0);
    let fs = FlowSample::from_task_sample(&sample, &gen, &mut frng);
    (model, gen, fs)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (model, _, fs) = tiny_model_and_sample(21, 1);
    let sup = SupervisionConfig { rho: 0.8, alpha: 0.5 };
    let report =
        model_gradcheck(&model, &fs, &sup, FD_STEP, 777, &|_| true, None).unwrap();
    assert!(
        report.passed(),
        "worst group {:?}",
        report.worst_group().map(|g| (g.name.clone(), g.max_rel_err))
    );
    // router noise-scale projections received real gradients
    assert!(report
        .groups
        .iter()
        .any(|g| g.name.contains("router.w_n") && g.n_params > 0));
}

#[test]
fn frozen_expert_gradient_is_exactly_zero() {
    let (model, _, fs) = tiny_model_and_sample(22, 1);
    let sup = SupervisionConfig { rho: 0.8, alpha: 0.5 };

    let policy = |name: &str| !name.contains("expert00");
    let report = model_gradcheck(&model, &fs, &sup, FD_STEP, 778, &policy, None).unwrap();
    assert!(report.passed());
    assert!(report.groups.iter().all(|g| !g.name.contains("expert00")));

    // a frozen leaf yields no gradient entry at all — the zero array
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, &policy);
    let mut noise = rng::stream(778, "noise", 0);
    let triple = prw_core::model::LatentTriple {
        x: fs.interpolant(),
        y: fs.y.clone(),
        h: fs.h.clone(),
    };
    let opts = prw_core::model::ForwardOpts {
        noise: Some(&mut noise),
        pinned: None,
        mode: prw_core::model::ArchMode::Prw,
    };
    let (out, _) = model.forward_on_tape(&mut tape, &bind, &triple, opts).unwrap();
    let tgt = tape.constant(fs.velocity());
    let loss = tape.mse(out.x, tgt).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(bind.id("block00.expert00.a_k")).is_none());
    assert!(grads.get(bind.id("block00.expert00.b_v")).is_none());
}

#[test]
fn zero_alpha_kills_the_veteran_gradient() {
    let (model, _, fs) = tiny_model_and_sample(23, 2);
    let sup = SupervisionConfig { rho: 1.0, alpha: 0.0 };
    let report = model_gradcheck(&model, &fs, &sup, FD_STEP, 779, &|_| true, None).unwrap();
    assert!(report.passed());
    for g in &report.groups {
        assert_eq!(g.veteran_grad_linf, 0.0, "{} has a veteran gradient", g.name);
    }
}

#[test]
fn corrupted_backward_is_caught_and_named() {
    let (model, _, fs) = tiny_model_and_sample(24, 1);
    let sup = SupervisionConfig { rho: 0.8, alpha: 0.5 };
    let victim = "block01.img.w_q";
    let report =
        model_gradcheck(&model, &fs, &sup, FD_STEP, 780, &|_| true, Some(victim)).unwrap();
    assert!(!report.passed(), "corruption must fail the check");
    let worst = report.worst_group().unwrap();
    assert_eq!(worst.name, victim, "the corrupted group must be named worst");
}
