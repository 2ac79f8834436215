//! The routed-expert multimodal attention block and the stacked model.
//!
//! Each block processes three token streams — noisy latent `x`, condition
//! latent `y`, source latent `h` — in two attention stages:
//!
//! 1. the source stream attends to its own adapted Key/Value pair, where the
//!    adaptation is a gate-weighted low-rank expert residual chosen per token
//!    by the noisy top-1 router;
//! 2. the stem attention lets `x` and `y` queries attend jointly over the
//!    concatenated keys/values of all three streams, with the `h`-stream
//!    keys/values re-projected from the updated source representation.
//!
//! The `x` and `h` streams share one projection/attention parameter set; `y`
//! has its own. Positional codes are fixed constants injected at the
//! projection inputs of every block, so the residual streams themselves stay
//! untouched — with zero experts and zero output projections a block is an
//! exact identity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::multi_head_attention;
use crate::expert::{ExpertPool, LowRankExpert};
use crate::rng::{self, Rng};
use crate::router::{route, RouterParams, RoutingDecision};
use crate::tape::{Result, Tape, VarId};
use crate::tensor::{Tensor, TensorError};

const POS_CODE_SCALE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token feature width d.
    pub d_model: usize,
    /// Number of attention blocks (the block count in the usage ratio).
    pub n_blocks: usize,
    pub n_heads: usize,
    pub len_x: usize,
    pub len_y: usize,
    pub len_h: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_blocks < 1 {
            return Err("n_blocks must be >= 1".into());
        }
        if self.len_x < 1 || self.len_y < 1 || self.len_h < 1 {
            return Err("stream lengths must be >= 1".into());
        }
        Ok(())
    }
}

/// QKV + output projection for one stream family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamProj {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl StreamProj {
    /// Random QKV, zero output projection: a fresh block is an identity map.
    fn init(d: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        StreamProj {
            w_q: Tensor::randn(vec![d, d], s, rng),
            w_k: Tensor::randn(vec![d, d], s, rng),
            w_v: Tensor::randn(vec![d, d], s, rng),
            w_o: Tensor::zeros(vec![d, d]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrwBlock {
    /// Shared by the noisy-latent and source-latent streams.
    pub img: StreamProj,
    /// Condition/text stream only.
    pub txt: StreamProj,
    pub router: RouterParams,
    pub pool: ExpertPool,
}

/// The three token streams entering a block stack.
#[derive(Debug, Clone)]
pub struct LatentTriple {
    pub x: Tensor,
    pub y: Tensor,
    pub h: Tensor,
}

impl LatentTriple {
    pub fn check_shapes(&self, cfg: &ModelConfig) -> std::result::Result<(), String> {
        for (name, t, len) in [
            ("x", &self.x, cfg.len_x),
            ("y", &self.y, cfg.len_y),
            ("h", &self.h, cfg.len_h),
        ] {
            if t.rows_cols() != (len, cfg.d_model) {
                return Err(format!(
                    "stream {name}: got {:?}, config wants [{len}, {}]",
                    t.shape, cfg.d_model
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchMode {
    /// Routed expert residuals on the source KV projection.
    Prw,
    /// Base projections only — no router, no experts.
    Baseline,
}

/// Tape handles of the three output streams.
pub struct TripleNodes {
    pub x: VarId,
    pub y: VarId,
    pub h: VarId,
}

/// One block's routing record: the hard decision plus the tape node of the
/// gate probabilities (the differentiable path for usage supervision).
pub struct BlockRouting {
    pub decision: RoutingDecision,
    pub probs_node: VarId,
}

/// Parameter-name → tape-leaf map for one forward/backward pass.
pub struct Binding {
    ids: BTreeMap<String, VarId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> VarId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.ids.iter()
    }
}

pub struct ForwardOpts<'a> {
    /// Router noise generator; `None` means inference (fully deterministic).
    pub noise: Option<&'a mut Rng>,
    /// Pinned per-block, per-token expert selections (gradient checking).
    pub pinned: Option<&'a [Vec<usize>]>,
    pub mode: ArchMode,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts { noise: None, pinned: None, mode: ArchMode::Prw }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrwModel {
    pub cfg: ModelConfig,
    pub blocks: Vec<PrwBlock>,
    /// Fixed positional codes shared by the x and h streams.
    pub pos_xh: Tensor,
    /// Fixed positional codes for the y stream.
    pub pos_y: Tensor,
}

impl PrwModel {
    pub fn init(cfg: ModelConfig, lora_rank: usize, lora_alpha: f64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut init_rng = rng::stream(cfg.seed, "init", 0);
        let blocks = (0..cfg.n_blocks)
            .map(|_| PrwBlock {
                img: StreamProj::init(cfg.d_model, &mut init_rng),
                txt: StreamProj::init(cfg.d_model, &mut init_rng),
                router: RouterParams::new(cfg.d_model, 1),
                pool: ExpertPool::new(LowRankExpert::new(
                    cfg.d_model,
                    lora_rank,
                    lora_alpha,
                    &mut init_rng,
                )),
            })
            .collect();
        let mut pos_rng = rng::stream(cfg.seed, "pos", 0);
        let lmax = cfg.len_x.max(cfg.len_h);
        let pos_xh = Tensor::randn(vec![lmax, cfg.d_model], POS_CODE_SCALE, &mut pos_rng);
        let pos_y = Tensor::randn(vec![cfg.len_y, cfg.d_model], POS_CODE_SCALE, &mut pos_rng);
        PrwModel { cfg, blocks, pos_xh, pos_y }
    }

    pub fn n_experts(&self) -> usize {
        self.blocks[0].pool.len()
    }

    /// Grow every block's pool by one zero-residual expert and extend the
    /// routers with zero columns.
    pub fn grow_pool(&mut self, lora_rank: usize, lora_alpha: f64, rng: &mut Rng) {
        for block in &mut self.blocks {
            block.pool.grow(LowRankExpert::new(self.cfg.d_model, lora_rank, lora_alpha, rng));
            block.router.grow();
        }
    }

    pub fn set_noise_enabled(&mut self, enabled: bool) {
        for block in &mut self.blocks {
            block.router.noise_enabled = enabled;
        }
    }

    /// Fill every parameter (including expert up-projections and output
    /// projections) with random values. Gradient checks use this so no
    /// gradient path is structurally zero.
    pub fn randomize_all(&mut self, rng: &mut Rng) {
        let d = self.cfg.d_model;
        let s = 1.0 / (d as f64).sqrt();
        self.visit_params_mut(&mut |_name, t| {
            rng::fill_normal(rng, &mut t.data, s);
        });
    }

    // ── parameter visitation ─────────────────────────────────────────

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (bi, block) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{bi:02}.{s}");
            f(&p("img.w_q"), &block.img.w_q);
            f(&p("img.w_k"), &block.img.w_k);
            f(&p("img.w_v"), &block.img.w_v);
            f(&p("img.w_o"), &block.img.w_o);
            f(&p("txt.w_q"), &block.txt.w_q);
            f(&p("txt.w_k"), &block.txt.w_k);
            f(&p("txt.w_v"), &block.txt.w_v);
            f(&p("txt.w_o"), &block.txt.w_o);
            f(&p("router.w_r"), &block.router.w_r);
            f(&p("router.w_n"), &block.router.w_n);
            for (ei, e) in block.pool.experts.iter().enumerate() {
                f(&p(&format!("expert{ei:02}.a_k")), &e.a_k);
                f(&p(&format!("expert{ei:02}.b_k")), &e.b_k);
                f(&p(&format!("expert{ei:02}.a_v")), &e.a_v);
                f(&p(&format!("expert{ei:02}.b_v")), &e.b_v);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("block{bi:02}.{s}");
            f(&p("img.w_q"), &mut block.img.w_q);
            f(&p("img.w_k"), &mut block.img.w_k);
            f(&p("img.w_v"), &mut block.img.w_v);
            f(&p("img.w_o"), &mut block.img.w_o);
            f(&p("txt.w_q"), &mut block.txt.w_q);
            f(&p("txt.w_k"), &mut block.txt.w_k);
            f(&p("txt.w_v"), &mut block.txt.w_v);
            f(&p("txt.w_o"), &mut block.txt.w_o);
            f(&p("router.w_r"), &mut block.router.w_r);
            f(&p("router.w_n"), &mut block.router.w_n);
            for (ei, e) in block.pool.experts.iter_mut().enumerate() {
                f(&p(&format!("expert{ei:02}.a_k")), &mut e.a_k);
                f(&p(&format!("expert{ei:02}.b_k")), &mut e.b_k);
                f(&p(&format!("expert{ei:02}.a_v")), &mut e.a_v);
                f(&p(&format!("expert{ei:02}.b_v")), &mut e.b_v);
            }
        }
    }

    pub fn param_map(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            m.insert(name.to_string(), t.clone());
        });
        m
    }

    /// Whether a parameter name refers to a frozen expert of the pool.
    pub fn is_frozen_expert(&self, name: &str) -> bool {
        if let Some(idx) = name.find(".expert") {
            let ei: usize = name[idx + 7..idx + 9].parse().unwrap_or(usize::MAX);
            let bi: usize = name[5..7].parse().unwrap_or(0);
            if let Some(block) = self.blocks.get(bi) {
                return !block.pool.trainable.get(ei).copied().unwrap_or(false);
            }
        }
        false
    }

    /// Register every parameter on the tape; `trainable` decides which
    /// leaves carry gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Binding {
        let mut ids = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            let mut leaf = t.clone();
            leaf.requires_grad = trainable(name);
            ids.insert(name.to_string(), tape.leaf(leaf));
        });
        Binding { ids }
    }

    // ── forward ──────────────────────────────────────────────────────

    /// Run the block stack on a latent triple. Returns the output stream
    /// nodes and the per-block routing records (empty in baseline mode).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        triple: &LatentTriple,
        mut opts: ForwardOpts,
    ) -> Result<(TripleNodes, Vec<BlockRouting>)> {
        triple.check_shapes(&self.cfg).map_err(|details| TensorError::ShapeMismatch {
            op: "block_forward",
            details,
        })?;
        let mut x = tape.constant(triple.x.clone());
        let mut y = tape.constant(triple.y.clone());
        let mut h = tape.constant(triple.h.clone());

        let pos_x = {
            let t = slice_rows(&self.pos_xh, self.cfg.len_x);
            tape.constant(t)
        };
        let pos_h = {
            let t = slice_rows(&self.pos_xh, self.cfg.len_h);
            tape.constant(t)
        };
        let pos_y = tape.constant(self.pos_y.clone());

        let mut traces = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let name = |s: &str| format!("block{bi:02}.{s}");
            let img_q = bind.id(&name("img.w_q"));
            let img_k = bind.id(&name("img.w_k"));
            let img_v = bind.id(&name("img.w_v"));
            let img_o = bind.id(&name("img.w_o"));
            let txt_q = bind.id(&name("txt.w_q"));
            let txt_k = bind.id(&name("txt.w_k"));
            let txt_v = bind.id(&name("txt.w_v"));
            let txt_o = bind.id(&name("txt.w_o"));

            let x_p = tape.add(x, pos_x)?;
            let y_p = tape.add(y, pos_y)?;
            let h_p = tape.add(h, pos_h)?;

            // stage 1: adapt the source KV and let h attend to itself.
            // The base projection sees the position-coded stream; the router
            // and the experts see the raw latent content, so routing keys on
            // what a token carries, never on where it sits.
            let base_k = tape.matmul(h_p, img_k)?;
            let base_v = tape.matmul(h_p, img_v)?;
            let (k_hat, v_hat) = match opts.mode {
                ArchMode::Baseline => (base_k, base_v),
                ArchMode::Prw => {
                    let w_r = bind.id(&name("router.w_r"));
                    let w_n = bind.id(&name("router.w_n"));
                    let noise = if block.router.noise_enabled {
                        opts.noise.as_deref_mut()
                    } else {
                        None
                    };
                    let pinned = opts.pinned.map(|p| p[bi].as_slice());
                    let (decision, nodes) = route(tape, h, w_r, w_n, noise, pinned)?;
                    let expert_ids: Vec<ExpertIds> = (0..block.pool.len())
                        .map(|ei| ExpertIds {
                            a_k: bind.id(&name(&format!("expert{ei:02}.a_k"))),
                            b_k: bind.id(&name(&format!("expert{ei:02}.b_k"))),
                            a_v: bind.id(&name(&format!("expert{ei:02}.a_v"))),
                            b_v: bind.id(&name(&format!("expert{ei:02}.b_v"))),
                            scale: block.pool.experts[ei].scale,
                        })
                        .collect();
                    let (k_hat, v_hat) = adapt_kv(
                        tape,
                        h,
                        base_k,
                        base_v,
                        &expert_ids,
                        nodes.gate_probs,
                        &decision.selected,
                    )?;
                    traces.push(BlockRouting { decision, probs_node: nodes.gate_probs });
                    (k_hat, v_hat)
                }
            };
            let q_h = tape.matmul(h_p, img_q)?;
            let h_upd = source_self_attention(tape, h, q_h, k_hat, v_hat, img_o, self.cfg.n_heads)?;

            // stage 2: stem attention over the concatenated context; the
            // h-stream contributes its adapted keys/values directly
            let (x_out, y_out) = stem_attention(
                tape,
                StemStream { raw: x, projected_in: x_p },
                Some(StemStream { raw: y, projected_in: y_p }),
                Some((k_hat, v_hat)),
                &StemProj { w_q: img_q, w_k: img_k, w_v: img_v, w_o: img_o },
                &StemProj { w_q: txt_q, w_k: txt_k, w_v: txt_v, w_o: txt_o },
                self.cfg.n_heads,
            )?;

            x = x_out;
            y = y_out.expect("y stream present");
            h = h_upd;
        }
        Ok((TripleNodes { x, y, h }, traces))
    }

    /// Convenience inference pass: no gradients, no noise.
    pub fn infer(&self, triple: &LatentTriple, mode: ArchMode) -> Result<(LatentTriple, Vec<RoutingDecision>)> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, &|_| false);
        let opts = ForwardOpts { noise: None, pinned: None, mode };
        let (out, traces) = self.forward_on_tape(&mut tape, &bind, triple, opts)?;
        let triple = LatentTriple {
            x: tape.value(out.x).clone(),
            y: tape.value(out.y).clone(),
            h: tape.value(out.h).clone(),
        };
        Ok((triple, traces.into_iter().map(|t| t.decision).collect()))
    }
}

fn slice_rows(t: &Tensor, rows: usize) -> Tensor {
    let (_, c) = t.rows_cols();
    Tensor::new(vec![rows, c], t.data[..rows * c].to_vec())
}

/// Tape handles for one expert's factors.
pub struct ExpertIds {
    pub a_k: VarId,
    pub b_k: VarId,
    pub a_v: VarId,
    pub b_v: VarId,
    pub scale: f64,
}

/// Adaptive KV residual: base projection plus the gate-scaled low-rank
/// output of each token's selected expert. Tokens are grouped by expert so
/// only selected experts contribute; gradients flow through the gate
/// probability and the selected expert's factors.
pub fn adapt_kv(
    tape: &mut Tape,
    h: VarId,
    base_k: VarId,
    base_v: VarId,
    experts: &[ExpertIds],
    gate_probs: VarId,
    selected: &[usize],
) -> Result<(VarId, VarId)> {
    let (tokens, _) = tape.value(h).rows_cols();
    let n_experts = experts.len();
    if let Some(&bad) = selected.iter().find(|&&e| e >= n_experts) {
        return Err(TensorError::IndexOutOfRange {
            op: "adapt_kv",
            details: format!("expert {bad} of {n_experts}"),
        });
    }
    let gate_col = tape.gather_per_row(gate_probs, selected.to_vec())?;

    let mut k_hat = base_k;
    let mut v_hat = base_v;
    for (ei, ids) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..tokens).filter(|&t| selected[t] == ei).collect();
        if rows.is_empty() {
            continue;
        }
        let sub_h = tape.gather_rows(h, rows.clone())?;
        let gates = tape.gather_rows(gate_col, rows.clone())?;
        for (a, b, acc) in [(ids.a_k, ids.b_k, &mut k_hat), (ids.a_v, ids.b_v, &mut v_hat)] {
            let down = tape.matmul(sub_h, a)?;
            let up = tape.matmul(down, b)?;
            let gated = tape.scale_rows(up, gates)?;
            let scaled = tape.scalar_mul(gated, ids.scale)?;
            let placed = tape.scatter_rows(scaled, rows.clone(), tokens)?;
            *acc = tape.add(*acc, placed)?;
        }
    }
    Ok((k_hat, v_hat))
}

/// The source stream attends to its adapted KV pair; the attended output is
/// projected and residual-added onto the raw stream.
pub fn source_self_attention(
    tape: &mut Tape,
    h_raw: VarId,
    q_h: VarId,
    k_hat: VarId,
    v_hat: VarId,
    w_o: VarId,
    n_heads: usize,
) -> Result<VarId> {
    let attn = multi_head_attention(tape, q_h, k_hat, v_hat, n_heads)?;
    let proj = tape.matmul(attn, w_o)?;
    tape.add(h_raw, proj)
}

pub struct StemStream {
    /// Residual stream (receives the attention output).
    pub raw: VarId,
    /// Projection input (stream plus positional code).
    pub projected_in: VarId,
}

pub struct StemProj {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_o: VarId,
}

/// Stem attention: x (and y, when present) queries attend over the
/// concatenated keys/values of x, y, and the source stream's adapted
/// key/value pair. Absent streams are simply left out of the context.
pub fn stem_attention(
    tape: &mut Tape,
    x: StemStream,
    y: Option<StemStream>,
    h_kv: Option<(VarId, VarId)>,
    img: &StemProj,
    txt: &StemProj,
    n_heads: usize,
) -> Result<(VarId, Option<VarId>)> {
    let q_x = tape.matmul(x.projected_in, img.w_q)?;
    let k_x = tape.matmul(x.projected_in, img.w_k)?;
    let v_x = tape.matmul(x.projected_in, img.w_v)?;
    let (len_x, _) = tape.value(q_x).rows_cols();

    let mut queries = vec![q_x];
    let mut keys = vec![k_x];
    let mut values = vec![v_x];
    let mut len_y = 0;
    if let Some(y) = &y {
        let q_y = tape.matmul(y.projected_in, txt.w_q)?;
        let k_y = tape.matmul(y.projected_in, txt.w_k)?;
        let v_y = tape.matmul(y.projected_in, txt.w_v)?;
        len_y = tape.value(q_y).rows_cols().0;
        queries.push(q_y);
        keys.push(k_y);
        values.push(v_y);
    }
    if let Some((k_h, v_h)) = h_kv {
        keys.push(k_h);
        values.push(v_h);
    }

    let q_all = if queries.len() == 1 { queries[0] } else { tape.concat(0, &queries)? };
    let k_all = if keys.len() == 1 { keys[0] } else { tape.concat(0, &keys)? };
    let v_all = if values.len() == 1 { values[0] } else { tape.concat(0, &values)? };

    let attn = multi_head_attention(tape, q_all, k_all, v_all, n_heads)?;
    let x_part = if len_y > 0 { tape.slice(attn, 0, 0, len_x)? } else { attn };
    let x_proj = tape.matmul(x_part, img.w_o)?;
    let x_out = tape.add(x.raw, x_proj)?;

    let y_out = match y {
        Some(y) => {
            let y_part = tape.slice(attn, 0, len_x, len_x + len_y)?;
            let y_proj = tape.matmul(y_part, txt.w_o)?;
            Some(tape.add(y.raw, y_proj)?)
        }
        None => None,
    };
    Ok((x_out, y_out))
}
