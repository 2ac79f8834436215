//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations append nodes in topological order; `backward` walks the tape
//! once in reverse, accumulating vector-Jacobian products into per-node grad
//! buffers. Every op validates shapes (naming the op and the offending
//! shapes) and rejects non-finite outputs, so a completed forward pass is
//! guaranteed finite.
//!
//! Hard selections (`gather_rows`, `gather_per_row`, `scatter_rows`) record
//! their indices as constants of the backward pass: gradients flow through
//! the gathered values, never through the index choice.

use crate::tensor::{matmul_raw, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId },
    Transpose { a: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    ScalarMul { a: VarId, c: f64 },
    ScalarAdd { a: VarId },
    Softplus { a: VarId },
    SoftmaxLast { a: VarId },
    Concat { axis: usize, parts: Vec<VarId> },
    Slice { a: VarId, axis: usize, start: usize, end: usize },
    Mse { a: VarId, b: VarId },
    MeanAll { a: VarId },
    Abs { a: VarId },
    GatherRows { a: VarId, rows: Vec<usize> },
    ScatterRows { a: VarId, rows: Vec<usize> },
    GatherPerRow { a: VarId, cols: Vec<usize> },
    ScaleRows { a: VarId, s: VarId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, keyed by `VarId`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z), stable on both tails
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Register an input tensor. Gradient is tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Register a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> VarId {
        self.nodes.push(Node { op, value, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn check(&self, id: VarId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::DanglingNode { id: id.0, len: self.nodes.len() });
        }
        let _ = op;
        Ok(())
    }

    fn finish(&mut self, op: Op, value: Tensor, needs: bool, name: &'static str) -> Result<VarId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(op, value, needs))
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = ta.rows_cols();
        let (kb, n) = tb.rows_cols();
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_raw(&ta.data, &tb.data, m, ka, n));
        let needs = self.needs(a) || self.needs(b);
        self.finish(Op::MatMul { a, b }, out, needs, "matmul")
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "transpose")?;
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.rows_cols();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.finish(Op::Transpose { a }, Tensor::new(vec![n, m], data), needs, "transpose")
    }

    fn elementwise2(
        &mut self,
        a: VarId,
        b: VarId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(VarId, VarId) -> Op,
    ) -> Result<VarId> {
        self.check(a, name)?;
        self.check(b, name)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                details: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        let needs = self.needs(a) || self.needs(b);
        self.finish(op(a, b), out, needs, name)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise2(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise2(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise2(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scalar_mul(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.check(a, "scalar_mul")?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| x * c).collect());
        let needs = self.needs(a);
        self.finish(Op::ScalarMul { a, c }, out, needs, "scalar_mul")
    }

    pub fn scalar_add(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.check(a, "scalar_add")?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| x + c).collect());
        let needs = self.needs(a);
        self.finish(Op::ScalarAdd { a }, out, needs, "scalar_add")
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "softplus")?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| softplus(x)).collect());
        let needs = self.needs(a);
        self.finish(Op::Softplus { a }, out, needs, "softplus")
    }

    /// Softmax over the last axis, numerically stabilized per row.
    pub fn softmax_last(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "softmax")?;
        let ta = &self.nodes[a.0].value;
        let n = *ta.shape.last().ok_or(TensorError::ShapeMismatch {
            op: "softmax",
            details: "0-d tensor".into(),
        })?;
        let mut data = ta.data.clone();
        for row in data.chunks_exact_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(ta.shape.clone(), data);
        let needs = self.needs(a);
        self.finish(Op::SoftmaxLast { a }, out, needs, "softmax")
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = cols).
    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                details: format!("{} parts, axis {axis}", parts.len()),
            });
        }
        for &p in parts {
            self.check(p, "concat")?;
        }
        let first = self.nodes[parts[0].0].value.rows_cols();
        let mut out_rows = 0;
        let mut out_cols = 0;
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.rows_cols();
            if axis == 0 {
                if c != first.1 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        details: format!("column counts {} vs {}", first.1, c),
                    });
                }
                out_rows += r;
                out_cols = c;
            } else {
                if r != first.0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        details: format!("row counts {} vs {}", first.0, r),
                    });
                }
                out_rows = r;
                out_cols += c;
            }
        }
        let mut data = vec![0.0; out_rows * out_cols];
        if axis == 0 {
            let mut at = 0;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                data[at..at + t.data.len()].copy_from_slice(&t.data);
                at += t.data.len();
            }
        } else {
            let mut col0 = 0;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let (r, c) = t.rows_cols();
                for i in 0..r {
                    data[i * out_cols + col0..i * out_cols + col0 + c]
                        .copy_from_slice(&t.data[i * c..(i + 1) * c]);
                }
                col0 += c;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.finish(
            Op::Concat { axis, parts: parts.to_vec() },
            Tensor::new(vec![out_rows, out_cols], data),
            needs,
            "concat",
        )
    }

    /// Slice `[start, end)` of a 2-D tensor along `axis`.
    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, end: usize) -> Result<VarId> {
        self.check(a, "slice")?;
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > limit {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                details: format!("axis {axis}, [{start}, {end}) of {:?}", ta.shape),
            });
        }
        let (or, oc) = if axis == 0 { (end - start, c) } else { (r, end - start) };
        let mut data = vec![0.0; or * oc];
        if axis == 0 {
            data.copy_from_slice(&ta.data[start * c..end * c]);
        } else {
            for i in 0..r {
                data[i * oc..(i + 1) * oc]
                    .copy_from_slice(&ta.data[i * c + start..i * c + end]);
            }
        }
        let needs = self.needs(a);
        self.finish(
            Op::Slice { a, axis, start, end },
            Tensor::new(vec![or, oc], data),
            needs,
            "slice",
        )
    }

    /// Mean squared error over all elements: mean((a - b)^2). Scalar output.
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "mse")?;
        self.check(b, "mse")?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                details: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let n = ta.numel() as f64;
        let mut acc = 0.0;
        for (&x, &y) in ta.data.iter().zip(&tb.data) {
            let d = x - y;
            acc += d * d;
        }
        let needs = self.needs(a) || self.needs(b);
        self.finish(Op::Mse { a, b }, Tensor::scalar(acc / n), needs, "mse")
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "mean")?;
        let ta = &self.nodes[a.0].value;
        let n = ta.numel() as f64;
        let mut acc = 0.0;
        for &x in &ta.data {
            acc += x;
        }
        let needs = self.needs(a);
        self.finish(Op::MeanAll { a }, Tensor::scalar(acc / n), needs, "mean")
    }

    /// |x| elementwise; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "abs")?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| x.abs()).collect());
        let needs = self.needs(a);
        self.finish(Op::Abs { a }, out, needs, "abs")
    }

    /// Select rows by index (duplicates allowed). Indices are constants of
    /// the backward pass; gradients scatter-add back to the source rows.
    pub fn gather_rows(&mut self, a: VarId, rows: Vec<usize>) -> Result<VarId> {
        self.check(a, "gather_rows")?;
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                details: format!("row {bad} of {r}"),
            });
        }
        let mut data = vec![0.0; rows.len() * c];
        for (o, &i) in rows.iter().enumerate() {
            data[o * c..(o + 1) * c].copy_from_slice(&ta.data[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        let shape = vec![rows.len(), c];
        self.finish(Op::GatherRows { a, rows }, Tensor::new(shape, data), needs, "gather_rows")
    }

    /// Place rows of `a` at `rows` within a zero matrix of `out_rows` rows.
    pub fn scatter_rows(&mut self, a: VarId, rows: Vec<usize>, out_rows: usize) -> Result<VarId> {
        self.check(a, "scatter_rows")?;
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        if r != rows.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                details: format!("{} rows vs {} indices", r, rows.len()),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_rows",
                details: format!("row {bad} of {out_rows}"),
            });
        }
        let mut data = vec![0.0; out_rows * c];
        for (o, &i) in rows.iter().enumerate() {
            for j in 0..c {
                data[i * c + j] += ta.data[o * c + j];
            }
        }
        let needs = self.needs(a);
        self.finish(
            Op::ScatterRows { a, rows },
            Tensor::new(vec![out_rows, c], data),
            needs,
            "scatter_rows",
        )
    }

    /// out[i, 0] = a[i, cols[i]] — one column pick per row.
    pub fn gather_per_row(&mut self, a: VarId, cols: Vec<usize>) -> Result<VarId> {
        self.check(a, "gather_per_row")?;
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        if cols.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "gather_per_row",
                details: format!("{} rows vs {} indices", r, cols.len()),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_per_row",
                details: format!("col {bad} of {c}"),
            });
        }
        let data = cols.iter().enumerate().map(|(i, &j)| ta.data[i * c + j]).collect();
        let needs = self.needs(a);
        self.finish(
            Op::GatherPerRow { a, cols },
            Tensor::new(vec![r, 1], data),
            needs,
            "gather_per_row",
        )
    }

    /// out[i, j] = a[i, j] * s[i], with `s` an [r, 1] column.
    pub fn scale_rows(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        self.check(a, "scale_rows")?;
        self.check(s, "scale_rows")?;
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let (r, c) = ta.rows_cols();
        if ts.rows_cols() != (r, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                details: format!("{:?} vs scale {:?}", ta.shape, ts.shape),
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let sv = ts.data[i];
            for j in 0..c {
                data[i * c + j] = ta.data[i * c + j] * sv;
            }
        }
        let needs = self.needs(a) || self.needs(s);
        self.finish(Op::ScaleRows { a, s }, Tensor::new(vec![r, c], data), needs, "scale_rows")
    }

    /// Left-to-right mean of scalar nodes (deterministic reduction order).
    pub fn mean_of(&mut self, ids: &[VarId]) -> Result<VarId> {
        assert!(!ids.is_empty());
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        self.scalar_mul(acc, 1.0 / ids.len() as f64)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass seeded with ones (the common scalar-loss case).
    pub fn backward(&self, out: VarId) -> Result<Gradients> {
        if out.0 >= self.nodes.len() {
            return Err(TensorError::DanglingNode { id: out.0, len: self.nodes.len() });
        }
        let seed = vec![1.0; self.nodes[out.0].value.numel()];
        self.backward_seeded(out, &seed)
    }

    /// Reverse pass from `out` with an explicit seed of the output's shape.
    /// Visits each node at most once; node ids are already topological.
    pub fn backward_seeded(&self, out: VarId, seed: &[f64]) -> Result<Gradients> {
        if out.0 >= self.nodes.len() {
            return Err(TensorError::DanglingNode { id: out.0, len: self.nodes.len() });
        }
        if seed.len() != self.nodes[out.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                details: format!(
                    "seed length {} vs output {:?}",
                    seed.len(),
                    self.nodes[out.0].value.shape
                ),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.to_vec());

        for id in (0..=out.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads);
            // keep the grad available for inspection
            grads[id] = Some(g);
        }

        // non-finite gradients indicate a numeric failure just like forward
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    let _ = id;
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, id: VarId, contrib: &[f64], tape: &Tape) {
        if !tape.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = ta.rows_cols();
                let (_, n) = tb.rows_cols();
                if self.needs(*a) {
                    // dA = g · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    Self::add_into(grads, *a, &da, self);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    Self::add_into(grads, *b, &db, self);
                }
            }
            Op::Transpose { a } => {
                let (n, m) = self.nodes[id].value.rows_cols();
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                Self::add_into(grads, *a, &da, self);
            }
            Op::Add { a, b } => {
                Self::add_into(grads, *a, g, self);
                Self::add_into(grads, *b, g, self);
            }
            Op::Sub { a, b } => {
                Self::add_into(grads, *a, g, self);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                Self::add_into(grads, *b, &neg, self);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let tb = &self.nodes[b.0].value;
                    let da: Vec<f64> = g.iter().zip(&tb.data).map(|(&gi, &bi)| gi * bi).collect();
                    Self::add_into(grads, *a, &da, self);
                }
                if self.needs(*b) {
                    let ta = &self.nodes[a.0].value;
                    let db: Vec<f64> = g.iter().zip(&ta.data).map(|(&gi, &ai)| gi * ai).collect();
                    Self::add_into(grads, *b, &db, self);
                }
            }
            Op::ScalarMul { a, c } => {
                let da: Vec<f64> = g.iter().map(|&v| v * c).collect();
                Self::add_into(grads, *a, &da, self);
            }
            Op::ScalarAdd { a } => {
                Self::add_into(grads, *a, g, self);
            }
            Op::Softplus { a } => {
                let ta = &self.nodes[a.0].value;
                let da: Vec<f64> =
                    g.iter().zip(&ta.data).map(|(&gi, &x)| gi * sigmoid(x)).collect();
                Self::add_into(grads, *a, &da, self);
            }
            Op::SoftmaxLast { a } => {
                let y = &self.nodes[id].value;
                let n = *y.shape.last().unwrap();
                let mut da = vec![0.0; y.numel()];
                for (row, (yrow, grow)) in
                    y.data.chunks_exact(n).zip(g.chunks_exact(n)).enumerate()
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..n {
                        da[row * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                Self::add_into(grads, *a, &da, self);
            }
            Op::Concat { axis, parts } => {
                let (_, out_cols) = self.nodes[id].value.rows_cols();
                if *axis == 0 {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.numel();
                        Self::add_into(grads, p, &g[at..at + len], self);
                        at += len;
                    }
                } else {
                    let mut col0 = 0;
                    for &p in parts {
                        let (r, c) = self.nodes[p.0].value.rows_cols();
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c].copy_from_slice(
                                &g[i * out_cols + col0..i * out_cols + col0 + c],
                            );
                        }
                        Self::add_into(grads, p, &dp, self);
                        col0 += c;
                    }
                }
            }
            Op::Slice { a, axis, start, end } => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = ta.rows_cols();
                let mut da = vec![0.0; r * c];
                if *axis == 0 {
                    da[start * c..end * c].copy_from_slice(g);
                } else {
                    let oc = end - start;
                    for i in 0..r {
                        da[i * c + start..i * c + end].copy_from_slice(&g[i * oc..(i + 1) * oc]);
                    }
                }
                Self::add_into(grads, *a, &da, self);
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = ta.numel() as f64;
                let s = 2.0 * g[0] / n;
                if self.needs(*a) {
                    let da: Vec<f64> =
                        ta.data.iter().zip(&tb.data).map(|(&x, &y)| s * (x - y)).collect();
                    Self::add_into(grads, *a, &da, self);
                }
                if self.needs(*b) {
                    let db: Vec<f64> =
                        ta.data.iter().zip(&tb.data).map(|(&x, &y)| -s * (x - y)).collect();
                    Self::add_into(grads, *b, &db, self);
                }
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![g[0] / n as f64; n];
                Self::add_into(grads, *a, &da, self);
            }
            Op::Abs { a } => {
                let ta = &self.nodes[a.0].value;
                let da: Vec<f64> = g
                    .iter()
                    .zip(&ta.data)
                    .map(|(&gi, &x)| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Self::add_into(grads, *a, &da, self);
            }
            Op::GatherRows { a, rows } => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = ta.rows_cols();
                let mut da = vec![0.0; r * c];
                for (o, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[o * c + j];
                    }
                }
                Self::add_into(grads, *a, &da, self);
            }
            Op::ScatterRows { a, rows } => {
                let (_, c) = self.nodes[a.0].value.rows_cols();
                let mut da = vec![0.0; rows.len() * c];
                for (o, &i) in rows.iter().enumerate() {
                    da[o * c..(o + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                Self::add_into(grads, *a, &da, self);
            }
            Op::GatherPerRow { a, cols } => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = ta.rows_cols();
                let mut da = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    da[i * c + j] = g[i];
                }
                Self::add_into(grads, *a, &da, self);
            }
            Op::ScaleRows { a, s } => {
                let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
                let (r, c) = ta.rows_cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let sv = ts.data[i];
                        for j in 0..c {
                            da[i * c + j] = g[i * c + j] * sv;
                        }
                    }
                    Self::add_into(grads, *a, &da, self);
                }
                if self.needs(*s) {
                    let mut ds = vec![0.0; r];
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i * c + j] * ta.data[i * c + j];
                        }
                        ds[i] = acc;
                    }
                    Self::add_into(grads, *s, &ds, self);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data)
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1], vec![0.0]));
        let y = tape.softplus(x).unwrap();
        assert!((tape.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        for &v in &tape.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_one_hot_row_selection() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1, 2], vec![1.0, 0.0]));
        let b = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![1.0, 2.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1], vec![3.0]).with_grad());
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mse_gradient_matches_hand_value() {
        // d/da mean((a-b)^2) at a=[1,2], b=[0,0] is 2(a-b)/2 = [1,2]
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2], vec![1.0, 2.0]).with_grad());
        let b = tape.constant(t(vec![2], vec![0.0, 0.0]));
        let l = tape.mse(a, b).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(t(vec![3, 1], vec![1.0, 2.0, 3.0]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1], vec![1e308]));
        let err = tape.mul(a, a).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn dangling_node_is_reported() {
        let tape = Tape::new();
        let err = tape.backward(VarId(5)).unwrap_err();
        assert!(matches!(err, TensorError::DanglingNode { .. }));
    }

    #[test]
    fn concat_backward_routes_to_segments() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]).with_grad());
        let b = tape.leaf(t(vec![1, 2], vec![3.0, 4.0]).with_grad());
        let c = tape.concat(0, &[a, b]).unwrap();
        let sliced = tape.slice(c, 0, 1, 2).unwrap(); // keep only b's row
        let loss = tape.mean_all(sliced).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(vec![1, 2], vec![5.0, 6.0]));
        let c = tape.concat(0, &[a, b]).unwrap();
        let a2 = tape.slice(c, 0, 0, 2).unwrap();
        let b2 = tape.slice(c, 0, 2, 3).unwrap();
        assert_eq!(tape.value(a2).data, tape.value(a).data);
        assert_eq!(tape.value(b2).data, tape.value(b).data);
    }

    #[test]
    fn gather_scatter_round_trip_and_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let g = tape.gather_rows(a, vec![2, 0]).unwrap();
        assert_eq!(tape.value(g).data, vec![5.0, 6.0, 1.0, 2.0]);
        let s = tape.scatter_rows(g, vec![2, 0], 3).unwrap();
        assert_eq!(tape.value(s).data, vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        let loss = tape.mean_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        // middle row never gathered: zero gradient there
        assert_eq!(grads.get(a).unwrap(), &[1.0 / 6.0, 1.0 / 6.0, 0.0, 0.0, 1.0 / 6.0, 1.0 / 6.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![-2.0, 0.0, 2.0]).with_grad());
        let y = tape.abs(x).unwrap();
        let l = tape.mean_all(y).unwrap();
        let grads = tape.backward(l).unwrap();
        let g = grads.get(x).unwrap();
        assert_eq!(g, &[-1.0 / 3.0, 0.0, 1.0 / 3.0]);
    }
}
