//! Multi-head scaled dot-product attention on the tape.

use crate::tape::{Result, Tape, VarId};

/// Standard multi-head attention: split q/k/v into `n_heads` column groups,
/// attend per head, concatenate head outputs. `q` is Lq × d, `k`/`v` are
/// Lk × d; output is Lq × d. No masking — every query sees every key.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    n_heads: usize,
) -> Result<VarId> {
    let (_, d) = tape.value(q).rows_cols();
    assert!(n_heads >= 1 && d % n_heads == 0, "d={d} not divisible by heads={n_heads}");
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 1, c0, c1)?;
        let kh = tape.slice(k, 1, c0, c1)?;
        let vh = tape.slice(v, 1, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scalar_mul(scores, scale)?;
        let weights = tape.softmax_last(scaled)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    if n_heads == 1 {
        Ok(heads[0])
    } else {
        tape.concat(1, &heads)
    }
}

/// Loop-written single-threaded attention used as the oracle in tests.
#[cfg(test)]
pub(crate) fn attention_bruteforce(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    n_heads: usize,
) -> Vec<f64> {
    let dh = d / n_heads;
    let mut out = vec![0.0; lq * d];
    for head in 0..n_heads {
        for i in 0..lq {
            let mut scores = vec![0.0; lk];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[i * d + head * dh + c] * k[j * d + head * dh + c];
                }
                *s = dot / (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            for s in scores.iter_mut() {
                *s /= z;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for (j, &w) in scores.iter().enumerate() {
                    acc += w * v[j * d + head * dh + c];
                }
                out[i * d + head * dh + c] = acc;
            }
        }
    }
    out
}
