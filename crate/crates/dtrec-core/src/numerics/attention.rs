//! Fused multi-head causal attention.
//!
//! One op instead of a dozen small ones: the kernel sees the query matrix and a
//! list of key/value *parts*, which is what makes incremental reasoning-step
//! decoding cheap — the encoder's projected keys/values are recorded once and
//! later steps append single-position parts without copying the cache.
//!
//! Layout conventions: the query tensor is `(batch·query_len) × d` with batch
//! outermost; part `p` of the cache is `(batch·width_p) × d` likewise. Global
//! key position `j` of batch row `b` lives in the part covering `j`, at row
//! `b·width_p + (j − part_start_p)`. Query `i` sits at global position
//! `causal_base + i` and may attend to keys at positions `first_valid[b] ..= `
//! its own position. A query sitting entirely before `first_valid[b]` (a
//! left-padding slot) attends to nothing and produces a zero row.

use super::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub query_len: usize,
    /// Width (positions per batch row) of each key/value part, in order.
    pub part_widths: Vec<usize>,
    /// Per batch row: first key position that is not left-padding.
    pub first_valid: Vec<usize>,
    /// Global position of query index 0.
    pub causal_base: usize,
}

impl AttentionSpec {
    pub fn key_len(&self) -> usize {
        self.part_widths.iter().sum()
    }

    pub(super) fn validate<S: Scalar>(&self, q: &Tensor<S>, keys: &[&Tensor<S>], vals: &[&Tensor<S>]) {
        let d = q.cols();
        assert!(self.heads > 0 && d % self.heads == 0, "attention: d={d} not divisible by heads={}", self.heads);
        assert_eq!(q.rows(), self.batch * self.query_len, "attention: query rows");
        assert_eq!(keys.len(), self.part_widths.len(), "attention: key part count");
        assert_eq!(vals.len(), self.part_widths.len(), "attention: value part count");
        assert_eq!(self.first_valid.len(), self.batch, "attention: first_valid length");
        for (p, (&w, (k, v))) in self.part_widths.iter().zip(keys.iter().zip(vals)).enumerate() {
            assert_eq!(k.rows(), self.batch * w, "attention: key part {p} rows");
            assert_eq!(v.rows(), self.batch * w, "attention: value part {p} rows");
            assert_eq!(k.cols(), d, "attention: key part {p} cols");
            assert_eq!(v.cols(), d, "attention: value part {p} cols");
        }
        let kl = self.key_len();
        assert!(self.causal_base + self.query_len <= kl, "attention: causal_base+query_len exceeds key length {kl}");
        for &f in &self.first_valid {
            assert!(f <= kl, "attention: first_valid beyond key length");
        }
    }

    /// (part index, local offset) for a global key position.
    #[inline]
    fn locate(&self, j: usize) -> (usize, usize) {
        let mut start = 0;
        for (p, &w) in self.part_widths.iter().enumerate() {
            if j < start + w {
                return (p, j - start);
            }
            start += w;
        }
        unreachable!("key position {j} out of range");
    }
}

/// Forward pass. Returns the output `(batch·query_len) × d` and the flattened
/// attention probabilities, indexed `((b·H + h)·W_q + i)·W_k + j`, kept for the
/// reverse pass (invalid positions hold zero).
pub(super) fn forward<S: Scalar>(
    q: &Tensor<S>,
    keys: &[&Tensor<S>],
    vals: &[&Tensor<S>],
    spec: &AttentionSpec,
) -> (Tensor<S>, Vec<S>) {
    spec.validate(q, keys, vals);
    let d = q.cols();
    let h = spec.heads;
    let dh = d / h;
    let wq = spec.query_len;
    let wk = spec.key_len();
    let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());

    let mut out = Tensor::zeros(q.rows(), d);
    let mut probs = vec![S::zero(); spec.batch * h * wq * wk];
    // Global position → (part, offset), resolved once.
    let loc: Vec<(usize, usize)> = (0..wk).map(|j| spec.locate(j)).collect();

    let mut scores = vec![S::zero(); wk];
    for b in 0..spec.batch {
        let fv = spec.first_valid[b];
        for head in 0..h {
            let c0 = head * dh; // column range of this head
            for i in 0..wq {
                let qpos = spec.causal_base + i;
                if qpos < fv {
                    continue; // padding query: attends nowhere, row stays zero
                }
                let hi = qpos + 1; // exclusive end of the visible range
                let qrow = &q.row(b * wq + i)[c0..c0 + dh];

                // scores over the visible window, stabilized softmax
                let mut max = S::neg_infinity();
                for j in fv..hi {
                    let (p, off) = loc[j];
                    let krow = &keys[p].row(b * spec.part_widths[p] + off)[c0..c0 + dh];
                    let mut dot = S::zero();
                    for t in 0..dh {
                        dot += qrow[t] * krow[t];
                    }
                    let s = dot * inv_sqrt;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = S::zero();
                for j in fv..hi {
                    scores[j] = (scores[j] - max).exp();
                    denom += scores[j];
                }
                let pbase = ((b * h + head) * wq + i) * wk;
                let orow = &mut out.row_mut(b * wq + i)[c0..c0 + dh];
                for j in fv..hi {
                    let p_ij = scores[j] / denom;
                    probs[pbase + j] = p_ij;
                    let (p, off) = loc[j];
                    let vrow = &vals[p].row(b * spec.part_widths[p] + off)[c0..c0 + dh];
                    for t in 0..dh {
                        orow[t] += p_ij * vrow[t];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Reverse pass. Gradients are accumulated into freshly allocated buffers and
/// returned, so callers can handle aliased inputs (encoder self-attention uses
/// the same tensor for q, k and v) by summing afterwards.
#[allow(clippy::too_many_arguments)]
pub(super) fn backward<S: Scalar>(
    dout: &Tensor<S>,
    q: &Tensor<S>,
    keys: &[&Tensor<S>],
    vals: &[&Tensor<S>],
    probs: &[S],
    spec: &AttentionSpec,
) -> (Tensor<S>, Vec<Tensor<S>>, Vec<Tensor<S>>) {
    let d = q.cols();
    let h = spec.heads;
    let dh = d / h;
    let wq = spec.query_len;
    let wk = spec.key_len();
    let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());

    let mut dq = Tensor::zeros(q.rows(), d);
    let mut dkeys: Vec<Tensor<S>> = keys.iter().map(|k| Tensor::zeros(k.rows(), d)).collect();
    let mut dvals: Vec<Tensor<S>> = vals.iter().map(|v| Tensor::zeros(v.rows(), d)).collect();
    let loc: Vec<(usize, usize)> = (0..wk).map(|j| spec.locate(j)).collect();

    let mut dscore = vec![S::zero(); wk];
    for b in 0..spec.batch {
        let fv = spec.first_valid[b];
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..wq {
                let qpos = spec.causal_base + i;
                if qpos < fv {
                    continue;
                }
                let hi = qpos + 1;
                let pbase = ((b * h + head) * wq + i) * wk;
                let dorow = &dout.row(b * wq + i)[c0..c0 + dh];

                // dV and the soft part: ds_j = p_j · (⟨do, v_j⟩ − Σ_j' p_j'⟨do, v_j'⟩)
                let mut inner = S::zero();
                for j in fv..hi {
                    let p_ij = probs[pbase + j];
                    let (p, off) = loc[j];
                    let prow = b * spec.part_widths[p] + off;
                    let vrow = &vals[p].row(prow)[c0..c0 + dh];
                    let mut dp = S::zero();
                    for t in 0..dh {
                        dp += dorow[t] * vrow[t];
                    }
                    dscore[j] = dp;
                    inner += p_ij * dp;
                    let dvrow = &mut dvals[p].row_mut(prow)[c0..c0 + dh];
                    for t in 0..dh {
                        dvrow[t] += p_ij * dorow[t];
                    }
                }
                let qrow = &q.row(b * wq + i)[c0..c0 + dh];
                let dqrow_base = b * wq + i;
                for j in fv..hi {
                    let p_ij = probs[pbase + j];
                    let ds = p_ij * (dscore[j] - inner) * inv_sqrt;
                    if ds == S::zero() {
                        continue;
                    }
                    let (p, off) = loc[j];
                    let prow = b * spec.part_widths[p] + off;
                    let krow = &keys[p].row(prow)[c0..c0 + dh];
                    {
                        let dqrow = &mut dq.row_mut(dqrow_base)[c0..c0 + dh];
                        for t in 0..dh {
                            dqrow[t] += ds * krow[t];
                        }
                    }
                    let dkrow = &mut dkeys[p].row_mut(prow)[c0..c0 + dh];
                    for t in 0..dh {
                        dkrow[t] += ds * qrow[t];
                    }
                }
            }
        }
    }
    (dq, dkeys, dvals)
}
