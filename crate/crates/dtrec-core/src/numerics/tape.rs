//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Tape`] is built fresh for every forward pass: leaves are pushed first
//! (parameters, inputs, constants), then each operation eagerly computes its
//! value, appends the result as a new node, and records what it read. The op
//! list is therefore already a topological order, and [`Tape::backward`] walks
//! it once in reverse, accumulating into per-node gradient buffers. A node's
//! gradient buffer is released (`take`n) when its producing op is processed —
//! after that point no later (earlier-in-forward) op can reference it.
//!
//! Every op checks its output for NaN/Inf and panics immediately on violation;
//! a silent non-finite value in a training step is strictly worse than a crash
//! with the op name in hand.

use super::attention::{self, AttentionSpec};
use super::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Logit value used to disable a column before softmax. Finite on purpose so
/// the finiteness invariant holds; exp(−1e30 − anything) underflows to zero.
const NEG_MASK: f64 = -1e30;

/// Probability floor inside logs of mixture losses.
const PROB_EPS: f64 = 1e-12;

enum Op<S> {
    Matmul { a: usize, b: usize, out: usize },
    MatmulNt { a: usize, b: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    AddBias { a: usize, bias: usize, out: usize },
    Scale { a: usize, c: S, out: usize },
    Relu { a: usize, out: usize },
    Sigmoid { a: usize, out: usize },
    Tanh { a: usize, out: usize },
    LayerNorm { a: usize, gain: usize, bias: usize, out: usize, mean: Vec<S>, rstd: Vec<S> },
    Dropout { a: usize, out: usize, mask: Vec<u8>, keep_inv: S },
    SoftmaxRows { a: usize, out: usize },
    LogSoftmaxRows { a: usize, out: usize },
    MaskCol { a: usize, col: usize, out: usize },
    GatherRows { src: usize, idx: Vec<usize>, out: usize },
    TakePerRow { src: usize, cols: Vec<usize>, out: usize },
    ConcatRows { parts: Vec<usize>, out: usize },
    ConcatCols { parts: Vec<usize>, out: usize },
    Attention { q: usize, keys: Vec<usize>, vals: Vec<usize>, spec: AttentionSpec, probs: Vec<S>, out: usize },
    CrossEntropyMean { logp: usize, targets: Vec<usize>, out: usize },
    SoftCrossEntropyMean { logp: usize, target: Tensor<S>, out: usize },
    MixtureCrossEntropy { weights: usize, target_logp: usize, out: usize },
    StickBreak { p: usize, out: usize },
    L2NormRows { a: usize, out: usize },
    SumAll { a: usize, out: usize },
    MeanAll { a: usize, out: usize },
    LinearCombination { terms: Vec<(usize, S)>, out: usize },
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
}

/// Gradient buffers produced by one reverse pass, addressed by [`VarId`].
pub struct Grads<S> {
    bufs: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. this var; `None` if no path reached it.
    pub fn get(&self, id: VarId) -> Option<&Tensor<S>> {
        self.bufs.get(id.0).and_then(|b| b.as_ref())
    }

    /// Move a gradient out (for clipping / optimizer ownership).
    pub fn take(&mut self, id: VarId) -> Option<Tensor<S>> {
        self.bufs.get_mut(id.0).and_then(Option::take)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    /// Push a leaf (parameter, input or constant). Leaves receive gradients
    /// like any other node; callers read the ones they care about.
    pub fn leaf(&mut self, t: Tensor<S>) -> VarId {
        assert!(t.all_finite(), "non-finite value in leaf");
        self.push(t)
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, t: Tensor<S>) -> VarId {
        self.nodes.push(t);
        VarId(self.nodes.len() - 1)
    }

    fn finish(&mut self, op_name: &'static str, t: Tensor<S>) -> VarId {
        assert!(t.all_finite(), "non-finite value in {op_name}");
        self.push(t)
    }

    // ─── Dense products ──────────────────────────────────────────────────────

    /// `a (m×k) · b (k×n) → (m×n)`
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(ta.cols(), tb.rows(), "matmul: inner dims {}×{} · {}×{}", ta.rows(), ta.cols(), tb.rows(), tb.cols());
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_into(ta.as_slice(), tb.as_slice(), out.as_mut_slice(), m, k, n);
        let out = self.finish("matmul", out);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out: out.0 });
        out
    }

    /// `a (m×k) · bᵀ (k×n from b: n×k) → (m×n)` — the scoring product against
    /// a row-major embedding table without materializing its transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(ta.cols(), tb.cols(), "matmul_nt: inner dims");
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        matmul_nt_into(ta.as_slice(), tb.as_slice(), out.as_mut_slice(), m, k, n);
        let out = self.finish("matmul_nt", out);
        self.ops.push(Op::MatmulNt { a: a.0, b: b.0, out: out.0 });
        out
    }

    // ─── Elementwise ─────────────────────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip("add", a, b, |x, y| x + y);
        self.ops.push(Op::Add { a: a.0, b: b.0, out: out.0 });
        out
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip("sub", a, b, |x, y| x - y);
        self.ops.push(Op::Sub { a: a.0, b: b.0, out: out.0 });
        out
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip("mul", a, b, |x, y| x * y);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out: out.0 });
        out
    }

    fn zip(&mut self, name: &'static str, a: VarId, b: VarId, f: impl Fn(S, S) -> S) -> VarId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert!(
            ta.rows() == tb.rows() && ta.cols() == tb.cols(),
            "{name}: shape {}×{} vs {}×{}",
            ta.rows(), ta.cols(), tb.rows(), tb.cols()
        );
        let data = ta.iter().zip(tb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.finish(name, t)
    }

    /// Row-broadcast add: `a (m×n) + bias (1×n)`.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[bias.0]);
        assert_eq!(tb.rows(), 1, "add_bias: bias must be 1×n");
        assert_eq!(ta.cols(), tb.cols(), "add_bias: width mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (v, &b) in row.iter_mut().zip(tb.row(0)) {
                *v += b;
            }
        }
        let out = self.finish("add_bias", out);
        self.ops.push(Op::AddBias { a: a.0, bias: bias.0, out: out.0 });
        out
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let cs = S::from_f64(c);
        let ta = &self.nodes[a.0];
        let data = ta.iter().map(|&x| x * cs).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let out = self.finish("scale", t);
        self.ops.push(Op::Scale { a: a.0, c: cs, out: out.0 });
        out
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let out = self.map("relu", a, |x| if x > S::zero() { x } else { S::zero() });
        self.ops.push(Op::Relu { a: a.0, out: out.0 });
        out
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.map("sigmoid", a, sigmoid_stable);
        self.ops.push(Op::Sigmoid { a: a.0, out: out.0 });
        out
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let out = self.map("tanh", a, |x| x.tanh());
        self.ops.push(Op::Tanh { a: a.0, out: out.0 });
        out
    }

    fn map(&mut self, name: &'static str, a: VarId, f: impl Fn(S) -> S) -> VarId {
        let ta = &self.nodes[a.0];
        let data = ta.iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.finish(name, t)
    }

    // ─── Normalization & regularization ──────────────────────────────────────

    /// Per-row layer normalization with learnable gain/bias (`1×n` each).
    pub fn layer_norm(&mut self, a: VarId, gain: VarId, bias: VarId, eps: f64) -> VarId {
        let ta = &self.nodes[a.0];
        let (tg, tb) = (&self.nodes[gain.0], &self.nodes[bias.0]);
        let n = ta.cols();
        assert!(tg.rows() == 1 && tg.cols() == n, "layer_norm: gain shape");
        assert!(tb.rows() == 1 && tb.cols() == n, "layer_norm: bias shape");
        assert!(n > 0, "layer_norm: empty rows");
        let epss = S::from_f64(eps);
        let inv_n = S::from_f64(1.0 / n as f64);
        let mut out = Tensor::zeros(ta.rows(), n);
        let mut means = vec![S::zero(); ta.rows()];
        let mut rstds = vec![S::zero(); ta.rows()];
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_n;
            let rstd = S::one() / (var + epss).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let orow = out.row_mut(r);
            for j in 0..n {
                orow[j] = tg.at(0, j) * ((row[j] - mean) * rstd) + tb.at(0, j);
            }
        }
        let out = self.finish("layer_norm", out);
        self.ops.push(Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0, out: out.0, mean: means, rstd: rstds });
        out
    }

    /// Inverted dropout: keeps elements with probability `1−p` and rescales by
    /// `1/(1−p)`, so evaluation needs no compensation. The caller supplies the
    /// counter-derived stream for this op site — see [`super::rng`].
    pub fn dropout(&mut self, a: VarId, p: f64, rng: &mut ChaCha8Rng) -> VarId {
        assert!((0.0..1.0).contains(&p), "dropout: p={p} outside [0,1)");
        if p == 0.0 {
            // Recorded as identity scale so graph structure is stable.
            return self.scale(a, 1.0);
        }
        let keep_inv = S::from_f64(1.0 / (1.0 - p));
        let ta = &self.nodes[a.0];
        let mask: Vec<u8> = (0..ta.len()).map(|_| u8::from(rng.gen::<f64>() >= p)).collect();
        let data = ta.iter().zip(&mask).map(|(&x, &m)| if m == 1 { x * keep_inv } else { S::zero() }).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let out = self.finish("dropout", t);
        self.ops.push(Op::Dropout { a: a.0, out: out.0, mask, keep_inv });
        out
    }

    // ─── Softmax family ──────────────────────────────────────────────────────

    /// Row-wise softmax, max-stabilized.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0];
        let mut out = ta.clone();
        for r in 0..out.rows() {
            super::softmax_in_place(out.row_mut(r));
        }
        let out = self.finish("softmax_rows", out);
        self.ops.push(Op::SoftmaxRows { a: a.0, out: out.0 });
        out
    }

    /// Row-wise log-softmax — the bridge into every loss here, keeping
    /// distributions in log space until the final reduction.
    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0];
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mut max = S::neg_infinity();
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for &v in row.iter() {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = self.finish("log_softmax_rows", out);
        self.ops.push(Op::LogSoftmaxRows { a: a.0, out: out.0 });
        out
    }

    /// Overwrite one column with a large negative logit (disables an id —
    /// used to keep the padding item out of every distribution).
    pub fn mask_col(&mut self, a: VarId, col: usize) -> VarId {
        let ta = &self.nodes[a.0];
        assert!(col < ta.cols(), "mask_col: col {col} out of {}", ta.cols());
        let mut out = ta.clone();
        for r in 0..out.rows() {
            *out.at_mut(r, col) = S::from_f64(NEG_MASK);
        }
        let out = self.finish("mask_col", out);
        self.ops.push(Op::MaskCol { a: a.0, col, out: out.0 });
        out
    }

    // ─── Structure ───────────────────────────────────────────────────────────

    /// Row gather: `out[g] = src[idx[g]]`. Repeated indices are fine; the
    /// reverse pass scatter-adds serially in a fixed order (embedding lookups
    /// rely on this for deterministic gradients).
    pub fn gather_rows(&mut self, src: VarId, idx: &[usize]) -> VarId {
        let ts = &self.nodes[src.0];
        let mut out = Tensor::zeros(idx.len(), ts.cols());
        for (g, &i) in idx.iter().enumerate() {
            assert!(i < ts.rows(), "gather_rows: index {i} out of {} rows", ts.rows());
            out.row_mut(g).copy_from_slice(ts.row(i));
        }
        let out = self.finish("gather_rows", out);
        self.ops.push(Op::GatherRows { src: src.0, idx: idx.to_vec(), out: out.0 });
        out
    }

    /// Per-row element pick: `out[r, 0] = src[r, cols[r]]` — extracts each
    /// row's target log-probability.
    pub fn take_per_row(&mut self, src: VarId, cols: &[usize]) -> VarId {
        let ts = &self.nodes[src.0];
        assert_eq!(cols.len(), ts.rows(), "take_per_row: one column per row");
        let mut out = Tensor::zeros(ts.rows(), 1);
        for (r, &c) in cols.iter().enumerate() {
            assert!(c < ts.cols(), "take_per_row: col {c} out of {}", ts.cols());
            *out.at_mut(r, 0) = ts.at(r, c);
        }
        let out = self.finish("take_per_row", out);
        self.ops.push(Op::TakePerRow { src: src.0, cols: cols.to_vec(), out: out.0 });
        out
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.nodes[parts[0].0].cols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let t = &self.nodes[p.0];
            assert_eq!(t.cols(), cols, "concat_rows: width mismatch");
            data.extend_from_slice(t.as_slice());
        }
        let out = self.finish("concat_rows", Tensor::from_vec(rows, cols, data));
        self.ops.push(Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect(), out: out.0 });
        out
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.nodes[parts[0].0].rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let t = &self.nodes[p.0];
            assert_eq!(t.rows(), rows, "concat_cols: height mismatch");
            for r in 0..rows {
                out.row_mut(r)[at..at + t.cols()].copy_from_slice(t.row(r));
            }
            at += t.cols();
        }
        let out = self.finish("concat_cols", out);
        self.ops.push(Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect(), out: out.0 });
        out
    }

    // ─── Attention ───────────────────────────────────────────────────────────

    /// Fused multi-head causal attention over partitioned key/value caches.
    /// `keys[i]`/`vals[i]` pair up with `spec.part_widths[i]`; see
    /// [`AttentionSpec`] for the layout contract.
    pub fn attention(&mut self, q: VarId, keys: &[VarId], vals: &[VarId], spec: AttentionSpec) -> VarId {
        let krefs: Vec<&Tensor<S>> = keys.iter().map(|k| &self.nodes[k.0]).collect();
        let vrefs: Vec<&Tensor<S>> = vals.iter().map(|v| &self.nodes[v.0]).collect();
        let (out, probs) = attention::forward(&self.nodes[q.0], &krefs, &vrefs, &spec);
        let out = self.finish("attention", out);
        self.ops.push(Op::Attention {
            q: q.0,
            keys: keys.iter().map(|k| k.0).collect(),
            vals: vals.iter().map(|v| v.0).collect(),
            spec,
            probs,
            out: out.0,
        });
        out
    }

    // ─── Losses ──────────────────────────────────────────────────────────────

    /// Mean over rows of `−logp[r, targets[r]]`. Input must already be
    /// log-probabilities (use [`Tape::log_softmax_rows`]).
    pub fn cross_entropy_mean(&mut self, logp: VarId, targets: &[usize]) -> VarId {
        let tl = &self.nodes[logp.0];
        assert_eq!(targets.len(), tl.rows(), "cross_entropy_mean: one target per row");
        let mut sum = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < tl.cols(), "cross_entropy_mean: target {t} out of {} items", tl.cols());
            sum -= tl.at(r, t);
        }
        let v = sum / S::from_f64(targets.len() as f64);
        let out = self.finish("cross_entropy_mean", Tensor::from_vec(1, 1, vec![v]));
        self.ops.push(Op::CrossEntropyMean { logp: logp.0, targets: targets.to_vec(), out: out.0 });
        out
    }

    /// Mean over rows of `−Σ_j target[r,j]·logp[r,j]` with a constant target
    /// (teacher) distribution — gradients flow into `logp` only. Each target
    /// row must be a distribution.
    pub fn soft_cross_entropy_mean(&mut self, logp: VarId, target: &Tensor<S>) -> VarId {
        let tl = &self.nodes[logp.0];
        assert!(
            target.rows() == tl.rows() && target.cols() == tl.cols(),
            "soft_cross_entropy_mean: target shape {}×{} vs logp {}×{}",
            target.rows(), target.cols(), tl.rows(), tl.cols()
        );
        // Loose enough for f32 accumulation noise over wide item rows, tight
        // enough to always catch an unnormalized target.
        let tol = S::from_f64(1e-4);
        for r in 0..target.rows() {
            let s: S = target.row(r).iter().copied().sum();
            assert!(
                (s - S::one()).abs() <= tol,
                "contract violation: soft_cross_entropy_mean target row {r} sums to {s}, not 1"
            );
        }
        let mut sum = S::zero();
        for r in 0..tl.rows() {
            for (t, l) in target.row(r).iter().zip(tl.row(r)) {
                sum -= *t * *l;
            }
        }
        let v = sum / S::from_f64(tl.rows() as f64);
        let out = self.finish("soft_cross_entropy_mean", Tensor::from_vec(1, 1, vec![v]));
        self.ops.push(Op::SoftCrossEntropyMean { logp: logp.0, target: target.clone(), out: out.0 });
        out
    }

    /// Soft-halting objective: `−mean_r ln(Σ_s w[r,s]·exp(lp[r,s]) + ε)` where
    /// `lp` holds per-step target log-probabilities. Equivalent to the cross
    /// entropy of the stick-breaking mixture Σ w_s·ŷ^{(s)} at the target,
    /// without materializing mixed distributions.
    pub fn mixture_cross_entropy(&mut self, weights: VarId, target_logp: VarId) -> VarId {
        let (tw, tl) = (&self.nodes[weights.0], &self.nodes[target_logp.0]);
        assert!(
            tw.rows() == tl.rows() && tw.cols() == tl.cols(),
            "mixture_cross_entropy: weights {}×{} vs logp {}×{}",
            tw.rows(), tw.cols(), tl.rows(), tl.cols()
        );
        let eps = S::from_f64(PROB_EPS);
        let mut sum = S::zero();
        for r in 0..tw.rows() {
            let mut z = S::zero();
            for (w, l) in tw.row(r).iter().zip(tl.row(r)) {
                z += *w * l.exp();
            }
            sum -= (z + eps).ln();
        }
        let v = sum / S::from_f64(tw.rows() as f64);
        let out = self.finish("mixture_cross_entropy", Tensor::from_vec(1, 1, vec![v]));
        self.ops.push(Op::MixtureCrossEntropy { weights: weights.0, target_logp: target_logp.0, out: out.0 });
        out
    }

    /// Stick-breaking halting weights. Input: halting probabilities for steps
    /// `1..T−1` as `(m × T−1)`; output `(m × T)` with the final step's
    /// probability forced to one, so each row sums to exactly 1:
    /// `w_t = p_t·Π_{j<t}(1−p_j)` and `w_T = Π_{j<T}(1−p_j)`.
    pub fn stick_break(&mut self, p: VarId) -> VarId {
        let tp = &self.nodes[p.0];
        let s1 = tp.cols();
        let mut out = Tensor::zeros(tp.rows(), s1 + 1);
        for r in 0..tp.rows() {
            let prow = tp.row(r);
            let mut acc = S::one();
            let orow = out.row_mut(r);
            for (s, &ps) in prow.iter().enumerate() {
                debug_assert!(ps >= S::zero() && ps <= S::one(), "stick_break: p outside [0,1]");
                orow[s] = ps * acc;
                acc *= S::one() - ps;
            }
            orow[s1] = acc;
        }
        let out = self.finish("stick_break", out);
        self.ops.push(Op::StickBreak { p: p.0, out: out.0 });
        out
    }

    // ─── Reductions ──────────────────────────────────────────────────────────

    /// Euclidean norm of each row → `(m × 1)`.
    pub fn l2_norm_rows(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0];
        let mut out = Tensor::zeros(ta.rows(), 1);
        for r in 0..ta.rows() {
            *out.at_mut(r, 0) = super::l2_norm(ta.row(r));
        }
        let out = self.finish("l2_norm_rows", out);
        self.ops.push(Op::L2NormRows { a: a.0, out: out.0 });
        out
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v: S = self.nodes[a.0].iter().copied().sum();
        let out = self.finish("sum_all", Tensor::from_vec(1, 1, vec![v]));
        self.ops.push(Op::SumAll { a: a.0, out: out.0 });
        out
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0];
        assert!(!ta.is_empty(), "mean_all: empty tensor");
        let v: S = ta.iter().copied().sum::<S>() / S::from_f64(ta.len() as f64);
        let out = self.finish("mean_all", Tensor::from_vec(1, 1, vec![v]));
        self.ops.push(Op::MeanAll { a: a.0, out: out.0 });
        out
    }

    /// `Σ_i c_i·x_i` over same-shaped vars — assembles weighted loss totals.
    pub fn linear_combination(&mut self, terms: &[(VarId, f64)]) -> VarId {
        assert!(!terms.is_empty(), "linear_combination: no terms");
        let (r0, c0) = {
            let t = &self.nodes[terms[0].0 .0];
            (t.rows(), t.cols())
        };
        let mut out = Tensor::zeros(r0, c0);
        for &(id, c) in terms {
            let t = &self.nodes[id.0];
            assert!(t.rows() == r0 && t.cols() == c0, "linear_combination: shape mismatch");
            let cs = S::from_f64(c);
            for (o, &x) in out.as_mut_slice().iter_mut().zip(t.iter()) {
                *o += cs * x;
            }
        }
        let out = self.finish("linear_combination", out);
        self.ops.push(Op::LinearCombination {
            terms: terms.iter().map(|&(id, c)| (id.0, S::from_f64(c))).collect(),
            out: out.0,
        });
        out
    }

    // ─── Reverse pass ────────────────────────────────────────────────────────

    /// Run the reverse pass from a scalar loss. Deterministic: the op list is
    /// replayed in reverse exactly once, and every accumulation happens in a
    /// fixed serial order per buffer (parallel kernels split only over output
    /// rows, never over summation order).
    pub fn backward(&self, loss: VarId) -> Grads<S> {
        let lt = &self.nodes[loss.0];
        assert_eq!(lt.len(), 1, "backward: loss must be scalar, got {}×{}", lt.rows(), lt.cols());
        let mut g: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::from_vec(1, 1, vec![S::one()]));

        for op in self.ops.iter().rev() {
            self.reverse_op(op, &mut g);
        }
        Grads { bufs: g }
    }

    fn grad_buf<'g>(&self, g: &'g mut [Option<Tensor<S>>], id: usize) -> &'g mut Tensor<S> {
        let t = &self.nodes[id];
        g[id].get_or_insert_with(|| Tensor::zeros(t.rows(), t.cols()))
    }

    #[allow(clippy::too_many_lines)]
    fn reverse_op(&self, op: &Op<S>, g: &mut [Option<Tensor<S>>]) {
        // The output buffer is final once we reach its producer; take it.
        macro_rules! dout {
            ($out:expr) => {
                match g[*$out].take() {
                    Some(d) => d,
                    None => return, // no path from the loss; skip
                }
            };
        }
        match op {
            Op::Matmul { a, b, out } => {
                let d = dout!(out);
                let (ta, tb) = (&self.nodes[*a], &self.nodes[*b]);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA += dC·Bᵀ
                matmul_nt_acc(d.as_slice(), tb.as_slice(), self.grad_buf(g, *a).as_mut_slice(), m, n, k);
                // dB += Aᵀ·dC
                matmul_tn_acc(ta.as_slice(), d.as_slice(), self.grad_buf(g, *b).as_mut_slice(), m, k, n);
            }
            Op::MatmulNt { a, b, out } => {
                let d = dout!(out);
                let (ta, tb) = (&self.nodes[*a], &self.nodes[*b]);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // dA += dC·B
                matmul_acc(d.as_slice(), tb.as_slice(), self.grad_buf(g, *a).as_mut_slice(), m, n, k);
                // dB += dCᵀ·A
                matmul_tn_acc(d.as_slice(), ta.as_slice(), self.grad_buf(g, *b).as_mut_slice(), m, n, k);
            }
            Op::Add { a, b, out } => {
                let d = dout!(out);
                acc_into(self.grad_buf(g, *a), d.as_slice(), S::one());
                acc_into(self.grad_buf(g, *b), d.as_slice(), S::one());
            }
            Op::Sub { a, b, out } => {
                let d = dout!(out);
                acc_into(self.grad_buf(g, *a), d.as_slice(), S::one());
                acc_into(self.grad_buf(g, *b), d.as_slice(), -S::one());
            }
            Op::Mul { a, b, out } => {
                let d = dout!(out);
                {
                    let tb = &self.nodes[*b];
                    let ga = self.grad_buf(g, *a);
                    for ((gv, &dv), &bv) in ga.as_mut_slice().iter_mut().zip(d.as_slice()).zip(tb.iter()) {
                        *gv += dv * bv;
                    }
                }
                let ta = &self.nodes[*a];
                let gb = self.grad_buf(g, *b);
                for ((gv, &dv), &av) in gb.as_mut_slice().iter_mut().zip(d.as_slice()).zip(ta.iter()) {
                    *gv += dv * av;
                }
            }
            Op::AddBias { a, bias, out } => {
                let d = dout!(out);
                acc_into(self.grad_buf(g, *a), d.as_slice(), S::one());
                let gb = self.grad_buf(g, *bias);
                let n = gb.cols();
                for r in 0..d.rows() {
                    let row = d.row(r);
                    let brow = gb.row_mut(0);
                    for j in 0..n {
                        brow[j] += row[j];
                    }
                }
            }
            Op::Scale { a, c, out } => {
                let d = dout!(out);
                acc_into(self.grad_buf(g, *a), d.as_slice(), *c);
            }
            Op::Relu { a, out } => {
                let d = dout!(out);
                let y = &self.nodes[*out];
                let ga = self.grad_buf(g, *a);
                for ((gv, &dv), &yv) in ga.as_mut_slice().iter_mut().zip(d.as_slice()).zip(y.iter()) {
                    if yv > S::zero() {
                        *gv += dv;
                    }
                }
            }
            Op::Sigmoid { a, out } => {
                let d = dout!(out);
                let y = &self.nodes[*out];
                let ga = self.grad_buf(g, *a);
                for ((gv, &dv), &yv) in ga.as_mut_slice().iter_mut().zip(d.as_slice()).zip(y.iter()) {
                    *gv += dv * yv * (S::one() - yv);
                }
            }
            Op::Tanh { a, out } => {
                let d = dout!(out);
                let y = &self.nodes[*out];
                let ga = self.grad_buf(g, *a);
                for ((gv, &dv), &yv) in ga.as_mut_slice().iter_mut().zip(d.as_slice()).zip(y.iter()) {
                    *gv += dv * (S::one() - yv * yv);
                }
            }
            Op::LayerNorm { a, gain, bias, out, mean, rstd } => {
                let d = dout!(out);
                let ta = &self.nodes[*a];
                let tg = &self.nodes[*gain];
                let n = ta.cols();
                let inv_n = S::from_f64(1.0 / n as f64);
                {
                    let ga = self.grad_buf(g, *a);
                    for r in 0..ta.rows() {
                        let xrow = ta.row(r);
                        let drow = d.row(r);
                        let (mu, rs) = (mean[r], rstd[r]);
                        // dyg = dy∘gain; dx = rstd·(dyg − mean(dyg) − x̂·mean(dyg∘x̂))
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..n {
                            let xh = (xrow[j] - mu) * rs;
                            let dyg = drow[j] * tg.at(0, j);
                            s1 += dyg;
                            s2 += dyg * xh;
                        }
                        s1 *= inv_n;
                        s2 *= inv_n;
                        let grow = ga.row_mut(r);
                        for j in 0..n {
                            let xh = (xrow[j] - mu) * rs;
                            let dyg = drow[j] * tg.at(0, j);
                            grow[j] += rs * (dyg - s1 - xh * s2);
                        }
                    }
                }
                {
                    let gg = self.grad_buf(g, *gain);
                    for r in 0..ta.rows() {
                        let xrow = ta.row(r);
                        let drow = d.row(r);
                        let (mu, rs) = (mean[r], rstd[r]);
                        let grow = gg.row_mut(0);
                        for j in 0..n {
                            grow[j] += drow[j] * (xrow[j] - mu) * rs;
                        }
                    }
                }
                let gb = self.grad_buf(g, *bias);
                for r in 0..ta.rows() {
                    let drow = d.row(r);
                    let brow = gb.row_mut(0);
                    for j in 0..n {
                        brow[j] += drow[j];
                    }
                }
            }
            Op::Dropout { a, out, mask, keep_inv } => {
                let d = dout!(out);
                let ga = self.grad_buf(g, *a);
                for ((gv, &dv), &m) in ga.as_mut_slice().iter_mut().zip(d.as_slice()).zip(mask) {
                    if m == 1 {
                        *gv += dv * *keep_inv;
                    }
                }
            }
            Op::SoftmaxRows { a, out } => {
                let d = dout!(out);
                let y = &self.nodes[*out];
                let ga = self.grad_buf(g, *a);
                for r in 0..y.rows() {
                    let yrow = y.row(r);
                    let drow = d.row(r);
                    let dot: S = yrow.iter().zip(drow).map(|(&yv, &dv)| yv * dv).sum();
                    let grow = ga.row_mut(r);
                    for j in 0..yrow.len() {
                        grow[j] += yrow[j] * (drow[j] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows { a, out } => {
                let d = dout!(out);
                let y = &self.nodes[*out];
                let ga = self.grad_buf(g, *a);
                for r in 0..y.rows() {
                    let yrow = y.row(r);
                    let drow = d.row(r);
                    let dsum: S = drow.iter().copied().sum();
                    let grow = ga.row_mut(r);
                    for j in 0..yrow.len() {
                        grow[j] += drow[j] - yrow[j].exp() * dsum;
                    }
                }
            }
            Op::MaskCol { a, col, out } => {
                let d = dout!(out);
                let ga = self.grad_buf(g, *a);
                for r in 0..d.rows() {
                    let drow = d.row(r);
                    let grow = ga.row_mut(r);
                    for j in 0..drow.len() {
                        if j != *col {
                            grow[j] += drow[j];
                        }
                    }
                }
            }
            Op::GatherRows { src, idx, out } => {
                let d = dout!(out);
                let gs = self.grad_buf(g, *src);
                // Serial scatter-add: repeated indices must accumulate in a
                // fixed order for bit-stable gradients.
                for (r, &i) in idx.iter().enumerate() {
                    let drow = d.row(r);
                    let grow = gs.row_mut(i);
                    for j in 0..drow.len() {
                        grow[j] += drow[j];
                    }
                }
            }
            Op::TakePerRow { src, cols, out } => {
                let d = dout!(out);
                let gs = self.grad_buf(g, *src);
                for (r, &c) in cols.iter().enumerate() {
                    *gs.at_mut(r, c) += d.at(r, 0);
                }
            }
            Op::ConcatRows { parts, out } => {
                let d = dout!(out);
                let mut at = 0;
                for p in parts {
                    let rows = self.nodes[*p].rows();
                    let gp = self.grad_buf(g, *p);
                    for r in 0..rows {
                        let drow = d.row(at + r);
                        let grow = gp.row_mut(r);
                        for j in 0..drow.len() {
                            grow[j] += drow[j];
                        }
                    }
                    at += rows;
                }
            }
            Op::ConcatCols { parts, out } => {
                let d = dout!(out);
                let mut at = 0;
                for p in parts {
                    let cols = self.nodes[*p].cols();
                    let gp = self.grad_buf(g, *p);
                    for r in 0..gp.rows() {
                        let drow = &d.row(r)[at..at + cols];
                        let grow = gp.row_mut(r);
                        for j in 0..cols {
                            grow[j] += drow[j];
                        }
                    }
                    at += cols;
                }
            }
            Op::Attention { q, keys, vals, spec, probs, out } => {
                let d = dout!(out);
                let krefs: Vec<&Tensor<S>> = keys.iter().map(|k| &self.nodes[*k]).collect();
                let vrefs: Vec<&Tensor<S>> = vals.iter().map(|v| &self.nodes[*v]).collect();
                let (dq, dks, dvs) = attention::backward(&d, &self.nodes[*q], &krefs, &vrefs, probs, spec);
                // Local buffers summed in serially — q/k/v may alias.
                acc_into(self.grad_buf(g, *q), dq.as_slice(), S::one());
                for (k, dk) in keys.iter().zip(dks) {
                    acc_into(self.grad_buf(g, *k), dk.as_slice(), S::one());
                }
                for (v, dv) in vals.iter().zip(dvs) {
                    acc_into(self.grad_buf(g, *v), dv.as_slice(), S::one());
                }
            }
            Op::CrossEntropyMean { logp, targets, out } => {
                let d = dout!(out).scalar();
                let scale = d / S::from_f64(targets.len() as f64);
                let gl = self.grad_buf(g, *logp);
                for (r, &t) in targets.iter().enumerate() {
                    *gl.at_mut(r, t) -= scale;
                }
            }
            Op::SoftCrossEntropyMean { logp, target, out } => {
                let d = dout!(out).scalar();
                let scale = d / S::from_f64(target.rows() as f64);
                let gl = self.grad_buf(g, *logp);
                for r in 0..target.rows() {
                    let trow = target.row(r);
                    let grow = gl.row_mut(r);
                    for j in 0..trow.len() {
                        grow[j] -= scale * trow[j];
                    }
                }
            }
            Op::MixtureCrossEntropy { weights, target_logp, out } => {
                let d = dout!(out).scalar();
                let (tw, tl) = (&self.nodes[*weights], &self.nodes[*target_logp]);
                let eps = S::from_f64(PROB_EPS);
                let m = S::from_f64(tw.rows() as f64);
                for r in 0..tw.rows() {
                    let wrow = tw.row(r);
                    let lrow = tl.row(r);
                    let mut z = S::zero();
                    for (w, l) in wrow.iter().zip(lrow) {
                        z += *w * l.exp();
                    }
                    let common = -d / (m * (z + eps));
                    {
                        let gw = self.grad_buf(g, *weights);
                        let growp = gw.row_mut(r);
                        for (j, l) in lrow.iter().enumerate() {
                            growp[j] += common * l.exp();
                        }
                    }
                    let gl = self.grad_buf(g, *target_logp);
                    let growl = gl.row_mut(r);
                    for (j, (w, l)) in wrow.iter().zip(lrow).enumerate() {
                        growl[j] += common * *w * l.exp();
                    }
                }
            }
            Op::StickBreak { p, out } => {
                let d = dout!(out);
                let tp = &self.nodes[*p];
                let s1 = tp.cols();
                let gp = self.grad_buf(g, *p);
                for r in 0..tp.rows() {
                    let prow = tp.row(r);
                    let drow = d.row(r);
                    let grow = gp.row_mut(r);
                    // ∂w_s/∂p_k assembled by explicit skip-products; T is tiny
                    // (≤ 6) so the cubic cost is irrelevant and no division by
                    // (1−p) is needed (p can legitimately sit at 1).
                    for k in 0..s1 {
                        let mut dk = S::zero();
                        // s == k term: Π_{j<k}(1−p_j)
                        let mut pref = S::one();
                        for &pj in &prow[..k] {
                            pref *= S::one() - pj;
                        }
                        dk += drow[k] * pref;
                        // s > k terms: −p_s·Π_{j<s, j≠k}(1−p_j), final −Π_{j≠k}
                        for s in k + 1..=s1 {
                            let mut prod = S::one();
                            for (j, &pj) in prow[..s.min(s1)].iter().enumerate() {
                                if j != k {
                                    prod *= S::one() - pj;
                                }
                            }
                            let coeff = if s < s1 { prow[s] * prod } else { prod };
                            dk -= drow[s] * coeff;
                        }
                        grow[k] += dk;
                    }
                }
            }
            Op::L2NormRows { a, out } => {
                let d = dout!(out);
                let ta = &self.nodes[*a];
                let y = &self.nodes[*out];
                let ga = self.grad_buf(g, *a);
                for r in 0..ta.rows() {
                    let norm = y.at(r, 0);
                    if norm > S::zero() {
                        let s = d.at(r, 0) / norm;
                        let xrow = ta.row(r);
                        let grow = ga.row_mut(r);
                        for j in 0..xrow.len() {
                            grow[j] += s * xrow[j];
                        }
                    }
                    // At exactly zero the subgradient 0 is used.
                }
            }
            Op::SumAll { a, out } => {
                let d = dout!(out).scalar();
                let ga = self.grad_buf(g, *a);
                for gv in ga.as_mut_slice() {
                    *gv += d;
                }
            }
            Op::MeanAll { a, out } => {
                let d = dout!(out).scalar();
                let ta = &self.nodes[*a];
                let s = d / S::from_f64(ta.len() as f64);
                let ga = self.grad_buf(g, *a);
                for gv in ga.as_mut_slice() {
                    *gv += s;
                }
            }
            Op::LinearCombination { terms, out } => {
                let d = dout!(out);
                for &(id, c) in terms {
                    acc_into(self.grad_buf(g, id), d.as_slice(), c);
                }
            }
        }
    }
}

#[inline]
fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn acc_into<S: Scalar>(dst: &mut Tensor<S>, src: &[S], c: S) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.as_mut_slice().iter_mut().zip(src) {
        *d += c * s;
    }
}

// ─── Matmul kernels ──────────────────────────────────────────────────────────
//
// All kernels parallelize over *output rows* only, so each element is summed
// serially in index order regardless of thread count — gradients stay
// bit-identical whatever `DTREC_THREADS` says. The i-k-j loop order keeps the
// inner loop contiguous for auto-vectorization.

/// Rows below this stay serial; chunking overhead dominates otherwise.
const PAR_MIN_ROWS: usize = 64;

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let body = |i: usize, orow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            body(i, orow);
        }
    }
}

/// out (m×n) += a (m×k) · b (k×n)
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let body = |i: usize, orow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            body(i, orow);
        }
    }
}

/// out (m×n) = a (m×k) · bᵀ where b is (n×k)
fn matmul_nt_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let body = |i: usize, orow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, ov) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = S::zero();
            for l in 0..k {
                dot += arow[l] * brow[l];
            }
            *ov = dot;
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            body(i, orow);
        }
    }
}

/// out (m×n) += a (m×k) · bᵀ where b is (n×k)
fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let body = |i: usize, orow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, ov) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = S::zero();
            for l in 0..k {
                dot += arow[l] * brow[l];
            }
            *ov += dot;
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            body(i, orow);
        }
    }
}

/// out (k×n) += aᵀ·d where a is (m×k), d is (m×n)
fn matmul_tn_acc<S: Scalar>(a: &[S], d: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let body = |l: usize, orow: &mut [S]| {
        for i in 0..m {
            let av = a[i * k + l];
            if av != S::zero() {
                let drow = &d[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * drow[j];
                }
            }
        }
    };
    if k >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(l, orow)| body(l, orow));
    } else {
        for (l, orow) in out.chunks_mut(n).enumerate() {
            body(l, orow);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{derive_rng, stream};

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let prod = tape.matmul(eye, a);
        assert_eq!(tape.value(prod), tape.value(a));

        let b = tape.leaf(t(2, 1, &[1.0, 1.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = derive_rng(1, &[stream::TEST, 1]);
        let a = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(5, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let c = tape.matmul_nt(va, vb);
        for i in 0..3 {
            for j in 0..5 {
                let dot: f64 = (0..4).map(|l| a.at(i, l) * b.at(j, l)).sum();
                assert!((tape.value(c).at(i, j) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut rng = derive_rng(2, &[stream::TEST, 2]);
        let x = Tensor::<f64>::randn(6, 9, 3.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax_rows(v);
        for r in 0..6 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            assert!(tape.value(s).row(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn log_softmax_agrees_with_softmax_log() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(1, 3, &[0.2, -1.0, 2.5]));
        let ls = tape.log_softmax_rows(v);
        let s = tape.softmax_rows(v);
        for j in 0..3 {
            assert!((tape.value(ls).at(0, j) - tape.value(s).at(0, j).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_hand_values() {
        // Uniform over n → ln n; near-one-hot at the target → ≈0.
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 4, &[0.0, 0.0, 0.0, 0.0]));
        let lp = tape.log_softmax_rows(logits);
        let ce = tape.cross_entropy_mean(lp, &[2]);
        assert!((tape.value(ce).scalar() - 4.0f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 3, &[50.0, 0.0, 0.0]));
        let lp = tape.log_softmax_rows(logits);
        let ce = tape.cross_entropy_mean(lp, &[0]);
        assert!(tape.value(ce).scalar().abs() < 1e-12);
    }

    #[test]
    fn soft_cross_entropy_reduces_to_hard_on_one_hot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 3, &[0.3, -0.7, 1.1]));
        let lp = tape.log_softmax_rows(logits);
        let hard = tape.cross_entropy_mean(lp, &[1]);
        let soft = tape.soft_cross_entropy_mean(lp, &t(1, 3, &[0.0, 1.0, 0.0]));
        assert!((tape.value(hard).scalar() - tape.value(soft).scalar()).abs() < 1e-12);
    }

    #[test]
    fn soft_cross_entropy_of_self_is_entropy() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 4, &[0.1, 0.5, -0.3, 0.9]));
        let lp = tape.log_softmax_rows(logits);
        let probs: Vec<f64> = tape.value(lp).iter().map(|l| l.exp()).collect();
        let soft = tape.soft_cross_entropy_mean(lp, &t(1, 4, &probs));
        let h = crate::numerics::entropy(&probs);
        assert!((tape.value(soft).scalar() - h).abs() < 1e-10);
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn soft_cross_entropy_rejects_unnormalized_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 2, &[0.0, 0.0]));
        let lp = tape.log_softmax_rows(logits);
        let _ = tape.soft_cross_entropy_mean(lp, &t(1, 2, &[0.7, 0.7]));
    }

    #[test]
    fn stick_break_worked_example() {
        // p = [0.5, 0.5] with the final step forced → w = [0.5, 0.25, 0.25].
        let mut tape = Tape::new();
        let p = tape.leaf(t(1, 2, &[0.5, 0.5]));
        let w = tape.stick_break(p);
        assert_eq!(tape.value(w).as_slice(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn stick_break_boundary_cases() {
        // p₁=1 → all mass on the first step; all p=0 → all mass on the last.
        let mut tape = Tape::new();
        let p = tape.leaf(t(1, 3, &[1.0, 0.3, 0.9]));
        let w = tape.stick_break(p);
        assert_eq!(tape.value(w).as_slice(), &[1.0, 0.0, 0.0, 0.0]);

        let p0 = tape.leaf(t(1, 3, &[0.0, 0.0, 0.0]));
        let w0 = tape.stick_break(p0);
        assert_eq!(tape.value(w0).as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mask_col_kills_probability_mass() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(2, 3, &[5.0, 1.0, 2.0, 3.0, 0.0, 1.0]));
        let masked = tape.mask_col(logits, 0);
        let lp = tape.log_softmax_rows(masked);
        for r in 0..2 {
            assert!(tape.value(lp).at(r, 0).exp() < 1e-12, "padding column kept mass");
        }
    }

    #[test]
    fn gather_and_take_shapes() {
        let mut tape = Tape::new();
        let e = tape.leaf(t(4, 2, &[0.0, 0.0, 1.0, 10.0, 2.0, 20.0, 3.0, 30.0]));
        let gathered = tape.gather_rows(e, &[3, 1, 1]);
        assert_eq!(tape.value(gathered).as_slice(), &[3.0, 30.0, 1.0, 10.0, 1.0, 10.0]);
        let took = tape.take_per_row(gathered, &[1, 0, 1]);
        assert_eq!(tape.value(took).as_slice(), &[30.0, 1.0, 10.0]);
    }

    #[test]
    fn concat_round_trip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let cat = tape.concat_cols(&[a, b]);
        assert_eq!(tape.value(cat).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum_all(cat);
        let grads = tape.backward(s);
        assert_eq!(grads.get(a).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn dropout_scales_kept_elements_and_is_seed_stable() {
        let x = Tensor::full(8, 8, 1.0f64);
        let run = || {
            let mut rng = derive_rng(9, &[stream::DROPOUT, 0, 0, 0]);
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let d = tape.dropout(v, 0.5, &mut rng);
            tape.value(d).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "same stream must give the same mask");
        for &v in a.iter() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12, "kept values scale by 1/(1−p)");
        }
    }

    #[test]
    fn backward_through_mul_handles_aliased_inputs() {
        // d(x·x)/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[1.0, -2.0, 3.0]));
        let sq = tape.mul(x, x);
        let s = tape.sum_all(sq);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_skips_unreached_branches() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let y = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let _dead = tape.mul(y, y); // never feeds the loss
        let s = tape.sum_all(x);
        let grads = tape.backward(s);
        assert!(grads.get(y).is_none(), "untouched branch must have no gradient");
        assert_eq!(grads.get(x).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn mixture_cross_entropy_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(2, 2, &[0.3, 0.7, 1.0, 0.0]));
        let lp = tape.leaf(t(2, 2, &[(0.2f64).ln(), (0.5f64).ln(), (0.9f64).ln(), (0.1f64).ln()]));
        let loss = tape.mixture_cross_entropy(w, lp);
        let expect = -(((0.3 * 0.2 + 0.7 * 0.5) as f64 + 1e-12).ln() + ((0.9f64) + 1e-12).ln()) / 2.0;
        assert!((tape.value(loss).scalar() - expect).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_output_is_a_hard_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 1, &[1e308]));
        let _ = tape.scale(x, 1e308); // overflows to +inf
    }

    #[test]
    fn attention_weights_rows_sum_to_one_and_causality_holds() {
        let mut rng = derive_rng(5, &[stream::TEST, 5]);
        let b = 2;
        let w = 4;
        let d = 6;
        let h = Tensor::<f64>::randn(b * w, d, 1.0, &mut rng);
        let spec = AttentionSpec {
            batch: b,
            heads: 2,
            query_len: w,
            part_widths: vec![w],
            first_valid: vec![0, 2], // second row has two padding slots
            causal_base: 0,
        };
        let mut tape = Tape::new();
        let v = tape.leaf(h.clone());
        let out = tape.attention(v, &[v], &[v], spec);
        // Padding-query rows are exactly zero.
        for j in 0..d {
            assert_eq!(tape.value(out).at(w, j), 0.0);
            assert_eq!(tape.value(out).at(w + 1, j), 0.0);
        }

        // Causality: perturb the last position; earlier outputs unchanged.
        let mut h2 = h.clone();
        for j in 0..d {
            *h2.at_mut(w - 1, j) += 7.5;
        }
        let mut tape2 = Tape::new();
        let v2 = tape2.leaf(h2);
        let spec2 = AttentionSpec {
            batch: b,
            heads: 2,
            query_len: w,
            part_widths: vec![w],
            first_valid: vec![0, 2],
            causal_base: 0,
        };
        let out2 = tape2.attention(v2, &[v2], &[v2], spec2);
        for i in 0..w - 1 {
            for j in 0..d {
                assert!(
                    (tape.value(out).at(i, j) - tape2.value(out2).at(i, j)).abs() < 1e-12,
                    "future perturbation leaked into position {i}"
                );
            }
        }
    }
}
