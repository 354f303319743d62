//! Dense-tensor computation core with reverse-mode differentiation.
//!
//! The design is a classic Wengert list: a [`Tape`] owns every intermediate
//! value produced during one forward pass, each operation records which buffers
//! it read and wrote, and [`Tape::backward`] replays the list in reverse,
//! accumulating gradients into per-node buffers. Tensors are plain row-major
//! matrices; anything higher-rank (batched sequences, attention heads) is
//! expressed as a matrix plus op-level metadata, which keeps the storage model
//! trivial and the kernels easy to audit.
//!
//! Two scalar types are supported through the [`Scalar`] trait: `f32` for
//! production training and `f64` as a shadow path so gradient checks can use
//! central finite differences at tight tolerances.

mod adam;
mod attention;
pub mod gradcheck;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use attention::AttentionSpec;
pub use scalar::Scalar;
pub use tape::{Grads, Tape, VarId};
pub use tensor::Tensor;

/// Numerically-stable softmax of a slice, in place (max-subtraction).
/// Plain helper for non-differentiated paths; the tape has its own fused op.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Shannon entropy −Σ p ln p of a distribution, in nats. Zero entries
/// contribute zero; probabilities are floored at 1e-12 inside the log.
pub fn entropy<S: Scalar>(p: &[S]) -> S {
    let floor = S::from_f64(1e-12);
    let mut h = S::zero();
    for &pi in p {
        if pi > S::zero() {
            h -= pi * pi.max(floor).ln();
        }
    }
    h
}

/// KL divergence Σ p ln(p/q) in nats. `q` entries are floored at 1e-12 before
/// the log so a vanishing denominator cannot produce infinities.
pub fn kl_divergence<S: Scalar>(p: &[S], q: &[S]) -> S {
    assert_eq!(p.len(), q.len(), "kl_divergence: length mismatch");
    let floor = S::from_f64(1e-12);
    let mut d = S::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > S::zero() {
            d += pi * (pi.max(floor).ln() - qi.max(floor).ln());
        }
    }
    d
}

/// Euclidean norm of a slice.
pub fn l2_norm<S: Scalar>(x: &[S]) -> S {
    x.iter().map(|&v| v * v).fold(S::zero(), |a, b| a + b).sqrt()
}
