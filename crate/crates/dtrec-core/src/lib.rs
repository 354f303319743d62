//! Reasoning-enhanced sequential recommendation, end to end: a small dense-tensor
//! autodiff core, sequence encoders with a latent reasoning loop, clustering-based
//! process supervision, adaptive halting, and the training/evaluation harness that
//! ties them together.
//!
//! The crate is organized as a pipeline:
//!
//! * [`numerics`] — tensors, a Wengert-list tape with reverse-mode gradients, Adam.
//! * [`data`] — interaction-log ingestion, leave-one-out splits, batching, and a
//!   synthetic hierarchical-taxonomy generator for controlled experiments.
//! * [`backbone`] — causal self-attention and GRU encoders plus the reasoning loop
//!   that produces states `r_0..r_T` and per-step item distributions.
//! * [`hps`] — multi-granularity prototype supervision (k-means over the item
//!   embedding table, coarse-to-fine cluster-count schedule, soft-target loss).
//! * [`arh`] — convergence indicators, the learned halting head, stick-breaking
//!   aggregation, and threshold early exit.
//! * [`training`] — objectives, the optimization loop, variants, checkpoints.
//! * [`eval`] — full-ranking metrics, cost accounting, and analysis exports.
//!
//! Everything is deterministic given a single seed; see [`numerics::rng`] for the
//! stream-derivation scheme that all randomness flows through.

pub mod arh;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod hps;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

/// Initialize the global thread pool from the `DTREC_THREADS` environment
/// variable. Call once at process start; later calls are no-ops. Without it the
/// pool sizes itself to the machine.
pub fn init_threads() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("DTREC_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore failure: a pool may already exist in test harnesses.
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
