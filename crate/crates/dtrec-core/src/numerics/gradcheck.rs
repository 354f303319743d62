//! Finite-difference gradient verification on the 64-bit shadow path.
//!
//! The production graph runs in f32; these checks rebuild the same graph in
//! f64 where central differences with h = 1e-3 resolve gradients to far better
//! than the 1e-4 relative tolerance asked of every operation. Relative error
//! uses an absolute floor of 1 in the denominator so near-zero gradients are
//! compared absolutely rather than amplifying roundoff:
//! `rel = |a − n| / max(1, |a|, |n|)`.

use super::{Tape, Tensor, VarId};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

/// Largest relative error between analytic and central-difference gradients
/// over every coordinate of every input. `build` must be a pure function of
/// the input values (re-derive any RNG it needs from a fixed seed inside).
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
{
    // Analytic gradients once.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss);
    let analytic: Vec<Option<Tensor<f64>>> = ids.iter().map(|&id| grads.get(id).cloned()).collect();
    drop(tape);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let orig = input.as_slice()[c];
            work[i].as_mut_slice()[c] = orig + FD_STEP;
            let up = run_loss(&work, &build);
            work[i].as_mut_slice()[c] = orig - FD_STEP;
            let down = run_loss(&work, &build);
            work[i].as_mut_slice()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let ana = analytic[i].as_ref().map_or(0.0, |t| t.as_slice()[c]);
            let denom = 1.0f64.max(ana.abs()).max(numeric.abs());
            let rel = (ana - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

fn run_loss<F>(vals: &[Tensor<f64>], build: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.value(loss).scalar()
}

/// Assert wrapper used throughout the gradient test suite.
pub fn assert_grads_match<F>(name: &str, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
{
    let err = max_rel_error(inputs, build);
    assert!(err < FD_TOL, "{name}: max relative gradient error {err:.3e} ≥ {FD_TOL:.0e}");
}
