//! Adaptive reasoning halting: decide per sequence how many reasoning steps
//! are worth running.
//!
//! Each step t ≥ 1 is summarized by three convergence indicators — prediction
//! entropy, inter-step consistency (KL against the previous step), and
//! representation motion ‖r_t − r_{t−1}‖ — which a small learned head turns
//! into a halting probability. Training aggregates the per-step predictions
//! with stick-breaking weights so the head learns from the ranking objective;
//! inference exits at the first step whose probability clears a threshold.
//!
//! The indicators are plain values, never tape nodes: the halting branch must
//! not bend representation learning, so the backbone only ever feels the
//! halting head through the weights of the aggregated prediction.

use crate::backbone::{ParamStore, Trace};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_rng, stream};
use crate::numerics::{entropy, kl_divergence, Scalar, Tape, Tensor, VarId};
use serde::{Deserialize, Serialize};

/// Hidden width of the halting perceptron.
pub const HALT_HIDDEN: usize = 16;

// ─── Parameter registration ──────────────────────────────────────────────────

/// Append the halting head's four tensors to a parameter store. Must run
/// before the first `forward` so the optimizer and checkpoints see them.
/// Kaiming-scaled: the head's inputs are O(1) normalized indicators, and
/// embedding-scale initialization would pin every output to 0.5.
pub fn register_halting_head<S: Scalar>(params: &mut ParamStore<S>, hidden: usize, seed: u64) {
    let mut rng = derive_rng(seed, &[stream::INIT, 1]);
    params.add("halt.w1", Tensor::randn(3, hidden, (2.0 / 3.0f64).sqrt(), &mut rng));
    params.add("halt.b1", Tensor::zeros(1, hidden));
    params.add("halt.w2", Tensor::randn(hidden, 1, (2.0 / hidden as f64).sqrt(), &mut rng));
    params.add("halt.b2", Tensor::zeros(1, 1));
}

/// Append the state-reading exit head (ablation baseline): one linear unit
/// straight from the d-dimensional reasoning state.
pub fn register_ree_head<S: Scalar>(params: &mut ParamStore<S>, d_model: usize, seed: u64) {
    let mut rng = derive_rng(seed, &[stream::INIT, 2]);
    params.add("ree.w", Tensor::randn(d_model, 1, (1.0 / d_model as f64).sqrt(), &mut rng));
    params.add("ree.b", Tensor::zeros(1, 1));
}

/// Bound tape variables of the halting head, resolved by name from the
/// store's canonical order.
#[derive(Clone, Copy)]
pub struct HaltVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl HaltVars {
    pub fn lookup<S: Scalar>(store: &ParamStore<S>, vars: &[VarId]) -> Self {
        HaltVars {
            w1: vars[store.idx("halt.w1")],
            b1: vars[store.idx("halt.b1")],
            w2: vars[store.idx("halt.w2")],
            b2: vars[store.idx("halt.b2")],
        }
    }
}

#[derive(Clone, Copy)]
pub struct ReeVars {
    pub w: VarId,
    pub b: VarId,
}

impl ReeVars {
    pub fn lookup<S: Scalar>(store: &ParamStore<S>, vars: &[VarId]) -> Self {
        ReeVars { w: vars[store.idx("ree.w")], b: vars[store.idx("ree.b")] }
    }
}

// ─── Convergence indicators ──────────────────────────────────────────────────

/// Per-row indicator features for one step transition, already normalized
/// onto comparable scales: entropy divided by ln|I| (→ [0,1]), KL squashed
/// through log(1+x), state motion divided by √d. Computed in 64-bit from
/// stored values — the result is a constant with respect to every gradient.
pub fn indicator_features<S: Scalar>(
    logp_prev: &Tensor<S>,
    logp_curr: &Tensor<S>,
    r_prev: &Tensor<S>,
    r_curr: &Tensor<S>,
) -> Tensor<S> {
    let b = logp_curr.rows();
    assert_eq!(logp_prev.rows(), b, "indicator_features: row mismatch");
    assert_eq!(r_prev.rows(), b, "indicator_features: row mismatch");
    assert!(logp_curr.cols() >= 3, "indicator_features: need at least two real items");
    let ln_items = ((logp_curr.cols() - 1) as f64).ln(); // column 0 is padding
    let sqrt_d = (r_curr.cols() as f64).sqrt();
    let mut out = Tensor::zeros(b, 3);
    for r in 0..b {
        let pc: Vec<f64> = logp_curr.row(r).iter().map(|&v| v.into_f64().exp()).collect();
        let pp: Vec<f64> = logp_prev.row(r).iter().map(|&v| v.into_f64().exp()).collect();
        let ent = entropy(&pc);
        let cons = kl_divergence(&pp, &pc);
        let delta = r_prev
            .row(r)
            .iter()
            .zip(r_curr.row(r))
            .map(|(&a, &c)| {
                let d = a.into_f64() - c.into_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let row = out.row_mut(r);
        row[0] = S::from_f64(ent / ln_items);
        row[1] = S::from_f64(cons.ln_1p());
        row[2] = S::from_f64(delta / sqrt_d);
    }
    out
}

// ─── Halting head ────────────────────────────────────────────────────────────

/// Halting probability for one step: sigmoid(relu(f·W1 + b1)·W2 + b2), a
/// `B × 1` column. The feature tensor enters as a constant leaf.
pub fn halt_probability<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &HaltVars,
    features: Tensor<S>,
) -> VarId {
    assert_eq!(features.cols(), 3, "halting head expects 3 features per row");
    let f = tape.leaf(features);
    let h = tape.matmul(f, vars.w1);
    let h = tape.add_bias(h, vars.b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, vars.w2);
    let o = tape.add_bias(o, vars.b2);
    tape.sigmoid(o)
}

/// Halting probabilities for every reasoning step of a trace, t = 1..=T.
pub fn trace_halt_probabilities<S: Scalar>(
    tape: &mut Tape<S>,
    trace: &Trace,
    vars: &HaltVars,
) -> Vec<VarId> {
    let steps = trace.steps();
    assert!(steps >= 1, "halting needs at least one reasoning step");
    let mut ps = Vec::with_capacity(steps);
    for t in 1..=steps {
        let feats = indicator_features(
            tape.value(trace.logp[t - 1]),
            tape.value(trace.logp[t]),
            tape.value(trace.states[t - 1]),
            tape.value(trace.states[t]),
        );
        ps.push(halt_probability(tape, vars, feats));
    }
    ps
}

/// Exit-head probability from a reasoning state. The state enters as a
/// constant leaf — this head never trains the backbone.
pub fn ree_probability<S: Scalar>(tape: &mut Tape<S>, vars: &ReeVars, state: &Tensor<S>) -> VarId {
    let s = tape.leaf(state.clone());
    let o = tape.matmul(s, vars.w);
    let o = tape.add_bias(o, vars.b);
    tape.sigmoid(o)
}

/// State-reading exit probabilities for every reasoning step of a trace.
pub fn trace_ree_probabilities<S: Scalar>(
    tape: &mut Tape<S>,
    trace: &Trace,
    vars: &ReeVars,
) -> Vec<VarId> {
    let steps = trace.steps();
    assert!(steps >= 1, "halting needs at least one reasoning step");
    (1..=steps)
        .map(|t| {
            let state = tape.value(trace.states[t]).clone();
            ree_probability(tape, vars, &state)
        })
        .collect()
}

// ─── Training aggregation ────────────────────────────────────────────────────

/// Stick-breaking weights `B × T` from per-step probability columns. The
/// final step's probability is forced to one inside the op, so every row is
/// an exact distribution over steps.
pub fn halting_weights<S: Scalar>(tape: &mut Tape<S>, ps: &[VarId]) -> VarId {
    assert!(!ps.is_empty(), "halting_weights: no steps");
    if ps.len() == 1 {
        // A single step always receives the whole stick.
        let rows = tape.value(ps[0]).rows();
        tape.leaf(Tensor::from_vec(rows, 1, vec![S::one(); rows]))
    } else {
        let head = tape.concat_cols(&ps[..ps.len() - 1]);
        tape.stick_break(head)
    }
}

/// Log-probability of each row's target item at every reasoning step,
/// `B × T` — the per-step scores the aggregated objective mixes.
pub fn per_step_target_logp<S: Scalar>(
    tape: &mut Tape<S>,
    trace: &Trace,
    targets: &[usize],
) -> VarId {
    let cols: Vec<VarId> =
        (1..=trace.steps()).map(|t| tape.take_per_row(trace.logp[t], targets)).collect();
    tape.concat_cols(&cols)
}

/// Value-level stick-breaking (inference, analysis): last probability forced
/// to one.
pub fn stick_break_weights(ps: &[f64]) -> Vec<f64> {
    assert!(!ps.is_empty(), "stick_break_weights: empty");
    let t_max = ps.len();
    let mut w = vec![0.0; t_max];
    let mut acc = 1.0;
    for (t, slot) in w.iter_mut().enumerate() {
        let p = if t == t_max - 1 { 1.0 } else { ps[t] };
        *slot = p * acc;
        acc *= 1.0 - p;
    }
    w
}

/// Convex combination of per-step distributions under halting weights.
pub fn aggregate_distribution(step_probs: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    assert_eq!(step_probs.len(), weights.len(), "aggregate: step count mismatch");
    assert!(!step_probs.is_empty(), "aggregate: no steps");
    let n = step_probs[0].len();
    let mut out = vec![0.0; n];
    for (dist, &w) in step_probs.iter().zip(weights) {
        assert_eq!(dist.len(), n, "aggregate: ragged distributions");
        for (o, &p) in out.iter_mut().zip(dist) {
            *o += w * p;
        }
    }
    out
}

/// Mean exit step implied by a weight vector (weights[i] belongs to step i+1).
pub fn expected_exit_step(weights: &[f64]) -> f64 {
    weights.iter().enumerate().map(|(i, &w)| (i + 1) as f64 * w).sum()
}

// ─── Early exit policy ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HaltPolicy {
    /// Exit threshold on the halting probability.
    pub delta: f64,
    /// Earliest step allowed to exit.
    pub min_steps: usize,
    /// Total reasoning steps; step T always exits.
    pub max_steps: usize,
}

impl HaltPolicy {
    pub fn new(delta: f64, max_steps: usize) -> Self {
        HaltPolicy { delta, min_steps: 1, max_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::contract(format!("halting threshold {} outside [0, 1]", self.delta)));
        }
        if self.min_steps < 1 || self.min_steps > self.max_steps {
            return Err(Error::contract(format!(
                "min_steps {} outside [1, {}]",
                self.min_steps, self.max_steps
            )));
        }
        Ok(())
    }

    pub fn should_halt(&self, p: f64, t: usize) -> bool {
        t == self.max_steps || (t >= self.min_steps && p > self.delta)
    }

    /// First step at which the policy halts; `ps[i]` is the probability of
    /// step i+1. Always lands in `1..=max_steps`.
    pub fn exit_step(&self, ps: &[f64]) -> usize {
        assert_eq!(ps.len(), self.max_steps, "exit_step: need one probability per step");
        for t in 1..=self.max_steps {
            if self.should_halt(ps[t - 1], t) {
                return t;
            }
        }
        unreachable!("the final step always halts")
    }
}
