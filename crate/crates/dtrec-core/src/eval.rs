//! Full-ranking evaluation and cost accounting.
//!
//! Every metric ranks the held-out item against the complete catalog — no
//! sampled negatives, which are known to distort model comparisons. Ties in
//! score break by ascending item id so reruns are reproducible to the byte.
//! Alongside ranking quality this module accounts for reasoning cost (which
//! step each sequence exited at) and exports the per-user and per-step data
//! the analysis tooling consumes.

use crate::arh::{trace_halt_probabilities, trace_ree_probabilities, HaltPolicy, HaltVars, ReeVars};
use crate::backbone::Model;
use crate::data::{make_batches, InteractionDataset, Split};
use crate::error::Result;
use crate::hps::PrototypeIndex;
use crate::numerics::rng::{derive_rng, stream};
use crate::numerics::{Scalar, Tape};
use serde::{Deserialize, Serialize};
use std::io::Write;

// ─── Metric primitives ───────────────────────────────────────────────────────

/// Hit indicator: did the target land in the top k.
pub fn recall_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Positional credit 1/log2(rank+1) inside the top k, zero outside.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank as f64) + 1.0).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target` under full ranking of items `1..scores.len()`.
/// Higher score ranks first; equal scores rank by ascending item id, so the
/// target is beaten by strictly-higher scores and by equal scores at lower
/// ids. Index 0 (padding) never participates.
pub fn rank_of_target<S: Scalar>(scores: &[S], target: usize) -> usize {
    debug_assert!(target >= 1 && target < scores.len(), "target {target} out of range");
    let st = scores[target];
    let mut rank = 1usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > st || (s == st && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Average exit step over users divided by the full step count: the fraction
/// of reasoning compute an early-exit policy actually spends.
pub fn cost_ratio(exit_steps: &[usize], t_max: usize) -> f64 {
    if exit_steps.is_empty() || t_max == 0 {
        return 1.0;
    }
    let mean = exit_steps.iter().sum::<usize>() as f64 / exit_steps.len() as f64;
    mean / t_max as f64
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman: length mismatch");
    let n = xs.len();
    assert!(n >= 2, "spearman needs at least two points");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0; // a constant sequence carries no ordering signal
    }
    cov / (vx * vy).sqrt()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite value in rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

// ─── Evaluation driver ───────────────────────────────────────────────────────

/// Which learned head produces the per-step exit probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitHead {
    /// Convergence-indicator head (the full halting mechanism).
    Indicators,
    /// Linear head reading the raw reasoning state (ablation baseline).
    StateReading,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExitRule {
    pub head: ExitHead,
    pub policy: HaltPolicy,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Reasoning steps to run (T). Zero evaluates the plain encoder output.
    pub steps: usize,
    pub batch_size: usize,
    pub max_len: usize,
    /// `None` scores every sequence at step T.
    pub exit: Option<ExitRule>,
}

/// One scored sequence.
#[derive(Clone, Debug)]
pub struct UserOutcome {
    /// Dense user id into `ds.users`.
    pub user: usize,
    /// Full interaction count of the user (the length axis of the depth
    /// analysis).
    pub length: usize,
    pub exit_step: usize,
    pub rank: usize,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub per_user: Vec<UserOutcome>,
    pub steps: usize,
}

/// Score one split under full ranking. All T step distributions are computed
/// batch-rectangular and the exit policy then selects per user — reasoning
/// steps never look ahead, so the selected distribution is identical to one
/// produced by actually stopping, while cost is accounted from the exit step.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    ds: &InteractionDataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    if let Some(rule) = &opts.exit {
        rule.policy.validate()?;
        assert_eq!(
            rule.policy.max_steps, opts.steps,
            "exit policy covers {} steps but evaluation runs {}",
            rule.policy.max_steps, opts.steps
        );
    }
    let batches = make_batches(ds, split, opts.batch_size, opts.max_len, None);
    let mut per_user = Vec::new();
    let mut rng = derive_rng(0, &[stream::TEST]); // untouched at dropout 0
    for batch in &batches {
        let mut tape = Tape::<S>::new();
        let trace = model.forward(&mut tape, batch, opts.steps, 0.0, &mut rng);
        let rows = batch.targets.len();

        let exits: Vec<usize> = match (&opts.exit, opts.steps) {
            (_, 0) => vec![0; rows],
            (None, t) => vec![t; rows],
            (Some(rule), t) => {
                let p_cols: Vec<Vec<f64>> = match rule.head {
                    ExitHead::Indicators => {
                        let hv = HaltVars::lookup(&model.params, &trace.param_vars);
                        trace_halt_probabilities(&mut tape, &trace, &hv)
                            .into_iter()
                            .map(|p| tape.value(p).iter().map(|&v| v.into_f64()).collect())
                            .collect()
                    }
                    ExitHead::StateReading => {
                        let rv = ReeVars::lookup(&model.params, &trace.param_vars);
                        trace_ree_probabilities(&mut tape, &trace, &rv)
                            .into_iter()
                            .map(|p| tape.value(p).iter().map(|&v| v.into_f64()).collect())
                            .collect()
                    }
                };
                (0..rows)
                    .map(|b| {
                        let ps: Vec<f64> = (0..t).map(|s| p_cols[s][b]).collect();
                        rule.policy.exit_step(&ps)
                    })
                    .collect()
            }
        };

        for b in 0..rows {
            let scores = tape.value(trace.logp[exits[b]]);
            per_user.push(UserOutcome {
                user: batch.users[b],
                length: ds.users[batch.users[b]].items.len(),
                exit_step: exits[b],
                rank: rank_of_target(scores.row(b), batch.targets[b]),
            });
        }
    }
    Ok(EvalOutcome { per_user, steps: opts.steps })
}

// ─── Aggregation ─────────────────────────────────────────────────────────────

/// Aggregate quantities of one evaluated split. Field order is the
/// serialization order of `metrics.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub n_users: usize,
    pub steps: usize,
    pub recall_at_10: f64,
    pub recall_at_20: f64,
    pub ndcg_at_10: f64,
    pub ndcg_at_20: f64,
    pub mean_exit_step: f64,
    pub cost_ratio: f64,
    /// Mean exit step per history-length quantile group, shortest first.
    pub group_mean_steps: Vec<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Users bucketed into `n_groups` equal-size quantiles by history length
/// (ties by user id), shortest group first; returns each group's mean exit
/// step. Groups differ in size by at most one user.
pub fn steps_by_length_group(per_user: &[UserOutcome], n_groups: usize) -> Vec<f64> {
    assert!(n_groups >= 1, "need at least one group");
    assert!(
        per_user.len() >= n_groups,
        "cannot split {} users into {n_groups} groups",
        per_user.len()
    );
    let mut order: Vec<usize> = (0..per_user.len()).collect();
    order.sort_by_key(|&i| (per_user[i].length, per_user[i].user));
    let n = order.len();
    (0..n_groups)
        .map(|g| {
            let lo = g * n / n_groups;
            let hi = (g + 1) * n / n_groups;
            let sum: f64 = order[lo..hi].iter().map(|&i| per_user[i].exit_step as f64).sum();
            sum / (hi - lo) as f64
        })
        .collect()
}

/// Reduce an evaluation to its report. Per-user terms are summed in user-id
/// order, so any batching or storage order of the outcome yields identical
/// bytes.
pub fn summarize(outcome: &EvalOutcome, variant: &str, seed: u64, n_groups: usize) -> MetricsReport {
    let mut rows: Vec<&UserOutcome> = outcome.per_user.iter().collect();
    rows.sort_by_key(|r| r.user);
    let n = rows.len();
    assert!(n > 0, "summarize: empty evaluation");
    let mut r10 = 0.0;
    let mut r20 = 0.0;
    let mut n10 = 0.0;
    let mut n20 = 0.0;
    for r in &rows {
        r10 += recall_at(r.rank, 10);
        r20 += recall_at(r.rank, 20);
        n10 += ndcg_at(r.rank, 10);
        n20 += ndcg_at(r.rank, 20);
    }
    let exits: Vec<usize> = rows.iter().map(|r| r.exit_step).collect();
    let sorted: Vec<UserOutcome> = rows.iter().map(|r| (*r).clone()).collect();
    MetricsReport {
        variant: variant.to_string(),
        seed,
        n_users: n,
        steps: outcome.steps,
        recall_at_10: r10 / n as f64,
        recall_at_20: r20 / n as f64,
        ndcg_at_10: n10 / n as f64,
        ndcg_at_20: n20 / n as f64,
        mean_exit_step: exits.iter().sum::<usize>() as f64 / n as f64,
        cost_ratio: cost_ratio(&exits, outcome.steps),
        group_mean_steps: if n >= n_groups && outcome.steps > 0 {
            steps_by_length_group(&sorted, n_groups)
        } else {
            Vec::new()
        },
    }
}

// ─── Exports ─────────────────────────────────────────────────────────────────

/// Per-user exit log: `user_id, length, exit_step`, one row per sequence in
/// user-id order.
pub fn write_exits_csv(
    outcome: &EvalOutcome,
    ds: &InteractionDataset,
    w: &mut impl Write,
) -> std::io::Result<()> {
    let mut rows: Vec<&UserOutcome> = outcome.per_user.iter().collect();
    rows.sort_by_key(|r| r.user);
    writeln!(w, "user_id,length,exit_step")?;
    for r in rows {
        writeln!(w, "{},{},{}", ds.users[r.user].key, r.length, r.exit_step)?;
    }
    Ok(())
}

/// Reasoning-state trajectories for external projection: one row per
/// (sequence, step) holding the full state vector, its nearest prototype at
/// that step's granularity (step 0 shares the coarsest level), and the target.
pub fn export_trajectories<S: Scalar>(
    model: &Model<S>,
    ds: &InteractionDataset,
    split: Split,
    opts: &EvalOptions,
    index: &PrototypeIndex<S>,
    w: &mut impl Write,
) -> Result<()> {
    let d = model.cfg.d_model;
    let mut header = String::from("user_id,step");
    for j in 0..d {
        header.push_str(&format!(",r{j}"));
    }
    header.push_str(",assigned_prototype_id,target_item_id");
    writeln!(w, "{header}")?;

    let batches = make_batches(ds, split, opts.batch_size, opts.max_len, None);
    let mut rng = derive_rng(0, &[stream::TEST]);
    for batch in &batches {
        let mut tape = Tape::<S>::new();
        let trace = model.forward(&mut tape, batch, opts.steps, 0.0, &mut rng);
        for t in 0..=opts.steps {
            let level = t.max(1);
            let states = tape.value(trace.states[t]);
            let assign = index.assign(states, level);
            for b in 0..batch.targets.len() {
                let mut line = format!("{},{t}", ds.users[batch.users[b]].key);
                for &v in states.row(b) {
                    line.push_str(&format!(",{}", v.into_f64()));
                }
                line.push_str(&format!(",{},{}", assign[b], batch.targets[b]));
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}
