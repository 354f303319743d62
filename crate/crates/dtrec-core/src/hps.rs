//! Hierarchical process supervision: cluster the item embedding table into
//! multi-granularity prototypes and supervise each reasoning step with its
//! level-matched nearest prototype as a soft target.
//!
//! The per-step cluster count grows coarse→fine along the schedule
//! `k_t = k_upper − (k_upper − k_0)·e^{−α(t−1)}`, so early steps are judged
//! against broad intent regions and later steps against near-item-level ones.
//! Prototypes are teachers: they come from a detached embedding snapshot taken
//! at the start of each epoch, and no gradient flows through the target side
//! of the loss — only through the model's own step distributions.

use crate::backbone::Trace;
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_rng, stream};
use crate::numerics::{softmax_in_place, Scalar, Tape, Tensor, VarId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Keep per-(step, center) teacher distributions up to this many entries; the
/// coarse levels where sharing is heavy always fit, and beyond the cap rows
/// are recomputed instead of cached.
const DIST_CACHE_CAP: usize = 2048;

// ─── Granularity schedule ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GranularitySchedule {
    /// Cluster count of the first reasoning step (coarsest level).
    pub k0: usize,
    /// Asymptotic cap on the cluster count.
    pub k_upper: usize,
    /// Expansion rate of the coarse→fine progression.
    pub alpha: f64,
    /// Number of reasoning steps the schedule covers (T).
    pub steps: usize,
}

impl GranularitySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.k0 < 1 || self.k0 > self.k_upper {
            return Err(Error::contract(format!(
                "cluster schedule needs 1 ≤ k0 ≤ k_upper, got k0={} k_upper={}",
                self.k0, self.k_upper
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::contract(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        Ok(())
    }

    /// Cluster count for step `t ∈ [1, T]`: the exponential-approach curve
    /// rounded to the nearest integer and clamped to `[k0, min(k_upper, n_items)]`.
    pub fn schedule_k(&self, t: usize, n_items: usize) -> Result<usize> {
        if t < 1 || t > self.steps {
            return Err(Error::contract(format!(
                "schedule step {t} outside [1, {}]",
                self.steps
            )));
        }
        let raw = self.k_upper as f64
            - (self.k_upper as f64 - self.k0 as f64) * (-self.alpha * (t as f64 - 1.0)).exp();
        let k = raw.round() as usize;
        Ok(k.clamp(self.k0, self.k_upper).min(n_items))
    }
}

// ─── Warm-up ─────────────────────────────────────────────────────────────────

/// Linear ramp of the prototype-loss weight from 0 to `lambda_p` over the
/// first `ramp_epochs` epochs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub lambda_p: f64,
    pub ramp_epochs: u64,
}

impl WarmupSchedule {
    pub fn new(lambda_p: f64) -> Self {
        WarmupSchedule { lambda_p, ramp_epochs: 10 }
    }

    /// A zero-length ramp applies the full weight from epoch 0 (the
    /// no-warm-up ablation).
    pub fn weight(&self, epoch: u64) -> f64 {
        if self.ramp_epochs == 0 || epoch >= self.ramp_epochs {
            self.lambda_p
        } else {
            self.lambda_p * epoch as f64 / self.ramp_epochs as f64
        }
    }
}

// ─── K-means ─────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KmeansParams {
    /// Independent seeded runs; the lowest-SSE fit wins.
    pub restarts: usize,
    pub max_iter: usize,
    /// Convergence threshold on the largest center shift between iterations.
    pub tol: f64,
}

impl Default for KmeansParams {
    fn default() -> Self {
        KmeansParams { restarts: 4, max_iter: 100, tol: 1e-4 }
    }
}

pub struct KmeansFit<S> {
    pub centers: Tensor<S>,
    /// Within-cluster sum of squared distances of the winning run.
    pub sse: f64,
    /// SSE after each Lloyd iteration of the winning run (non-increasing).
    pub sse_history: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding and farthest-point reseeding of
/// empty clusters, run `restarts` times from `rng`; arithmetic is 64-bit
/// regardless of `S` so a fit is reproducible across scalar types.
pub fn fit_prototypes<S: Scalar>(
    points: &Tensor<S>,
    k: usize,
    rng: &mut ChaCha8Rng,
    params: &KmeansParams,
) -> Result<KmeansFit<S>> {
    let n = points.rows();
    let d = points.cols();
    if k == 0 {
        return Err(Error::contract("k-means needs k ≥ 1"));
    }
    if k > n {
        return Err(Error::contract(format!("k-means with k={k} on only {n} points")));
    }
    let pts: Vec<f64> = points.iter().map(|&v| v.into_f64()).collect();

    // Every point its own cluster: exact, and the common case at fine
    // granularity levels once the schedule cap hits the item count.
    if k == n {
        let centers = Tensor::from_vec(n, d, pts.iter().map(|&v| S::from_f64(v)).collect());
        return Ok(KmeansFit { centers, sse: 0.0, sse_history: vec![0.0] });
    }

    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    for _ in 0..params.restarts.max(1) {
        let (centers, sse, history) = lloyd(&pts, n, d, k, rng, params);
        if best.as_ref().map_or(true, |(_, b, _)| sse < *b) {
            best = Some((centers, sse, history));
        }
    }
    let (centers, sse, sse_history) = best.expect("at least one restart");
    if sse_history.is_empty() {
        return Err(Error::contract("k-means produced no iterations"));
    }
    let centers = Tensor::from_vec(k, d, centers.into_iter().map(S::from_f64).collect());
    Ok(KmeansFit { centers, sse, sse_history })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn kmeanspp(pts: &[f64], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(&pts[first * d..(first + 1) * d]);
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(&pts[i * d..(i + 1) * d], &centers[..d])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.gen_range(0..n) // all remaining mass at chosen points (duplicates)
        };
        centers.extend_from_slice(&pts[pick * d..(pick + 1) * d]);
        let newc = &centers[c * d..(c + 1) * d];
        for i in 0..n {
            let nd = sq_dist(&pts[i * d..(i + 1) * d], newc);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }
    centers
}

/// Shared by the fitter and by oracle tests so both sides produce bit-equal
/// numbers: centroids summed in ascending point order, SSE likewise.
pub fn centroids(pts: &[f64], d: usize, assign: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut centers = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for j in 0..d {
            centers[a * d + j] += pts[i * d + j];
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for j in 0..d {
                centers[c * d + j] *= inv;
            }
        }
    }
    (centers, counts)
}

pub fn sse_of(pts: &[f64], d: usize, centers: &[f64], assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(&pts[i * d..(i + 1) * d], &centers[a * d..(a + 1) * d]))
        .sum()
}

fn assign_points(pts: &[f64], n: usize, d: usize, centers: &[f64], k: usize, assign: &mut [usize]) {
    for i in 0..n {
        let p = &pts[i * d..(i + 1) * d];
        let mut best = (0usize, f64::INFINITY);
        for c in 0..k {
            let dist = sq_dist(p, &centers[c * d..(c + 1) * d]);
            if dist < best.1 {
                best = (c, dist); // strict '<' keeps the lowest index on ties
            }
        }
        assign[i] = best.0;
    }
}

fn lloyd(
    pts: &[f64],
    n: usize,
    d: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
    params: &KmeansParams,
) -> (Vec<f64>, f64, Vec<f64>) {
    let mut centers = kmeanspp(pts, n, d, k, rng);
    let mut assign = vec![0usize; n];
    let mut history = Vec::new();
    let mut sse = f64::INFINITY;
    for _ in 0..params.max_iter {
        assign_points(pts, n, d, &centers, k, &mut assign);
        // Revive empty clusters from the point farthest from its own center.
        loop {
            let mut counts = vec![0usize; k];
            for &a in assign.iter() {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let farthest = (0..n)
                .max_by(|&a, &b| {
                    let da = sq_dist(&pts[a * d..(a + 1) * d], &centers[assign[a] * d..(assign[a] + 1) * d]);
                    let db = sq_dist(&pts[b * d..(b + 1) * d], &centers[assign[b] * d..(assign[b] + 1) * d]);
                    da.partial_cmp(&db).unwrap()
                })
                .expect("nonempty point set");
            centers[empty * d..(empty + 1) * d]
                .copy_from_slice(&pts[farthest * d..(farthest + 1) * d]);
            assign[farthest] = empty;
        }
        let (new_centers, _) = centroids(pts, d, &assign, k);
        let shift = (0..k)
            .map(|c| sq_dist(&centers[c * d..(c + 1) * d], &new_centers[c * d..(c + 1) * d]).sqrt())
            .fold(0.0f64, f64::max);
        centers = new_centers;
        sse = sse_of(pts, d, &centers, &assign);
        history.push(sse);
        if shift < params.tol {
            break;
        }
    }
    (centers, sse, history)
}

// ─── Prototype index ─────────────────────────────────────────────────────────

/// Nearest row of `centers` to `r` by Euclidean distance, ties to the lowest
/// index.
pub fn nearest_prototype<S: Scalar>(r: &[S], centers: &Tensor<S>) -> usize {
    assert_eq!(r.len(), centers.cols(), "nearest_prototype: dimension mismatch");
    let mut best = (0usize, f64::INFINITY);
    for c in 0..centers.rows() {
        let dist: f64 = r
            .iter()
            .zip(centers.row(c))
            .map(|(&a, &b)| {
                let d = a.into_f64() - b.into_f64();
                d * d
            })
            .sum();
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best.0
}

/// Per-epoch clustering of a detached embedding snapshot: one center matrix
/// per reasoning step, plus the snapshot itself for teacher scoring.
pub struct PrototypeIndex<S: Scalar> {
    /// `levels[t−1]` holds the centers for step t.
    levels: Vec<Tensor<S>>,
    /// Snapshot of the full embedding table (padding row included) the
    /// centers were fitted on; teacher distributions score against it.
    snapshot: Tensor<S>,
    pub fit_epoch: u64,
    pub snapshot_hash: u64,
    dist_cache: HashMap<(usize, usize), Vec<S>>,
}

/// FNV-1a over the 64-bit patterns of the entries — cheap identity check
/// between an index and the table it was fitted on.
pub fn tensor_hash<S: Scalar>(t: &Tensor<S>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &v in t.iter() {
        h ^= v.into_f64().to_bits();
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl<S: Scalar> PrototypeIndex<S> {
    /// Rebuild an index from persisted centers (checkpoint restore). The
    /// supplied embedding becomes the teacher snapshot.
    pub fn from_parts(levels: Vec<Tensor<S>>, emb: &Tensor<S>, fit_epoch: u64) -> Self {
        PrototypeIndex {
            levels,
            snapshot: emb.clone(),
            fit_epoch,
            snapshot_hash: tensor_hash(emb),
            dist_cache: HashMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.levels.len()
    }

    pub fn centers(&self, t: usize) -> &Tensor<S> {
        assert!(t >= 1 && t <= self.levels.len(), "no prototype level for step {t}");
        &self.levels[t - 1]
    }

    pub fn levels(&self) -> &[Tensor<S>] {
        &self.levels
    }

    /// Nearest prototype index at level `t` for every row of `states`.
    pub fn assign(&self, states: &Tensor<S>, t: usize) -> Vec<usize> {
        let centers = self.centers(t);
        (0..states.rows()).map(|r| nearest_prototype(states.row(r), centers)).collect()
    }

    /// Teacher distribution of one prototype: softmax of its dot products
    /// with the snapshot embeddings, padding item excluded. Computed in
    /// 64-bit and cached per (level, center).
    pub fn distribution(&mut self, t: usize, center: usize) -> &[S] {
        let key = (t, center);
        if !self.dist_cache.contains_key(&key) {
            let row = self.compute_distribution(t, center);
            if self.dist_cache.len() < DIST_CACHE_CAP {
                self.dist_cache.insert(key, row);
            } else {
                // Cache full: stash under a throwaway slot so the borrow
                // below still works, overwriting each miss.
                self.dist_cache.insert((usize::MAX, usize::MAX), row);
                return &self.dist_cache[&(usize::MAX, usize::MAX)];
            }
        }
        &self.dist_cache[&key]
    }

    fn compute_distribution(&self, t: usize, center: usize) -> Vec<S> {
        let c = self.centers(t).row(center);
        let v1 = self.snapshot.rows(); // n_items + 1
        let d = self.snapshot.cols();
        let mut scores = vec![0.0f64; v1];
        scores[0] = f64::NEG_INFINITY;
        for item in 1..v1 {
            let mut dot = 0.0f64;
            let erow = self.snapshot.row(item);
            for j in 0..d {
                dot += c[j].into_f64() * erow[j].into_f64();
            }
            scores[item] = dot;
        }
        softmax_in_place(&mut scores);
        scores.into_iter().map(S::from_f64).collect()
    }

    /// Stack the teacher rows for a batch of assignments at level `t` into a
    /// `B × (n_items+1)` soft-target tensor.
    pub fn target_rows(&mut self, t: usize, assign: &[usize]) -> Tensor<S> {
        let cols = self.snapshot.rows();
        let mut out = Tensor::zeros(assign.len(), cols);
        for (r, &a) in assign.iter().enumerate() {
            let dist = self.distribution(t, a).to_vec();
            out.row_mut(r).copy_from_slice(&dist);
        }
        out
    }
}

/// Fit all schedule levels on a detached copy of the embedding table (padding
/// row excluded from clustering). Runs at the start of every epoch so the
/// prototypes track embedding drift; all randomness comes from
/// `(seed, epoch, level)`-derived streams.
pub fn refresh_index<S: Scalar>(
    emb: &Tensor<S>,
    sched: &GranularitySchedule,
    kparams: &KmeansParams,
    epoch: u64,
    seed: u64,
) -> Result<PrototypeIndex<S>> {
    sched.validate()?;
    let n_items = emb.rows() - 1;
    let d = emb.cols();
    let mut items = Tensor::zeros(n_items, d);
    for i in 0..n_items {
        items.row_mut(i).copy_from_slice(emb.row(i + 1));
    }
    let mut levels = Vec::with_capacity(sched.steps);
    for t in 1..=sched.steps {
        let k = sched.schedule_k(t, n_items)?;
        let mut rng = derive_rng(seed, &[stream::KMEANS, epoch, t as u64]);
        let fit = fit_prototypes(&items, k, &mut rng, kparams)?;
        levels.push(fit.centers);
    }
    Ok(PrototypeIndex {
        levels,
        snapshot: emb.clone(),
        fit_epoch: epoch,
        snapshot_hash: tensor_hash(emb),
        dist_cache: HashMap::new(),
    })
}

// ─── Prototype loss ──────────────────────────────────────────────────────────

/// Soft cross entropy of each step's distribution against its nearest
/// prototype's teacher distribution, summed over steps (batch-meaned per
/// step, matching the hard process loss). With `include_step0` the encoder
/// output r_0 is supervised too, using the coarsest (step-1) level — the
/// schedule curve sits below k0 there, and the clamp maps it to k0.
pub fn prototype_loss<S: Scalar>(
    tape: &mut Tape<S>,
    trace: &Trace,
    index: &mut PrototypeIndex<S>,
    include_step0: bool,
) -> VarId {
    let steps = trace.steps();
    assert!(steps >= 1, "prototype loss needs at least one reasoning step");
    assert!(index.steps() >= steps, "index fitted for {} steps, trace has {steps}", index.steps());
    let mut terms = Vec::new();
    for t in 0..=steps {
        if t == 0 && !include_step0 {
            continue;
        }
        let level = if t == 0 { 1 } else { t };
        let states = tape.value(trace.states[t]).clone();
        let assign = index.assign(&states, level);
        let targets = index.target_rows(level, &assign);
        let term = tape.soft_cross_entropy_mean(trace.logp[t], &targets);
        terms.push((term, 1.0));
    }
    tape.linear_combination(&terms)
}
