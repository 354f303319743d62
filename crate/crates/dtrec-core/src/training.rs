//! Objective assembly, the optimization loop, and exact-resume checkpoints.
//!
//! One `Trainer` owns the model, the optimizer and the stopping state. Each
//! epoch: re-cluster the embedding table into fresh prototypes (variants that
//! supervise with them), sweep shuffled batches accumulating the variant's
//! loss terms, clip and apply Adam, then score validation NDCG@10 for early
//! stopping. Every random draw derives from `(seed, epoch)` streams, so a run
//! is a pure function of its config — and a checkpoint written between epochs
//! resumes bit-exactly.

use crate::arh::{
    halting_weights, per_step_target_logp, register_halting_head, register_ree_head,
    trace_halt_probabilities, trace_ree_probabilities, HaltVars, ReeVars, HALT_HIDDEN,
};
use crate::backbone::{BackboneConfig, Model, Trace};
use crate::data::{make_batches, Batch, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, summarize, EvalOptions, ExitHead};
use crate::hps::{
    prototype_loss, refresh_index, GranularitySchedule, KmeansParams, PrototypeIndex,
    WarmupSchedule,
};
use crate::numerics::rng::{derive_rng, stream};
use crate::numerics::{clip_global_norm, Adam, AdamConfig, Scalar, Tape, Tensor, VarId};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

const CHECKPOINT_MAGIC: &str = "#dtrec-checkpoint v1";

// ─── Variants ────────────────────────────────────────────────────────────────

/// Ablation rows: which pieces of the method train on top of the reasoning
/// backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Reasoning backbone with the hard process loss only.
    Base,
    /// Prototype supervision with a constant cluster count at every step.
    HpsKconst,
    /// Prototype supervision applied at full weight from epoch 0.
    HpsNowarmup,
    /// Full coarse-to-fine prototype supervision.
    Hps,
    /// HPS plus the state-reading exit head (halting ablation).
    HpsRee,
    /// HPS plus indicator-based adaptive halting.
    HpsArh,
}

impl Variant {
    pub fn all() -> [Variant; 6] {
        [
            Variant::Base,
            Variant::HpsKconst,
            Variant::HpsNowarmup,
            Variant::Hps,
            Variant::HpsRee,
            Variant::HpsArh,
        ]
    }

    /// Whether prototype supervision is part of the objective.
    pub fn uses_hps(self) -> bool {
        !matches!(self, Variant::Base)
    }

    /// Which exit head (if any) this variant trains and evaluates with.
    pub fn exit_head(self) -> Option<ExitHead> {
        match self {
            Variant::HpsRee => Some(ExitHead::StateReading),
            Variant::HpsArh => Some(ExitHead::Indicators),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::HpsKconst => "hps_kconst",
            Variant::HpsNowarmup => "hps_nowarmup",
            Variant::Hps => "hps",
            Variant::HpsRee => "hps_ree",
            Variant::HpsArh => "hps_arh",
        }
    }
}

// ─── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; guards the small halting head against rare
    /// KL spikes in the indicators' neighborhood.
    pub clip_norm: f64,
    /// Full weight of the prototype loss after warm-up.
    pub lambda_p: f64,
    /// Epochs over which the prototype-loss weight ramps 0 → λ_p.
    pub warmup_epochs: u64,
    pub schedule: GranularitySchedule,
    pub kmeans: KmeansParams,
    /// Supervise the encoder output r_0 with the coarsest prototype level.
    pub supervise_step0: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            variant: Variant::Base,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            lambda_p: 0.1,
            warmup_epochs: 10,
            schedule: GranularitySchedule { k0: 10, k_upper: 3000, alpha: 0.5, steps: 3 },
            kmeans: KmeansParams::default(),
            supervise_step0: true,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::contract("epochs, batch_size and patience must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::contract("clip_norm must be positive"));
        }
        if self.lambda_p < 0.0 {
            return Err(Error::contract("lambda_p must be non-negative"));
        }
        if self.variant.uses_hps() {
            self.schedule.validate()?;
            if self.schedule.steps != self.backbone.max_steps {
                return Err(Error::contract(format!(
                    "granularity schedule covers {} steps but the backbone reasons for {}",
                    self.schedule.steps, self.backbone.max_steps
                )));
            }
        }
        if self.variant.exit_head().is_some() && self.backbone.max_steps == 0 {
            return Err(Error::contract("halting variants need at least one reasoning step"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    /// The schedule actually clustered: the constant-k ablation caps the
    /// curve at k0 so every level clusters at the same width. Re-fitting an
    /// index for a saved model must go through this, not `schedule`.
    pub fn effective_schedule(&self) -> GranularitySchedule {
        match self.variant {
            Variant::HpsKconst => {
                GranularitySchedule { k_upper: self.schedule.k0, ..self.schedule }
            }
            _ => self.schedule,
        }
    }

    fn warmup(&self) -> WarmupSchedule {
        WarmupSchedule {
            lambda_p: self.lambda_p,
            ramp_epochs: if self.variant == Variant::HpsNowarmup { 0 } else { self.warmup_epochs },
        }
    }
}

// ─── Losses ──────────────────────────────────────────────────────────────────

/// Hard process loss: cross entropy of the target item at every step 0..=T,
/// summed (each step's term is batch-meaned). With T = 0 this is exactly the
/// vanilla next-item objective.
pub fn process_loss<S: Scalar>(tape: &mut Tape<S>, trace: &Trace, targets: &[usize]) -> VarId {
    let mut terms = Vec::with_capacity(trace.steps() + 1);
    for t in 0..=trace.steps() {
        let ce = tape.cross_entropy_mean(trace.logp[t], targets);
        terms.push((ce, 1.0));
    }
    tape.linear_combination(&terms)
}

/// Per-batch loss components, as values.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub l0: f64,
    /// Raw prototype loss (before the warm-up weight).
    pub lp: f64,
    pub lp_weight: f64,
    /// Aggregated-prediction cross entropy (halting variants).
    pub agg: f64,
}

// ─── Epoch record ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    /// Batch-mean total loss.
    pub train_loss: f64,
    pub l0: f64,
    pub lp: f64,
    pub agg: f64,
    pub lp_weight: f64,
    pub val_ndcg10: f64,
    /// Reasoning-state rows that left the healthy norm band this epoch — a
    /// persistent nonzero count is the early sign of divergence.
    pub norm_band_violations: u64,
}

// ─── Trainer ─────────────────────────────────────────────────────────────────

pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub model: Model<S>,
    adam: Adam<S>,
    /// Prototype index of the current epoch (variants with supervision).
    pub index: Option<PrototypeIndex<S>>,
    /// Completed epochs; also the next epoch to run.
    epoch: u64,
    best_val: f64,
    best_epoch: u64,
    stale: u64,
    best_params: Option<Vec<Tensor<S>>>,
    pub history: Vec<EpochStats>,
    done: bool,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(n_items: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::<S>::init(cfg.backbone, n_items, cfg.seed)?;
        match cfg.variant.exit_head() {
            Some(ExitHead::Indicators) => {
                register_halting_head(&mut model.params, HALT_HIDDEN, cfg.seed)
            }
            Some(ExitHead::StateReading) => {
                register_ree_head(&mut model.params, cfg.backbone.d_model, cfg.seed)
            }
            None => {}
        }
        let adam = Adam::new(cfg.adam(), model.params.tensors());
        Ok(Trainer {
            cfg,
            model,
            adam,
            index: None,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
            best_params: None,
            history: Vec::new(),
            done: false,
        })
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn best_epoch(&self) -> u64 {
        self.best_epoch
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// One full pass: prototype refresh, batched optimization, validation,
    /// stopping bookkeeping.
    pub fn run_epoch(&mut self, ds: &InteractionDataset) -> Result<&EpochStats> {
        assert!(!self.done, "run_epoch called on a finished trainer");
        let cfg = &self.cfg;
        let epoch = self.epoch;
        let t_steps = cfg.backbone.max_steps;

        if cfg.variant.uses_hps() {
            self.index = Some(refresh_index(
                self.model.embedding(),
                &cfg.effective_schedule(),
                &cfg.kmeans,
                epoch,
                cfg.seed,
            )?);
        }
        let warm = cfg.warmup().weight(epoch);

        let batches = make_batches(
            ds,
            Split::Train,
            cfg.batch_size,
            cfg.backbone.max_len,
            Some((cfg.seed, epoch)),
        );
        let mut drop_rng = derive_rng(cfg.seed, &[stream::DROPOUT, epoch]);

        let mut sums = LossBreakdown::default();
        let mut violations = 0u64;
        for (bi, batch) in batches.iter().enumerate() {
            if bi == 0 {
                self.ensure_finite_params(epoch, bi, batch, "entering the epoch")?;
            }
            let mut tape = Tape::<S>::new();
            let trace =
                self.model.forward(&mut tape, batch, t_steps, cfg.backbone.dropout, &mut drop_rng);
            violations += norm_band_violations(&tape, &trace, cfg.backbone.d_model);

            let l0 = process_loss(&mut tape, &trace, &batch.targets);
            let mut terms = vec![(l0, 1.0)];
            let mut bd = LossBreakdown {
                l0: tape.value(l0).scalar().into_f64(),
                lp_weight: warm,
                ..Default::default()
            };
            if let Some(index) = self.index.as_mut() {
                let lp = prototype_loss(&mut tape, &trace, index, cfg.supervise_step0);
                bd.lp = tape.value(lp).scalar().into_f64();
                terms.push((lp, warm));
            }
            if let Some(head) = cfg.variant.exit_head() {
                let ps = match head {
                    ExitHead::Indicators => {
                        let hv = HaltVars::lookup(&self.model.params, &trace.param_vars);
                        trace_halt_probabilities(&mut tape, &trace, &hv)
                    }
                    ExitHead::StateReading => {
                        let rv = ReeVars::lookup(&self.model.params, &trace.param_vars);
                        trace_ree_probabilities(&mut tape, &trace, &rv)
                    }
                };
                let w = halting_weights(&mut tape, &ps);
                let tl = per_step_target_logp(&mut tape, &trace, &batch.targets);
                let agg = tape.mixture_cross_entropy(w, tl);
                bd.agg = tape.value(agg).scalar().into_f64();
                terms.push((agg, 1.0));
            }
            let total = tape.linear_combination(&terms);
            bd.total = tape.value(total).scalar().into_f64();
            if !bd.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss total={} (l0={}, lp={}, agg={}) at {}",
                    bd.total,
                    bd.l0,
                    bd.lp,
                    bd.agg,
                    batch_dump(epoch, bi, batch)
                )));
            }
            sums.total += bd.total;
            sums.l0 += bd.l0;
            sums.lp += bd.lp;
            sums.agg += bd.agg;

            let mut grads = tape.backward(total);
            let mut gvec: Vec<Option<Tensor<S>>> =
                trace.param_vars.iter().map(|&id| grads.take(id)).collect();
            clip_global_norm(&mut gvec, cfg.clip_norm);
            let refs: Vec<Option<&Tensor<S>>> = gvec.iter().map(Option::as_ref).collect();
            self.adam.step(self.model.params.tensors_mut(), &refs);
            self.ensure_finite_params(epoch, bi, batch, "after the optimizer step")?;
        }

        let nb = batches.len().max(1) as f64;
        let val = evaluate(
            &self.model,
            ds,
            Split::Valid,
            &EvalOptions {
                steps: t_steps,
                batch_size: cfg.batch_size,
                max_len: cfg.backbone.max_len,
                exit: None,
            },
        )?;
        let val_ndcg10 = summarize(&val, self.cfg.variant.name(), self.cfg.seed, 1).ndcg_at_10;

        let stats = EpochStats {
            epoch,
            train_loss: sums.total / nb,
            l0: sums.l0 / nb,
            lp: sums.lp / nb,
            agg: sums.agg / nb,
            lp_weight: warm,
            val_ndcg10,
            norm_band_violations: violations,
        };
        self.history.push(stats);

        if val_ndcg10 > self.best_val {
            self.best_val = val_ndcg10;
            self.best_epoch = epoch;
            self.stale = 0;
            self.best_params = Some(self.model.params.tensors().to_vec());
        } else {
            self.stale += 1;
        }
        self.epoch += 1;
        if self.epoch >= self.cfg.epochs || self.stale >= self.cfg.patience {
            self.done = true;
        }
        Ok(self.history.last().expect("just pushed"))
    }

    /// Abort with a reportable error (instead of a deep tape panic on the
    /// next bind) when any parameter has gone NaN/Inf. Checked on epoch
    /// entry and after every optimizer step, so the report names the exact
    /// batch whose update diverged. Non-finite *activations* with healthy
    /// parameters still fail fast inside the op that produced them.
    fn ensure_finite_params(
        &self,
        epoch: u64,
        batch_idx: usize,
        batch: &Batch,
        when: &str,
    ) -> Result<()> {
        for (name, t) in self.model.params.names().zip(self.model.params.tensors()) {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter {name} is non-finite {when}, at {}",
                    batch_dump(epoch, batch_idx, batch)
                )));
            }
        }
        Ok(())
    }

    /// Close out training: the parameters roll back to the best validation
    /// epoch. Call once, after the epoch loop.
    pub fn finish(&mut self) {
        if let Some(best) = self.best_params.take() {
            for (dst, src) in self.model.params.tensors_mut().iter_mut().zip(best) {
                *dst = src;
            }
        }
        self.done = true;
    }

    // ─── Checkpointing ───────────────────────────────────────────────────────

    /// Write the complete training state: a text manifest (shapes, offsets,
    /// counters, config echo) followed by every tensor as raw little-endian
    /// f32 — parameters, Adam moments, the best-epoch snapshot, prototype
    /// centers.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        let mut blob = Vec::new();
        writeln!(manifest, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(
            manifest,
            "config = {}",
            serde_json::to_string(&self.cfg).expect("config serialize")
        )
        .unwrap();
        writeln!(manifest, "n_items = {}", self.model.n_items).unwrap();
        writeln!(manifest, "epochs_done = {}", self.epoch).unwrap();
        writeln!(manifest, "adam_steps = {}", self.adam.steps_taken()).unwrap();
        writeln!(manifest, "best_val_bits = {:016x}", self.best_val.to_bits()).unwrap();
        writeln!(manifest, "best_epoch = {}", self.best_epoch).unwrap();
        writeln!(manifest, "stale = {}", self.stale).unwrap();
        writeln!(manifest, "done = {}", self.done).unwrap();
        writeln!(
            manifest,
            "history = {}",
            serde_json::to_string(&self.history).expect("history serialize")
        )
        .unwrap();

        let names: Vec<String> = self.model.params.names().map(str::to_string).collect();
        for (name, t) in names.iter().zip(self.model.params.tensors()) {
            push_tensor(&mut manifest, &mut blob, &format!("param.{name}"), t);
        }
        let (m, v) = self.adam.moments();
        for (name, t) in names.iter().zip(m) {
            push_tensor(&mut manifest, &mut blob, &format!("adam.m.{name}"), t);
        }
        for (name, t) in names.iter().zip(v) {
            push_tensor(&mut manifest, &mut blob, &format!("adam.v.{name}"), t);
        }
        if let Some(best) = &self.best_params {
            for (name, t) in names.iter().zip(best) {
                push_tensor(&mut manifest, &mut blob, &format!("best.{name}"), t);
            }
        }
        if let Some(index) = &self.index {
            writeln!(manifest, "proto_fit_epoch = {}", index.fit_epoch).unwrap();
            for (i, level) in index.levels().iter().enumerate() {
                push_tensor(&mut manifest, &mut blob, &format!("proto.{}", i + 1), level);
            }
        }
        writeln!(manifest, "blob_bytes = {}", blob.len()).unwrap();
        manifest.push_str("---\n");

        let mut bytes = manifest.into_bytes();
        bytes.extend_from_slice(&blob);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Restore a trainer to the exact state `save_checkpoint` captured; the
    /// next `run_epoch` is bit-identical to the one the saved run would have
    /// taken.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let sep = b"\n---\n";
        let pos = find_subslice(&bytes, sep)
            .ok_or_else(|| Error::Checkpoint("missing manifest/blob separator".into()))?;
        let manifest = std::str::from_utf8(&bytes[..pos])
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let blob = &bytes[pos + sep.len()..];

        let mut lines = manifest.lines();
        match lines.next() {
            Some(l) if l == CHECKPOINT_MAGIC => {}
            Some(l) if l.starts_with("#dtrec-checkpoint") => {
                return Err(Error::Checkpoint(format!("unsupported version: {l}")));
            }
            _ => return Err(Error::Checkpoint("not a checkpoint file".into())),
        }
        let mut kv = std::collections::HashMap::new();
        let mut entries: Vec<TensorEntry> = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("tensor ") {
                entries.push(TensorEntry::parse(rest)?);
            } else if let Some((k, v)) = line.split_once(" = ") {
                kv.insert(k.to_string(), v.to_string());
            } else if !line.trim().is_empty() {
                return Err(Error::Checkpoint(format!("unrecognized manifest line: {line}")));
            }
        }
        let field = |k: &str| {
            kv.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing field {k}")))
        };
        let parse_u64 = |k: &str| -> Result<u64> {
            field(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad integer in {k}")))
        };
        let declared: usize = parse_u64("blob_bytes")? as usize;
        if blob.len() != declared {
            return Err(Error::Checkpoint(format!(
                "blob is {} bytes, manifest declares {declared}",
                blob.len()
            )));
        }
        let cfg: TrainConfig = serde_json::from_str(&field("config")?)
            .map_err(|e| Error::Checkpoint(format!("config echo unreadable: {e}")))?;
        let n_items = parse_u64("n_items")? as usize;
        let history: Vec<EpochStats> = serde_json::from_str(&field("history")?)
            .map_err(|e| Error::Checkpoint(format!("history unreadable: {e}")))?;

        let mut tr = Trainer::<S>::new(n_items, cfg)?;
        let names: Vec<String> = tr.model.params.names().map(str::to_string).collect();

        let group = |prefix: &str| -> Vec<&TensorEntry> {
            entries.iter().filter(|e| e.name.starts_with(prefix)).collect()
        };
        let read_group = |prefix: &str| -> Result<Vec<Tensor<S>>> {
            let g = group(prefix);
            if g.len() != names.len() {
                return Err(Error::Checkpoint(format!(
                    "{} {prefix}* tensors for a model with {} parameters",
                    g.len(),
                    names.len()
                )));
            }
            names
                .iter()
                .zip(g)
                .map(|(name, e)| {
                    if e.name != format!("{prefix}{name}") {
                        return Err(Error::Checkpoint(format!(
                            "parameter order mismatch: expected {prefix}{name}, found {}",
                            e.name
                        )));
                    }
                    read_tensor(blob, e)
                })
                .collect()
        };

        for (dst, src) in tr.model.params.tensors_mut().iter_mut().zip(read_group("param.")?) {
            if (dst.rows(), dst.cols()) != (src.rows(), src.cols()) {
                return Err(Error::Checkpoint("parameter shape drifted from config".into()));
            }
            *dst = src;
        }
        tr.adam = Adam::restore(
            tr.cfg.adam(),
            read_group("adam.m.")?,
            read_group("adam.v.")?,
            parse_u64("adam_steps")?,
        );
        if !group("best.").is_empty() {
            tr.best_params = Some(read_group("best.")?);
        }
        let proto: Vec<&TensorEntry> = group("proto.");
        if !proto.is_empty() {
            let mut levels = Vec::with_capacity(proto.len());
            for (i, e) in proto.iter().enumerate() {
                if e.name != format!("proto.{}", i + 1) {
                    return Err(Error::Checkpoint(format!("prototype level out of order: {}", e.name)));
                }
                levels.push(read_tensor(blob, e)?);
            }
            tr.index = Some(PrototypeIndex::from_parts(
                levels,
                tr.model.embedding(),
                parse_u64("proto_fit_epoch")?,
            ));
        }
        tr.epoch = parse_u64("epochs_done")?;
        tr.best_val = f64::from_bits(
            u64::from_str_radix(&field("best_val_bits")?, 16)
                .map_err(|_| Error::Checkpoint("bad best_val_bits".into()))?,
        );
        tr.best_epoch = parse_u64("best_epoch")?;
        tr.stale = parse_u64("stale")?;
        tr.done = field("done")? == "true";
        tr.history = history;
        Ok(tr)
    }
}

/// Run to completion: epochs until the budget or patience is exhausted, then
/// roll back to the best validation epoch.
pub fn train<S: Scalar>(ds: &InteractionDataset, cfg: &TrainConfig) -> Result<Trainer<S>> {
    let mut tr = Trainer::new(ds.n_items, cfg.clone())?;
    while !tr.is_done() {
        tr.run_epoch(ds)?;
    }
    tr.finish();
    Ok(tr)
}

// ─── Internals ───────────────────────────────────────────────────────────────

fn norm_band_violations<S: Scalar>(tape: &Tape<S>, trace: &Trace, d: usize) -> u64 {
    let lo = 0.1 * (d as f64).sqrt();
    let hi = 10.0 * (d as f64).sqrt();
    let mut count = 0;
    for &sid in &trace.states {
        let t = tape.value(sid);
        for r in 0..t.rows() {
            let norm =
                t.row(r).iter().map(|&v| v.into_f64() * v.into_f64()).sum::<f64>().sqrt();
            if norm < lo || norm > hi {
                count += 1;
            }
        }
    }
    count
}

fn batch_dump(epoch: u64, batch_idx: usize, batch: &Batch) -> String {
    let head = |v: &[usize]| -> String {
        let shown: Vec<String> = v.iter().take(8).map(ToString::to_string).collect();
        let ellipsis = if v.len() > 8 { ", …" } else { "" };
        format!("[{}{}]", shown.join(", "), ellipsis)
    };
    format!(
        "epoch {epoch}, batch {batch_idx}: rows={} width={} users={} targets={}",
        batch.targets.len(),
        batch.width,
        head(&batch.users),
        head(&batch.targets),
    )
}

fn push_tensor<S: Scalar>(manifest: &mut String, blob: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    writeln!(manifest, "tensor {name} {}x{} @ {}", t.rows(), t.cols(), blob.len()).unwrap();
    for &v in t.iter() {
        blob.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
    }
}

struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    off: usize,
}

impl TensorEntry {
    fn parse(rest: &str) -> Result<Self> {
        // "<name> <rows>x<cols> @ <offset>"
        let bad = || Error::Checkpoint(format!("malformed tensor line: {rest}"));
        let mut parts = rest.split_whitespace();
        let name = parts.next().ok_or_else(bad)?.to_string();
        let shape = parts.next().ok_or_else(bad)?;
        let at = parts.next().ok_or_else(bad)?;
        let off = parts.next().ok_or_else(bad)?;
        if at != "@" || parts.next().is_some() {
            return Err(bad());
        }
        let (r, c) = shape.split_once('x').ok_or_else(bad)?;
        Ok(TensorEntry {
            name,
            rows: r.parse().map_err(|_| bad())?,
            cols: c.parse().map_err(|_| bad())?,
            off: off.parse().map_err(|_| bad())?,
        })
    }
}

fn read_tensor<S: Scalar>(blob: &[u8], e: &TensorEntry) -> Result<Tensor<S>> {
    let n = e.rows * e.cols;
    let end = e
        .off
        .checked_add(n * 4)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} offset overflow", e.name)))?;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "tensor {} [{}..{end}] runs past the {}-byte blob",
            e.name, e.off,
            blob.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let start = e.off + i * 4;
        let b: [u8; 4] = blob[start..start + 4].try_into().expect("4-byte slice");
        data.push(S::from_f64(f32::from_le_bytes(b) as f64));
    }
    Ok(Tensor::from_vec(e.rows, e.cols, data))
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use crate::data::{generate_synthetic, ShiftScope, SyntheticConfig};

    fn tiny_ds(seed: u64) -> InteractionDataset {
        let cfg =
            SyntheticConfig::uniform(vec![2, 2], 3, 24, 0.3, (6, 10), ShiftScope::CrossCategory, seed);
        generate_synthetic(&cfg).unwrap()
    }

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            backbone: BackboneConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                max_len: 8,
                dropout: 0.1,
                kind: BackboneKind::Attention,
                max_steps: 2,
            },
            variant,
            epochs: 3,
            batch_size: 8,
            schedule: GranularitySchedule { k0: 2, k_upper: 6, alpha: 0.5, steps: 2 },
            warmup_epochs: 4,
            patience: 10,
            seed: 17,
            ..TrainConfig::default()
        }
    }

    // ─── Config + variants ───────────────────────────────────────────────────

    #[test]
    fn variant_names_round_trip_through_serde() {
        for v in Variant::all() {
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
            let back: Variant = serde_json::from_str(&json).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn config_validation_catches_inconsistencies() {
        let mut c = tiny_cfg(Variant::Hps);
        assert!(c.validate().is_ok());
        c.schedule.steps = 3; // backbone reasons for 2
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(Variant::HpsArh);
        c.backbone.max_steps = 0;
        c.schedule.steps = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(Variant::Base);
        c.backbone.max_steps = 0; // base with a plain encoder is legal
        assert!(c.validate().is_ok());
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn constant_k_ablation_flattens_the_schedule() {
        let c = tiny_cfg(Variant::HpsKconst);
        let eff = c.effective_schedule();
        for t in 1..=2 {
            assert_eq!(eff.schedule_k(t, 1000).unwrap(), c.schedule.k0);
        }
        let full = tiny_cfg(Variant::Hps).effective_schedule();
        assert!(full.schedule_k(2, 1000).unwrap() > full.schedule_k(1, 1000).unwrap());
    }

    #[test]
    fn no_warmup_variant_applies_full_weight_immediately() {
        assert_eq!(tiny_cfg(Variant::HpsNowarmup).warmup().weight(0), 0.1);
        assert_eq!(tiny_cfg(Variant::Hps).warmup().weight(0), 0.0);
        assert_eq!(tiny_cfg(Variant::Hps).warmup().weight(4), 0.1);
    }

    // ─── Loss identities ─────────────────────────────────────────────────────

    #[test]
    fn process_loss_sums_the_per_step_cross_entropies() {
        let ds = tiny_ds(1);
        let cfg = tiny_cfg(Variant::Base);
        let model = Model::<f32>::init(cfg.backbone, ds.n_items, 3).unwrap();
        let batch = &make_batches(&ds, Split::Train, 8, 8, None)[0];
        let mut tape = Tape::<f32>::new();
        let mut rng = derive_rng(0, &[stream::TEST]);
        let trace = model.forward(&mut tape, batch, 2, 0.0, &mut rng);
        let l0 = process_loss(&mut tape, &trace, &batch.targets);
        let got = tape.value(l0).scalar() as f64;
        let mut expect = 0.0f64;
        for t in 0..=2 {
            let lp = tape.value(trace.logp[t]);
            let mut s = 0.0;
            for (r, &tg) in batch.targets.iter().enumerate() {
                s -= lp.row(r)[tg] as f64;
            }
            expect += s / batch.targets.len() as f64;
        }
        assert!((got - expect).abs() < 1e-4, "{got} vs {expect}");
    }

    #[test]
    fn zero_step_process_loss_is_the_vanilla_objective() {
        let ds = tiny_ds(2);
        let mut cfg = tiny_cfg(Variant::Base);
        cfg.backbone.max_steps = 0;
        let model = Model::<f32>::init(cfg.backbone, ds.n_items, 3).unwrap();
        let batch = &make_batches(&ds, Split::Train, 8, 8, None)[0];
        let mut tape = Tape::<f32>::new();
        let mut rng = derive_rng(0, &[stream::TEST]);
        let trace = model.forward(&mut tape, batch, 0, 0.0, &mut rng);
        let l0 = process_loss(&mut tape, &trace, &batch.targets);
        let plain = tape.cross_entropy_mean(trace.logp[0], &batch.targets);
        assert_eq!(tape.value(l0).scalar(), tape.value(plain).scalar());
    }

    // ─── Epoch behavior ──────────────────────────────────────────────────────

    #[test]
    fn warmup_epoch_zero_changes_nothing_about_the_base_update() {
        // With the ramp at zero weight, the supervised variant's first epoch
        // must produce bit-identical parameters to the unsupervised one: the
        // prototype term contributes exactly zero gradient.
        let ds = tiny_ds(3);
        let mut a = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Base)).unwrap();
        let mut b = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Hps)).unwrap();
        a.run_epoch(&ds).unwrap();
        b.run_epoch(&ds).unwrap();
        assert_eq!(b.history[0].lp_weight, 0.0);
        assert!(b.history[0].lp > 0.0, "raw prototype loss is still reported");
        for (ta, tb) in a.model.params.tensors().iter().zip(b.model.params.tensors()) {
            assert_eq!(ta.as_slice(), tb.as_slice());
        }
        assert_eq!(a.history[0].val_ndcg10, b.history[0].val_ndcg10);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = tiny_ds(4);
        let run = || {
            let tr = train::<f32>(&ds, &tiny_cfg(Variant::Hps)).unwrap();
            (
                serde_json::to_string(&tr.history).unwrap(),
                tr.model.params.tensors().iter().flat_map(|t| t.iter().copied()).collect::<Vec<f32>>(),
            )
        };
        let (ha, pa) = run();
        let (hb, pb) = run();
        assert_eq!(ha, hb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn halting_variants_register_their_heads_and_report_the_term() {
        let ds = tiny_ds(5);
        let mut arh = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::HpsArh)).unwrap();
        arh.run_epoch(&ds).unwrap();
        assert!(arh.model.params.names().any(|n| n == "halt.w1"));
        assert!(arh.history[0].agg > 0.0);

        let mut ree = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::HpsRee)).unwrap();
        ree.run_epoch(&ds).unwrap();
        assert!(ree.model.params.names().any(|n| n == "ree.w"));
        assert!(ree.model.params.names().all(|n| n != "halt.w1"));
        assert!(ree.history[0].agg > 0.0);

        let base = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Base)).unwrap();
        assert!(base.model.params.names().all(|n| n != "halt.w1" && n != "ree.w"));
    }

    #[test]
    fn constant_k_trainer_clusters_every_level_at_k0() {
        let ds = tiny_ds(6);
        let mut tr = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::HpsKconst)).unwrap();
        tr.run_epoch(&ds).unwrap();
        let index = tr.index.as_ref().unwrap();
        for t in 1..=2 {
            assert_eq!(index.centers(t).rows(), 2);
        }
        let mut full = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Hps)).unwrap();
        full.run_epoch(&ds).unwrap();
        let fi = full.index.as_ref().unwrap();
        assert!(fi.centers(2).rows() > fi.centers(1).rows());
    }

    #[test]
    fn poisoned_parameters_abort_with_a_batch_dump() {
        let ds = tiny_ds(7);
        let mut tr = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Base)).unwrap();
        tr.model.params.get_mut("item_emb").as_mut_slice()[20] = f32::NAN;
        let err = tr.run_epoch(&ds).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 0"), "dump names the epoch: {msg}");
        assert!(msg.contains("batch 0"), "dump names the batch: {msg}");
        assert!(msg.contains("users="), "dump carries the batch rows: {msg}");
    }

    #[test]
    fn runaway_states_raise_the_norm_band_alarm() {
        let ds = tiny_ds(8);
        let mut tr = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Base)).unwrap();
        for v in tr.model.params.get_mut("ln_f.g").as_mut_slice() {
            *v *= 100.0;
        }
        let stats = tr.run_epoch(&ds).unwrap().clone();
        assert!(stats.norm_band_violations > 0);
        let healthy = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Base))
            .unwrap()
            .run_epoch(&ds)
            .unwrap()
            .norm_band_violations;
        assert_eq!(healthy, 0);
    }

    #[test]
    fn early_stopping_restores_the_best_epoch() {
        let ds = tiny_ds(9);
        let mut cfg = tiny_cfg(Variant::Base);
        cfg.epochs = 30;
        cfg.patience = 2;
        let mut tr = Trainer::<f32>::new(ds.n_items, cfg).unwrap();
        let mut best_snapshot: Option<Vec<f32>> = None;
        while !tr.is_done() {
            tr.run_epoch(&ds).unwrap();
            let last = tr.history.last().unwrap();
            if last.epoch == tr.best_epoch() {
                best_snapshot = Some(
                    tr.model.params.tensors().iter().flat_map(|t| t.iter().copied()).collect(),
                );
            }
        }
        assert!(
            (tr.epochs_done() as usize) < 30 || tr.history.len() == 30,
            "either stopped early or exhausted the budget"
        );
        tr.finish();
        let final_params: Vec<f32> =
            tr.model.params.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        assert_eq!(final_params, best_snapshot.unwrap(), "finish must roll back to the best epoch");
    }

    // ─── Checkpoints ─────────────────────────────────────────────────────────

    fn params_bits(tr: &Trainer<f32>) -> Vec<u32> {
        tr.model.params.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn checkpoint_round_trips_every_piece_of_state() {
        let ds = tiny_ds(10);
        let mut tr = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::HpsArh)).unwrap();
        tr.run_epoch(&ds).unwrap();
        tr.run_epoch(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        tr.save_checkpoint(&path).unwrap();
        let loaded = Trainer::<f32>::load_checkpoint(&path).unwrap();

        assert_eq!(params_bits(&tr), params_bits(&loaded));
        assert_eq!(tr.epochs_done(), loaded.epochs_done());
        assert_eq!(tr.best_val().to_bits(), loaded.best_val().to_bits());
        assert_eq!(tr.stale, loaded.stale);
        assert_eq!(
            serde_json::to_string(&tr.history).unwrap(),
            serde_json::to_string(&loaded.history).unwrap()
        );
        let (tm, tv) = tr.adam.moments();
        let (lm, lv) = loaded.adam.moments();
        for (a, b) in tm.iter().zip(lm).chain(tv.iter().zip(lv)) {
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(tr.adam.steps_taken(), loaded.adam.steps_taken());
        let ti = tr.index.as_ref().unwrap();
        let li = loaded.index.as_ref().unwrap();
        assert_eq!(ti.fit_epoch, li.fit_epoch);
        for t in 1..=2 {
            assert_eq!(ti.centers(t).as_slice(), li.centers(t).as_slice());
        }
    }

    #[test]
    fn resumed_training_is_bit_identical_to_uninterrupted() {
        let ds = tiny_ds(11);
        let mut cfg = tiny_cfg(Variant::Hps);
        cfg.epochs = 4;

        let mut straight = Trainer::<f32>::new(ds.n_items, cfg.clone()).unwrap();
        for _ in 0..4 {
            straight.run_epoch(&ds).unwrap();
        }

        let mut first_half = Trainer::<f32>::new(ds.n_items, cfg).unwrap();
        first_half.run_epoch(&ds).unwrap();
        first_half.run_epoch(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        first_half.save_checkpoint(&path).unwrap();
        drop(first_half);
        let mut resumed = Trainer::<f32>::load_checkpoint(&path).unwrap();
        resumed.run_epoch(&ds).unwrap();
        resumed.run_epoch(&ds).unwrap();

        assert_eq!(params_bits(&straight), params_bits(&resumed));
        assert_eq!(
            serde_json::to_string(&straight.history).unwrap(),
            serde_json::to_string(&resumed.history).unwrap()
        );
        straight.finish();
        resumed.finish();
        assert_eq!(params_bits(&straight), params_bits(&resumed));
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let ds = tiny_ds(12);
        let mut tr = Trainer::<f32>::new(ds.n_items, tiny_cfg(Variant::Base)).unwrap();
        tr.run_epoch(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        tr.save_checkpoint(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        // Truncated blob.
        std::fs::write(dir.path().join("trunc.ckpt"), &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Trainer::<f32>::load_checkpoint(&dir.path().join("trunc.ckpt")),
            Err(Error::Checkpoint(_))
        ));
        // Wrong version line.
        let mut wrong = bytes.clone();
        wrong[CHECKPOINT_MAGIC.len() - 1] = b'9';
        std::fs::write(dir.path().join("v9.ckpt"), &wrong).unwrap();
        assert!(matches!(
            Trainer::<f32>::load_checkpoint(&dir.path().join("v9.ckpt")),
            Err(Error::Checkpoint(_))
        ));
        // Not a checkpoint at all.
        std::fs::write(dir.path().join("noise.ckpt"), b"hello world").unwrap();
        assert!(Trainer::<f32>::load_checkpoint(&dir.path().join("noise.ckpt")).is_err());
    }
}
