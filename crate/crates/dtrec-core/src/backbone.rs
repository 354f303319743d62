//! Sequential encoders — causal self-attention (SASRec-style) and a stacked
//! GRU — plus the latent reasoning loop that turns an encoded history into a
//! trajectory of states r_0..r_T with one item distribution per step.
//!
//! The reasoning mechanism: r_{t−1} re-enters the encoder as an appended token
//! carrying a learnable per-step position embedding, and r_t is the encoder
//! output at that position. For the attention kind the encoder's projected
//! keys/values are kept as cache parts so each step only processes one new
//! position; for the GRU the cache is simply the per-layer hidden state.
//!
//! Batches are left-padded, so sequence position embeddings index from the
//! right (the most recent item is always position 0). Together with the
//! per-row `first_valid` attention mask this makes a row's representation
//! independent of the batch it rides in.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_rng, stream};
use crate::numerics::{AttentionSpec, Scalar, Tape, Tensor, VarId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

// ─── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Attention,
    Gru,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub kind: BackboneKind,
    /// Maximum reasoning depth the parameter table supports (T). Forward
    /// passes may use any depth up to this; 0 means a plain encoder.
    pub max_steps: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 50,
            dropout: 0.2,
            kind: BackboneKind::Attention,
            max_steps: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(Error::contract("d_model, n_layers, n_heads and max_len must be ≥ 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

// ─── Named parameter registry ────────────────────────────────────────────────

/// Flat, ordered, name-addressed parameter storage. The order of registration
/// is the canonical order everywhere: optimizer slots, gradient lists and
/// checkpoint layout all line up with it.
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        assert!(
            self.index.insert(name.clone(), self.tensors.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.tensors[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        let i = self.idx(name);
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every parameter as a tape leaf, returning ids in store order.
    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<VarId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

// ─── Model ───────────────────────────────────────────────────────────────────

pub struct Model<S: Scalar> {
    pub cfg: BackboneConfig,
    pub n_items: usize,
    pub params: ParamStore<S>,
}

/// One forward pass recorded on a tape: parameter leaves (store order),
/// reasoning states r_0..r_T and per-step item log-distributions. Indicator
/// and loss code reads values/ids from here; nothing is recomputed.
pub struct Trace {
    pub param_vars: Vec<VarId>,
    /// r_0..r_T, each `B × d`.
    pub states: Vec<VarId>,
    /// log ŷ^(t) for t = 0..T, each `B × (n_items+1)`; the padding column
    /// carries a huge negative log-probability (probability 0).
    pub logp: Vec<VarId>,
    /// Per-position encoder output `(B·w) × d` — attention kind only (the GRU
    /// keeps no per-position matrix).
    pub enc_hidden: Option<VarId>,
    pub batch_rows: usize,
}

impl Trace {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

fn lin<S: Scalar>(tape: &mut Tape<S>, x: VarId, w: VarId, b: VarId) -> VarId {
    let t = tape.matmul(x, w);
    tape.add_bias(t, b)
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters from the init stream of `seed`. Item embedding row 0
    /// (padding) starts at zero and — because padded positions are never
    /// attended to or read out — receives exactly zero gradient, so it stays
    /// zero for the life of the model.
    pub fn init(cfg: BackboneConfig, n_items: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_items == 0 {
            return Err(Error::contract("model needs at least one item"));
        }
        let d = cfg.d_model;
        let mut rng = derive_rng(seed, &[stream::INIT]);
        let mut p = ParamStore::new();

        let mut emb = Tensor::randn(n_items + 1, d, INIT_STD, &mut rng);
        emb.row_mut(0).fill(S::zero());
        p.add("item_emb", emb);
        if cfg.kind == BackboneKind::Attention {
            p.add("pos_emb", Tensor::randn(cfg.max_len, d, INIT_STD, &mut rng));
        }
        if cfg.max_steps > 0 {
            p.add("rpe", Tensor::randn(cfg.max_steps, d, INIT_STD, &mut rng));
        }
        for l in 0..cfg.n_layers {
            match cfg.kind {
                BackboneKind::Attention => {
                    for w in ["wq", "wk", "wv", "wo"] {
                        p.add(format!("l{l}.attn.{w}"), Tensor::randn(d, d, INIT_STD, &mut rng));
                    }
                    for b in ["bq", "bk", "bv", "bo"] {
                        p.add(format!("l{l}.attn.{b}"), Tensor::zeros(1, d));
                    }
                    p.add(format!("l{l}.ln1.g"), Tensor::full(1, d, S::one()));
                    p.add(format!("l{l}.ln1.b"), Tensor::zeros(1, d));
                    p.add(format!("l{l}.ffn.w1"), Tensor::randn(d, d, INIT_STD, &mut rng));
                    p.add(format!("l{l}.ffn.b1"), Tensor::zeros(1, d));
                    p.add(format!("l{l}.ffn.w2"), Tensor::randn(d, d, INIT_STD, &mut rng));
                    p.add(format!("l{l}.ffn.b2"), Tensor::zeros(1, d));
                    p.add(format!("l{l}.ln2.g"), Tensor::full(1, d, S::one()));
                    p.add(format!("l{l}.ln2.b"), Tensor::zeros(1, d));
                }
                BackboneKind::Gru => {
                    // Recurrent weights need 1/√d scaling: at embedding scale
                    // the hidden state otherwise vanishes below the layer-norm
                    // epsilon and readouts collapse.
                    let gru_std = 1.0 / (d as f64).sqrt();
                    for w in ["wxz", "whz", "wxr", "whr", "wxn", "whn"] {
                        p.add(format!("l{l}.gru.{w}"), Tensor::randn(d, d, gru_std, &mut rng));
                    }
                    for b in ["bz", "br", "bn"] {
                        p.add(format!("l{l}.gru.{b}"), Tensor::zeros(1, d));
                    }
                }
            }
        }
        p.add("ln_f.g", Tensor::full(1, d, S::one()));
        p.add("ln_f.b", Tensor::zeros(1, d));

        Ok(Model { cfg, n_items, params: p })
    }

    pub fn embedding(&self) -> &Tensor<S> {
        self.params.get("item_emb")
    }

    /// Run the encoder plus `steps` reasoning steps on one batch, recording
    /// everything on `tape`. `dropout_p = 0` is the evaluation path (the rng
    /// is untouched); for the same batch/stream the recorded graph is
    /// identical run to run.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        batch: &Batch,
        steps: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Trace {
        assert!(
            steps <= self.cfg.max_steps,
            "forward: {} steps exceeds the parameter table's max_steps {}",
            steps,
            self.cfg.max_steps
        );
        let b_rows = batch.rows();
        let w = batch.width;
        assert!(w <= self.cfg.max_len, "forward: batch width {w} exceeds max_len {}", self.cfg.max_len);
        let first_valid: Vec<usize> = batch.lengths.iter().map(|&len| w - len).collect();

        let param_vars = self.params.bind(tape);
        let v = |name: &str| param_vars[self.params.idx(name)];
        let emb_var = v("item_emb");

        let (r0, enc_hidden, mut cache) = match self.cfg.kind {
            BackboneKind::Attention => {
                let (r0, hidden, cache) =
                    self.encode_attention(tape, batch, &first_valid, dropout_p, rng, &v);
                (r0, Some(hidden), cache)
            }
            BackboneKind::Gru => {
                let (r0, cache) = self.encode_gru(tape, batch, &first_valid, dropout_p, rng, &v);
                (r0, None, cache)
            }
        };

        let mut states = vec![r0];
        let mut logp = vec![self.score(tape, r0, emb_var)];
        let mut prev = r0;
        for t in 1..=steps {
            let rpe = tape.gather_rows(v("rpe"), &vec![t - 1; b_rows]);
            let mut x = tape.add(prev, rpe);
            x = tape.dropout(x, dropout_p, rng);
            x = match self.cfg.kind {
                BackboneKind::Attention => self.reason_attention(
                    tape,
                    x,
                    &mut cache,
                    b_rows,
                    w,
                    t,
                    &first_valid,
                    dropout_p,
                    rng,
                    &v,
                ),
                BackboneKind::Gru => self.reason_gru(tape, x, &mut cache, &v),
            };
            let rt = tape.layer_norm(x, v("ln_f.g"), v("ln_f.b"), LN_EPS);
            states.push(rt);
            logp.push(self.score(tape, rt, emb_var));
            prev = rt;
        }

        Trace { param_vars, states, logp, enc_hidden, batch_rows: b_rows }
    }

    /// Items are scored against the shared embedding table (no output
    /// matrix); the padding column is disabled before normalization.
    fn score(&self, tape: &mut Tape<S>, state: VarId, emb_var: VarId) -> VarId {
        let logits = tape.matmul_nt(state, emb_var);
        let masked = tape.mask_col(logits, 0);
        tape.log_softmax_rows(masked)
    }

    #[allow(clippy::type_complexity)]
    fn encode_attention(
        &self,
        tape: &mut Tape<S>,
        batch: &Batch,
        first_valid: &[usize],
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
        v: &impl Fn(&str) -> VarId,
    ) -> (VarId, VarId, Vec<(Vec<VarId>, Vec<VarId>)>) {
        let b_rows = batch.rows();
        let w = batch.width;
        let emb = tape.gather_rows(v("item_emb"), &batch.items);
        // Right-aligned positions: the final (most recent) column is index 0.
        let pos_idx: Vec<usize> = (0..b_rows * w).map(|r| w - 1 - (r % w)).collect();
        let pos = tape.gather_rows(v("pos_emb"), &pos_idx);
        let mut h = tape.add(emb, pos);
        h = tape.dropout(h, dropout_p, rng);

        let mut cache = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let ln1 = tape.layer_norm(h, v(&format!("l{l}.ln1.g")), v(&format!("l{l}.ln1.b")), LN_EPS);
            let q = lin(tape, ln1, v(&format!("l{l}.attn.wq")), v(&format!("l{l}.attn.bq")));
            let k = lin(tape, ln1, v(&format!("l{l}.attn.wk")), v(&format!("l{l}.attn.bk")));
            let val = lin(tape, ln1, v(&format!("l{l}.attn.wv")), v(&format!("l{l}.attn.bv")));
            let spec = AttentionSpec {
                batch: b_rows,
                heads: self.cfg.n_heads,
                query_len: w,
                part_widths: vec![w],
                first_valid: first_valid.to_vec(),
                causal_base: 0,
            };
            let att = tape.attention(q, &[k], &[val], spec);
            let mut proj = lin(tape, att, v(&format!("l{l}.attn.wo")), v(&format!("l{l}.attn.bo")));
            proj = tape.dropout(proj, dropout_p, rng);
            h = tape.add(h, proj);

            let ln2 = tape.layer_norm(h, v(&format!("l{l}.ln2.g")), v(&format!("l{l}.ln2.b")), LN_EPS);
            let mut f = lin(tape, ln2, v(&format!("l{l}.ffn.w1")), v(&format!("l{l}.ffn.b1")));
            f = tape.relu(f);
            f = lin(tape, f, v(&format!("l{l}.ffn.w2")), v(&format!("l{l}.ffn.b2")));
            f = tape.dropout(f, dropout_p, rng);
            h = tape.add(h, f);
            cache.push((vec![k], vec![val]));
        }
        let hidden = tape.layer_norm(h, v("ln_f.g"), v("ln_f.b"), LN_EPS);
        let last: Vec<usize> = (0..b_rows).map(|b| b * w + (w - 1)).collect();
        let r0 = tape.gather_rows(hidden, &last);
        (r0, hidden, cache)
    }

    /// One appended position through the attention stack, extending each
    /// layer's key/value cache in place. Gradients flow through the cached
    /// parts back into the encoder pass.
    #[allow(clippy::too_many_arguments)]
    fn reason_attention(
        &self,
        tape: &mut Tape<S>,
        mut x: VarId,
        cache: &mut [(Vec<VarId>, Vec<VarId>)],
        b_rows: usize,
        w: usize,
        t: usize,
        first_valid: &[usize],
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
        v: &impl Fn(&str) -> VarId,
    ) -> VarId {
        for l in 0..self.cfg.n_layers {
            let ln1 = tape.layer_norm(x, v(&format!("l{l}.ln1.g")), v(&format!("l{l}.ln1.b")), LN_EPS);
            let q = lin(tape, ln1, v(&format!("l{l}.attn.wq")), v(&format!("l{l}.attn.bq")));
            let k_new = lin(tape, ln1, v(&format!("l{l}.attn.wk")), v(&format!("l{l}.attn.bk")));
            let v_new = lin(tape, ln1, v(&format!("l{l}.attn.wv")), v(&format!("l{l}.attn.bv")));
            cache[l].0.push(k_new);
            cache[l].1.push(v_new);
            let mut part_widths = vec![w];
            part_widths.extend(std::iter::repeat(1).take(t));
            let spec = AttentionSpec {
                batch: b_rows,
                heads: self.cfg.n_heads,
                query_len: 1,
                part_widths,
                first_valid: first_valid.to_vec(),
                causal_base: w + t - 1,
            };
            let att = tape.attention(q, &cache[l].0, &cache[l].1, spec);
            let mut proj = lin(tape, att, v(&format!("l{l}.attn.wo")), v(&format!("l{l}.attn.bo")));
            proj = tape.dropout(proj, dropout_p, rng);
            x = tape.add(x, proj);

            let ln2 = tape.layer_norm(x, v(&format!("l{l}.ln2.g")), v(&format!("l{l}.ln2.b")), LN_EPS);
            let mut f = lin(tape, ln2, v(&format!("l{l}.ffn.w1")), v(&format!("l{l}.ffn.b1")));
            f = tape.relu(f);
            f = lin(tape, f, v(&format!("l{l}.ffn.w2")), v(&format!("l{l}.ffn.b2")));
            f = tape.dropout(f, dropout_p, rng);
            x = tape.add(x, f);
        }
        x
    }

    #[allow(clippy::type_complexity)]
    fn encode_gru(
        &self,
        tape: &mut Tape<S>,
        batch: &Batch,
        first_valid: &[usize],
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
        v: &impl Fn(&str) -> VarId,
    ) -> (VarId, Vec<(Vec<VarId>, Vec<VarId>)>) {
        let b_rows = batch.rows();
        let w = batch.width;
        let d = self.cfg.d_model;
        let mut hs: Vec<VarId> =
            (0..self.cfg.n_layers).map(|_| tape.leaf(Tensor::zeros(b_rows, d))).collect();
        let max_fv = first_valid.iter().copied().max().unwrap_or(0);

        for col in 0..w {
            let ids: Vec<usize> = (0..b_rows).map(|b| batch.items[b * w + col]).collect();
            let emb = tape.gather_rows(v("item_emb"), &ids);
            let mut xin = tape.dropout(emb, dropout_p, rng);
            // Rows still in left padding carry their state through unchanged.
            let masks = if col < max_fv {
                let mut keep = Tensor::zeros(b_rows, d);
                let mut carry = Tensor::zeros(b_rows, d);
                for b in 0..b_rows {
                    if col >= first_valid[b] {
                        keep.row_mut(b).fill(S::one());
                    } else {
                        carry.row_mut(b).fill(S::one());
                    }
                }
                Some((tape.leaf(keep), tape.leaf(carry)))
            } else {
                None
            };
            for l in 0..self.cfg.n_layers {
                let h_new = self.gru_cell(tape, xin, hs[l], l, v);
                let h_next = match masks {
                    Some((keep, carry)) => {
                        let a = tape.mul(keep, h_new);
                        let b = tape.mul(carry, hs[l]);
                        tape.add(a, b)
                    }
                    None => h_new,
                };
                hs[l] = h_next;
                xin = h_next;
            }
        }
        let top = hs[self.cfg.n_layers - 1];
        let r0 = tape.layer_norm(top, v("ln_f.g"), v("ln_f.b"), LN_EPS);
        // The "cache" is the running hidden per layer, stored in slot 0.
        let cache = hs.into_iter().map(|h| (vec![h], Vec::new())).collect();
        (r0, cache)
    }

    fn reason_gru(
        &self,
        tape: &mut Tape<S>,
        mut x: VarId,
        cache: &mut [(Vec<VarId>, Vec<VarId>)],
        v: &impl Fn(&str) -> VarId,
    ) -> VarId {
        for (l, slot) in cache.iter_mut().enumerate() {
            let h_new = self.gru_cell(tape, x, slot.0[0], l, v);
            slot.0[0] = h_new;
            x = h_new;
        }
        x
    }

    /// Standard GRU cell: h' = n + z ⊙ (h − n) with update gate z, reset gate
    /// r and candidate n = tanh(x·Wxn + (r⊙h)·Whn + bn).
    fn gru_cell(
        &self,
        tape: &mut Tape<S>,
        x: VarId,
        h: VarId,
        l: usize,
        v: &impl Fn(&str) -> VarId,
    ) -> VarId {
        let gate = |tape: &mut Tape<S>, hin: VarId, wx: &str, wh: &str, b: &str| {
            let xa = tape.matmul(x, v(&format!("l{l}.gru.{wx}")));
            let ha = tape.matmul(hin, v(&format!("l{l}.gru.{wh}")));
            let s = tape.add(xa, ha);
            tape.add_bias(s, v(&format!("l{l}.gru.{b}")))
        };
        let z = gate(tape, h, "wxz", "whz", "bz");
        let z = tape.sigmoid(z);
        let r = gate(tape, h, "wxr", "whr", "br");
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let n = gate(tape, rh, "wxn", "whn", "bn");
        let n = tape.tanh(n);
        let hmn = tape.sub(h, n);
        let zd = tape.mul(z, hmn);
        tape.add(n, zd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{derive_rng, stream};

    fn batch(rows: &[&[usize]], width: usize) -> Batch {
        let mut items = vec![0usize; rows.len() * width];
        let mut lengths = Vec::new();
        for (r, seq) in rows.iter().enumerate() {
            assert!(seq.len() <= width);
            let start = width - seq.len();
            items[r * width + start..(r + 1) * width].copy_from_slice(seq);
            lengths.push(seq.len());
        }
        Batch { items, width, lengths, targets: vec![1; rows.len()], users: (0..rows.len()).collect() }
    }

    fn cfg(kind: BackboneKind) -> BackboneConfig {
        BackboneConfig { d_model: 16, n_layers: 2, n_heads: 2, max_len: 10, dropout: 0.0, kind, max_steps: 3 }
    }

    fn run(model: &Model<f32>, b: &Batch, steps: usize) -> (Tape<f32>, Trace) {
        let mut tape = Tape::new();
        let mut rng = derive_rng(0, &[stream::TEST]);
        let trace = model.forward(&mut tape, b, steps, 0.0, &mut rng);
        (tape, trace)
    }

    #[test]
    fn future_items_cannot_reach_earlier_positions() {
        let model = Model::<f32>::init(cfg(BackboneKind::Attention), 20, 1).unwrap();
        let (ta, tra) = run(&model, &batch(&[&[3, 4, 5, 6, 7]], 5), 0);
        let (tb, trb) = run(&model, &batch(&[&[3, 4, 5, 9, 2]], 5), 0);
        let ha = ta.value(tra.enc_hidden.unwrap());
        let hb = tb.value(trb.enc_hidden.unwrap());
        for pos in 0..3 {
            assert_eq!(ha.row(pos), hb.row(pos), "position {pos} saw a future edit");
        }
        assert_ne!(ha.row(4), hb.row(4), "last position must react to its own item");
    }

    #[test]
    fn row_representation_is_independent_of_batchmates() {
        for kind in [BackboneKind::Attention, BackboneKind::Gru] {
            let model = Model::<f32>::init(cfg(kind), 20, 2).unwrap();
            let (ta, tra) = run(&model, &batch(&[&[5, 6, 7], &[1, 2, 3, 4, 5]], 5), 2);
            let (tb, trb) = run(&model, &batch(&[&[5, 6, 7], &[9, 9, 9, 9, 9]], 5), 2);
            for t in 0..=2 {
                assert_eq!(
                    ta.value(tra.states[t]).row(0),
                    tb.value(trb.states[t]).row(0),
                    "{kind:?}: r_{t} of row 0 changed when a batchmate changed"
                );
            }
        }
    }

    #[test]
    fn padding_amount_does_not_change_the_state() {
        // The same sequence alone (width 3) and heavily left-padded (width 6)
        // must produce bit-identical states for both encoder kinds.
        for kind in [BackboneKind::Attention, BackboneKind::Gru] {
            let model = Model::<f32>::init(cfg(kind), 20, 3).unwrap();
            let (ta, tra) = run(&model, &batch(&[&[4, 8, 2]], 3), 3);
            let (tb, trb) = run(&model, &batch(&[&[1, 2, 3, 4, 5, 6], &[4, 8, 2]], 6), 3);
            for t in 0..=3 {
                assert_eq!(
                    ta.value(tra.states[t]).row(0),
                    tb.value(trb.states[t]).row(1),
                    "{kind:?}: r_{t} depends on padding width"
                );
            }
        }
    }

    #[test]
    fn trace_has_expected_shapes_for_both_kinds() {
        for kind in [BackboneKind::Attention, BackboneKind::Gru] {
            let model = Model::<f32>::init(cfg(kind), 12, 4).unwrap();
            let b = batch(&[&[1, 2, 3], &[4, 5, 6, 7]], 4);
            let (tape, trace) = run(&model, &b, 3);
            assert_eq!(trace.steps(), 3);
            assert_eq!(trace.states.len(), 4);
            assert_eq!(trace.logp.len(), 4);
            for &s in &trace.states {
                let t = tape.value(s);
                assert_eq!((t.rows(), t.cols()), (2, 16));
            }
            for &lp in &trace.logp {
                let t = tape.value(lp);
                assert_eq!((t.rows(), t.cols()), (2, 13));
            }
        }
    }

    #[test]
    fn step_distributions_are_valid_and_exclude_padding() {
        let model = Model::<f32>::init(cfg(BackboneKind::Attention), 15, 5).unwrap();
        let b = batch(&[&[2, 9, 11], &[7, 3, 1, 14]], 4);
        let (tape, trace) = run(&model, &b, 2);
        for &lp in &trace.logp {
            let t = tape.value(lp);
            for r in 0..t.rows() {
                let probs: Vec<f64> = t.row(r).iter().map(|&x| (x as f64).exp()).collect();
                let sum: f64 = probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-4, "row sums to {sum}");
                assert_eq!(probs[0], 0.0, "padding item must carry zero probability");
            }
        }
    }

    #[test]
    fn highest_probability_item_is_the_nearest_by_dot_product() {
        let model = Model::<f32>::init(cfg(BackboneKind::Attention), 15, 6).unwrap();
        let b = batch(&[&[2, 9, 11, 3]], 4);
        let (tape, trace) = run(&model, &b, 1);
        let state = tape.value(trace.states[1]);
        let emb = model.embedding();
        let mut best = (1, f32::NEG_INFINITY);
        for item in 1..=model.n_items {
            let dot: f32 = state.row(0).iter().zip(emb.row(item)).map(|(&a, &b)| a * b).sum();
            if dot > best.1 {
                best = (item, dot);
            }
        }
        let lp = tape.value(trace.logp[1]);
        let argmax = (0..lp.cols()).max_by(|&a, &b| lp.at(0, a).partial_cmp(&lp.at(0, b)).unwrap()).unwrap();
        assert_eq!(argmax, best.0);
    }

    #[test]
    fn reasoning_states_move_between_steps() {
        for kind in [BackboneKind::Attention, BackboneKind::Gru] {
            let model = Model::<f32>::init(cfg(kind), 20, 7).unwrap();
            let (tape, trace) = run(&model, &batch(&[&[3, 1, 4, 1, 5]], 5), 3);
            for t in 1..=3 {
                let prev = tape.value(trace.states[t - 1]);
                let cur = tape.value(trace.states[t]);
                let delta: f32 =
                    prev.iter().zip(cur.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f32>().sqrt();
                assert!(delta > 1e-4, "{kind:?}: r_{t} barely moved ({delta})");
            }
        }
    }

    #[test]
    fn state_norms_sit_in_the_sanity_band() {
        for kind in [BackboneKind::Attention, BackboneKind::Gru] {
            let model = Model::<f32>::init(cfg(kind), 20, 8).unwrap();
            let (tape, trace) = run(&model, &batch(&[&[2, 3, 4, 5], &[6, 7, 8]], 4), 3);
            let sqrt_d = (16f32).sqrt();
            for &s in &trace.states {
                let t = tape.value(s);
                for r in 0..t.rows() {
                    let norm: f32 = t.row(r).iter().map(|&x| x * x).sum::<f32>().sqrt();
                    assert!(
                        norm > 0.1 * sqrt_d && norm < 10.0 * sqrt_d,
                        "{kind:?}: ‖r‖ = {norm} outside the layer-norm band"
                    );
                }
            }
        }
    }

    #[test]
    fn same_seed_same_dropout_stream_is_bit_deterministic() {
        let mut c = cfg(BackboneKind::Attention);
        c.dropout = 0.3;
        let model_a = Model::<f32>::init(c, 20, 9).unwrap();
        let model_b = Model::<f32>::init(c, 20, 9).unwrap();
        let b = batch(&[&[1, 2, 3, 4], &[5, 6, 7]], 4);
        let run_once = |m: &Model<f32>| {
            let mut tape = Tape::new();
            let mut rng = derive_rng(42, &[stream::DROPOUT, 0, 0]);
            let trace = m.forward(&mut tape, &b, 2, 0.3, &mut rng);
            tape.value(trace.logp[2]).as_slice().to_vec()
        };
        assert_eq!(run_once(&model_a), run_once(&model_b));
    }

    #[test]
    fn gradients_reach_embeddings_and_step_positions_but_not_padding() {
        for kind in [BackboneKind::Attention, BackboneKind::Gru] {
            let model = Model::<f32>::init(cfg(kind), 20, 10).unwrap();
            let b = batch(&[&[1, 2, 3], &[4, 5, 6, 7]], 4);
            let mut tape = Tape::new();
            let mut rng = derive_rng(0, &[stream::TEST]);
            let trace = model.forward(&mut tape, &b, 2, 0.0, &mut rng);
            let loss = tape.cross_entropy_mean(trace.logp[2], &b.targets);
            let grads = tape.backward(loss);
            let emb_grad = grads.get(trace.param_vars[model.params.idx("item_emb")]).unwrap();
            assert!(emb_grad.iter().any(|&g| g != 0.0), "{kind:?}: no signal into embeddings");
            assert!(
                emb_grad.row(0).iter().all(|&g| g == 0.0),
                "{kind:?}: padding row must stay gradient-free"
            );
            let rpe_grad = grads.get(trace.param_vars[model.params.idx("rpe")]).unwrap();
            assert!(rpe_grad.row(0).iter().any(|&g| g != 0.0), "{kind:?}: step-1 position unused");
            assert!(rpe_grad.row(1).iter().any(|&g| g != 0.0), "{kind:?}: step-2 position unused");
            assert!(
                rpe_grad.row(2).iter().all(|&g| g == 0.0),
                "{kind:?}: step-3 position should be untouched at depth 2"
            );
        }
    }

    #[test]
    fn zero_step_forward_is_a_plain_encoder() {
        let model = Model::<f32>::init(cfg(BackboneKind::Attention), 20, 11).unwrap();
        let (_, trace) = run(&model, &batch(&[&[1, 2, 3]], 3), 0);
        assert_eq!(trace.steps(), 0);
        assert_eq!(trace.states.len(), 1);
        assert_eq!(trace.logp.len(), 1);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = BackboneConfig::default();
        c.n_heads = 3; // 64 % 3 ≠ 0
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
    }
}
