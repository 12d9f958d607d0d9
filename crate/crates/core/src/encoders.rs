//! The two encoder variants.
//!
//! `GceEncoder` conditions a single shared biLSTM and attention scorer on a
//! slot embedding: the slot vector is concatenated to every input token and
//! to every hidden state before attention scoring. Because the recurrent
//! weights are shared across slots, all slot-conditioned copies of a batch
//! can run through one stacked recurrent pass.
//!
//! `GladEncoder` is the global-local baseline: one shared (global) biLSTM
//! and self-attention plus a dedicated local biLSTM and self-attention per
//! slot, mixed by a per-slot sigmoid gate. The local weights differ per
//! slot, so each slot costs a full recurrent pass of its own.
//!
//! Both produce, for an input sequence and a slot, the hidden sequence `H`
//! (`n x d_rnn`) and the attention-pooled context vector `c` (`d_rnn`).

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::layers::{Affine, BiLstm, Initializer, LstmCell, SelfAttention, SlotEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gce,
    Glad,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Gce => write!(f, "gce"),
            Variant::Glad => write!(f, "glad"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gce" => Ok(Variant::Gce),
            "glad" => Ok(Variant::Glad),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected gce or glad)"
            ))),
        }
    }
}

// ── GCE ──────────────────────────────────────────────────────────────

/// Globally-conditioned encoder: one biLSTM over per-token concatenations
/// `[x_i ; s_k]`, one attention scorer over `[H_i ; s_k]`, and the slot
/// embedding table. Parameter count is independent of the slot count
/// except for the slot-embedding rows themselves.
#[derive(Debug, Clone)]
pub struct GceEncoder {
    pub rnn: BiLstm,
    pub attn: Affine,
    pub slots: SlotEmbedding,
    pub d_emb: usize,
}

/// Input form for a batched conditioned pass.
pub enum GceInput {
    /// B distinct sequences stacked time-major (`n*B x d_emb`).
    Stacked { x: NodeId, batch: usize },
    /// A time-major set of `t` source sequences (`n*t x d_emb`) fanned out
    /// to the batch: conditioned copy j reads source `sel[j]`. The input
    /// projection is computed once per source row, not once per copy.
    Fanout { x: NodeId, t: usize, sel: Vec<usize> },
}

impl GceEncoder {
    pub fn new(
        store: &mut ParamStore,
        slot_names: &[String],
        d_emb: usize,
        d_rnn: usize,
        init: &mut Initializer,
    ) -> Self {
        assert!(d_rnn % 2 == 0, "d_rnn must be even (two directions)");
        let rnn = BiLstm::new(store, "gce.rnn", 2 * d_emb, d_rnn / 2, init);
        let attn = Affine::new(store, "gce.attn", d_rnn + d_emb, 1, init);
        let slots = SlotEmbedding::new(store, "gce.slots", slot_names, d_emb, init);
        GceEncoder {
            rnn,
            attn,
            slots,
            d_emb,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.count()
    }

    pub fn d_rnn(&self) -> usize {
        self.rnn.out_dim()
    }

    /// Learnable scalar count (slot rows included).
    pub fn param_count(&self) -> usize {
        self.rnn.param_count() + self.attn.param_count() + self.slots.count() * self.d_emb
    }

    /// Encode one sequence for one slot, following the literal conditioned
    /// form: concatenate the slot row to every token, run the biLSTM, score
    /// each hidden state concatenated with the slot row, softmax, pool.
    pub fn encode_single(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        slot_idx: usize,
    ) -> Result<(NodeId, NodeId)> {
        let n = tape.value(x).rows();
        let s = self.slots.row(tape, store, slot_idx)?;
        let x_cond = tape.concat_cols(x, s)?;
        let h = self.rnn.forward_batched(tape, store, x_cond, 1, n)?;
        let h_cond = tape.concat_cols(h, s)?;
        let scores = self.attn.apply(tape, store, h_cond)?;
        let p = tape.softmax_time(scores, 1)?;
        let c = tape.attend_time(h, p, 1)?;
        Ok((h, c))
    }

    /// Input projection of one direction with the conditioning term
    /// factored out: `W [x ; s] = W_x x + W_s s`, so the wide matmul runs
    /// on unique source rows only and the per-slot term is one row each.
    fn cond_preact(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cell: &LstmCell,
        input: &GceInput,
        cond: NodeId,
    ) -> Result<NodeId> {
        let e = self.d_emb;
        let w = tape.param(store, cell.w);
        let wx = tape.slice_rows(w, 0, e)?;
        let ws = tape.slice_rows(w, e, e)?;
        let px = match input {
            GceInput::Stacked { x, .. } => tape.matmul(*x, wx)?,
            GceInput::Fanout { x, t, sel } => {
                let proj = tape.matmul(*x, wx)?;
                tape.gather_batch(proj, *t, sel)?
            }
        };
        // fold the bias into the small per-lane term before the tiled add
        let pc = tape.matmul(cond, ws)?;
        let b = tape.param(store, cell.b);
        let pc_b = tape.add(pc, b)?;
        tape.add(px, pc_b)
    }

    /// One stacked conditioned pass over B sequences, where sequence j is
    /// conditioned on slot `cond_slots[j]`. Equals `encode_single` per
    /// sequence up to floating-point reassociation (within 1e-12).
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &GceInput,
        cond_slots: &[usize],
        n: usize,
    ) -> Result<(NodeId, NodeId)> {
        let b = cond_slots.len();
        match input {
            GceInput::Stacked { batch, .. } if *batch != b => {
                return Err(Error::ShapeMismatch {
                    op: "gce_encode_batch",
                    lhs: format!("batch {batch}"),
                    rhs: format!("{b} condition rows"),
                })
            }
            GceInput::Fanout { sel, .. } if sel.len() != b => {
                return Err(Error::ShapeMismatch {
                    op: "gce_encode_batch",
                    lhs: format!("fanout {}", sel.len()),
                    rhs: format!("{b} condition rows"),
                })
            }
            _ => {}
        }
        let cond = self.slots.rows(tape, store, cond_slots)?;
        let pf = self.cond_preact(tape, store, &self.rnn.fwd, input, cond)?;
        let pb = self.cond_preact(tape, store, &self.rnn.bwd, input, cond)?;
        let h = self.rnn.run_from_preacts(tape, store, pf, pb, b, n)?;

        // attention scores: [H_i ; s] through the affine, factored the same way
        let d = self.d_rnn();
        let w = tape.param(store, self.attn.w);
        let wh = tape.slice_rows(w, 0, d)?;
        let wc = tape.slice_rows(w, d, self.d_emb)?;
        let sh = tape.matmul(h, wh)?;
        let sc = tape.matmul(cond, wc)?;
        let bias = tape.param(store, self.attn.b);
        let mixed = tape.add(sh, sc)?;
        let scores = tape.add(mixed, bias)?;
        let p = tape.softmax_time(scores, b)?;
        let c = tape.attend_time(h, p, b)?;
        Ok((h, c))
    }
}

// ── GLAD baseline ────────────────────────────────────────────────────

/// Per-slot module set of the baseline.
#[derive(Debug, Clone)]
pub struct GladLocal {
    pub rnn: BiLstm,
    pub attn: SelfAttention,
    /// Mixing scalar beta_k; the global path carries weight sigmoid(beta_k).
    pub mix: ParamId,
}

/// Global-local encoder: a shared biLSTM + self-attention, and one
/// dedicated biLSTM + self-attention per slot. Parameter count grows by a
/// full local-module increment per slot.
#[derive(Debug, Clone)]
pub struct GladEncoder {
    pub global_rnn: BiLstm,
    pub global_attn: SelfAttention,
    pub locals: Vec<GladLocal>,
    pub d_emb: usize,
}

impl GladEncoder {
    pub fn new(
        store: &mut ParamStore,
        slot_count: usize,
        d_emb: usize,
        d_rnn: usize,
        init: &mut Initializer,
    ) -> Self {
        assert!(d_rnn % 2 == 0, "d_rnn must be even (two directions)");
        let global_rnn = BiLstm::new(store, "glad.global.rnn", d_emb, d_rnn / 2, init);
        let global_attn = SelfAttention::new(store, "glad.global.attn", d_rnn, init);
        let locals = (0..slot_count)
            .map(|k| {
                let rnn = BiLstm::new(store, &format!("glad.local{k}.rnn"), d_emb, d_rnn / 2, init);
                let attn =
                    SelfAttention::new(store, &format!("glad.local{k}.attn"), d_rnn, init);
                let mix = store.add(
                    format!("glad.local{k}.mix"),
                    crate::autodiff::Tensor::scalar(0.0),
                    true,
                );
                GladLocal { rnn, attn, mix }
            })
            .collect();
        GladEncoder {
            global_rnn,
            global_attn,
            locals,
            d_emb,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.locals.len()
    }

    pub fn d_rnn(&self) -> usize {
        self.global_rnn.out_dim()
    }

    pub fn param_count(&self) -> usize {
        let local: usize = self
            .locals
            .iter()
            .map(|l| l.rnn.param_count() + l.attn.param_count() + 1)
            .sum();
        self.global_rnn.param_count() + self.global_attn.param_count() + local
    }

    /// The slot-independent recurrent pass; reusable across slots for the
    /// same input batch.
    pub fn global_pass(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        batch: usize,
        n: usize,
    ) -> Result<NodeId> {
        self.global_rnn.forward_batched(tape, store, x, batch, n)
    }

    /// Slot-specific encoding given a precomputed global pass: run the
    /// local biLSTM, gate the two hidden sequences with sigmoid(beta_k),
    /// then pool the mixed sequence with both attentions and gate those.
    pub fn encode_with_global(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_global: NodeId,
        x: NodeId,
        slot_idx: usize,
        batch: usize,
        n: usize,
    ) -> Result<(NodeId, NodeId)> {
        let local = self
            .locals
            .get(slot_idx)
            .ok_or_else(|| Error::UnknownSlot(format!("index {slot_idx}")))?;
        let h_local = local.rnn.forward_batched(tape, store, x, batch, n)?;
        let beta = tape.param(store, local.mix);
        let gate = tape.sigmoid(beta);
        let neg = tape.scale(gate, -1.0);
        let inv_gate = tape.add_const(neg, 1.0);
        let hg = tape.mul(h_global, gate)?;
        let hl = tape.mul(h_local, inv_gate)?;
        let h = tape.add(hg, hl)?;
        let c_global = self.global_attn.apply_batched(tape, store, h, batch)?;
        let c_local = local.attn.apply_batched(tape, store, h, batch)?;
        let cg = tape.mul(c_global, gate)?;
        let cl = tape.mul(c_local, inv_gate)?;
        let c = tape.add(cg, cl)?;
        Ok((h, c))
    }

    /// Encode one sequence for one slot.
    pub fn encode_single(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        slot_idx: usize,
    ) -> Result<(NodeId, NodeId)> {
        let n = tape.value(x).rows();
        let h_g = self.global_pass(tape, store, x, 1, n)?;
        self.encode_with_global(tape, store, h_g, x, slot_idx, 1, n)
    }
}

// ── Variant dispatch ─────────────────────────────────────────────────

/// Either encoder behind one surface.
#[derive(Debug, Clone)]
pub enum Encoder {
    Gce(GceEncoder),
    Glad(GladEncoder),
}

impl Encoder {
    pub fn variant(&self) -> Variant {
        match self {
            Encoder::Gce(_) => Variant::Gce,
            Encoder::Glad(_) => Variant::Glad,
        }
    }

    pub fn slot_count(&self) -> usize {
        match self {
            Encoder::Gce(e) => e.slot_count(),
            Encoder::Glad(e) => e.slot_count(),
        }
    }

    pub fn d_rnn(&self) -> usize {
        match self {
            Encoder::Gce(e) => e.d_rnn(),
            Encoder::Glad(e) => e.d_rnn(),
        }
    }

    /// Exact count of scalar learnable parameters in the encoder.
    pub fn param_count(&self) -> usize {
        match self {
            Encoder::Gce(e) => e.param_count(),
            Encoder::Glad(e) => e.param_count(),
        }
    }

    /// Single-sequence, single-slot encode (`n x d_emb` to `(H, c)`).
    pub fn encode_single(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        slot_idx: usize,
    ) -> Result<(NodeId, NodeId)> {
        match self {
            Encoder::Gce(e) => e.encode_single(tape, store, x, slot_idx),
            Encoder::Glad(e) => e.encode_single(tape, store, x, slot_idx),
        }
    }
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("slot{i}")).collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data)
    }

    #[test]
    fn gce_single_token_pools_trivially() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(4);
        let enc = GceEncoder::new(&mut store, &names(2), 3, 4, &mut init);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(rand_tensor(&mut rng, 1, 3));
        let (h, c) = enc.encode_single(&mut tape, &store, x, 0).unwrap();
        assert_eq!(tape.value(h).rows(), 1);
        // p = [1] so c equals the single hidden row exactly
        assert_eq!(tape.value(c).data(), tape.value(h).data());
    }

    #[test]
    fn gce_identical_slot_rows_give_identical_outputs() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(4);
        let enc = GceEncoder::new(&mut store, &names(2), 3, 4, &mut init);
        // overwrite slot row 1 with slot row 0
        {
            let t = store.value_mut(enc.slots.table);
            let row0 = t.row(0).to_vec();
            t.data_mut()[3..6].copy_from_slice(&row0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_t = rand_tensor(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let (h0, c0) = enc.encode_single(&mut tape, &store, x, 0).unwrap();
        let (h1, c1) = enc.encode_single(&mut tape, &store, x, 1).unwrap();
        assert_eq!(tape.value(h0).data(), tape.value(h1).data());
        assert_eq!(tape.value(c0).data(), tape.value(c1).data());
    }

    #[test]
    fn gce_distinct_slots_give_distinct_outputs() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(4);
        let enc = GceEncoder::new(&mut store, &names(3), 3, 4, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&mut rng, 3, 3));
            let (_, c0) = enc.encode_single(&mut tape, &store, x, 0).unwrap();
            let (_, c1) = enc.encode_single(&mut tape, &store, x, 1).unwrap();
            let max_diff = tape
                .value(c0)
                .data()
                .iter()
                .zip(tape.value(c1).data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff > 0.0, "trial {trial}: slots indistinguishable");
        }
    }

    #[test]
    fn gce_rejects_unknown_slot() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(4);
        let enc = GceEncoder::new(&mut store, &names(2), 3, 4, &mut init);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 3));
        assert!(enc.encode_single(&mut tape, &store, x, 5).is_err());
    }

    #[test]
    fn gce_batched_equals_sequential_within_1e12() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(19);
        let k = 4;
        let enc = GceEncoder::new(&mut store, &names(k), 3, 6, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 5;
        let x_t = rand_tensor(&mut rng, n, 3);

        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        // sequential: K separate conditioned passes
        let seq: Vec<(NodeId, NodeId)> = (0..k)
            .map(|s| enc.encode_single(&mut tape, &store, x, s).unwrap())
            .collect();
        // batched: one stacked pass, fanning the single sequence out K ways
        let input = GceInput::Fanout {
            x,
            t: 1,
            sel: vec![0; k],
        };
        let cond: Vec<usize> = (0..k).collect();
        let (h_all, c_all) = enc.encode_batch(&mut tape, &store, &input, &cond, n).unwrap();

        for s in 0..k {
            let h_s = tape.slice_batch(h_all, k, s, 1).unwrap();
            let c_s = tape.slice_rows(c_all, s, 1).unwrap();
            let (h_ref, c_ref) = seq[s];
            for (a, b) in tape
                .value(h_s)
                .data()
                .iter()
                .zip(tape.value(h_ref).data())
            {
                assert!((a - b).abs() < 1e-12, "H mismatch at slot {s}");
            }
            for (a, b) in tape
                .value(c_s)
                .data()
                .iter()
                .zip(tape.value(c_ref).data())
            {
                assert!((a - b).abs() < 1e-12, "c mismatch at slot {s}");
            }
        }
    }

    #[test]
    fn glad_saturated_gate_collapses_to_global_path() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(8);
        let enc = GladEncoder::new(&mut store, 2, 3, 4, &mut init);
        // beta = 50 saturates the gate at the global side
        {
            let t = store.value_mut(enc.locals[0].mix);
            t.data_mut()[0] = 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_t = rand_tensor(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let h_g = enc.global_pass(&mut tape, &store, x, 1, 4).unwrap();
        let (h, c) = enc
            .encode_with_global(&mut tape, &store, h_g, x, 0, 1, 4)
            .unwrap();
        for (a, b) in tape.value(h).data().iter().zip(tape.value(h_g).data()) {
            assert!((a - b).abs() < 1e-9);
        }
        // pure global H pooled by the global attention
        let c_pure = enc.global_attn.apply(&mut tape, &store, h_g).unwrap();
        for (a, b) in tape.value(c).data().iter().zip(tape.value(c_pure).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn glad_parameter_count_grows_by_full_local_increments() {
        let mk = |k: usize| {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(1);
            GladEncoder::new(&mut store, k, 3, 4, &mut init).param_count()
        };
        let c1 = mk(1);
        let c2 = mk(2);
        let c5 = mk(5);
        // one local module = one biLSTM + one attention + one mixing scalar
        let mut probe_store = ParamStore::new();
        let mut probe_init = Initializer::new(1);
        let probe = GladEncoder::new(&mut probe_store, 1, 3, 4, &mut probe_init);
        let local_inc =
            probe.locals[0].rnn.param_count() + probe.locals[0].attn.param_count() + 1;
        assert_eq!(c2 - c1, local_inc);
        assert_eq!(c5 - c1, 4 * local_inc);
    }

    #[test]
    fn gce_parameter_count_grows_only_by_slot_rows() {
        let d_emb = 3;
        let mk = |k: usize| {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(1);
            GceEncoder::new(&mut store, &names(k), d_emb, 4, &mut init).param_count()
        };
        let c1 = mk(1);
        for k in [2usize, 5, 20] {
            assert_eq!(mk(k) - c1, (k - 1) * d_emb);
        }
    }

    #[test]
    fn gce_has_fewer_parameters_than_glad_at_equal_dims() {
        for k in [1usize, 2, 5, 20] {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(1);
            let gce = GceEncoder::new(&mut store, &names(k), 4, 6, &mut init).param_count();
            let mut store = ParamStore::new();
            let mut init = Initializer::new(1);
            let glad = GladEncoder::new(&mut store, k, 4, 6, &mut init).param_count();
            assert!(gce < glad, "K={k}: GCE {gce} !< GLAD {glad}");
        }
    }

    #[test]
    fn glad_batched_equals_single_within_1e12() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(14);
        let enc = GladEncoder::new(&mut store, 2, 3, 4, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 4;
        let a = rand_tensor(&mut rng, n, 3);
        let b = rand_tensor(&mut rng, n, 3);

        let mut tape = Tape::new();
        let na = tape.leaf(a.clone());
        let nb = tape.leaf(b.clone());
        let (_, ca) = enc.encode_single(&mut tape, &store, na, 1).unwrap();
        let (_, cb) = enc.encode_single(&mut tape, &store, nb, 1).unwrap();

        // stacked: both sequences in one time-major batch
        let mut rows = Vec::new();
        for t in 0..n {
            rows.push(a.row(t).to_vec());
            rows.push(b.row(t).to_vec());
        }
        let stacked = tape.leaf(Tensor::from_rows(&rows));
        let h_g = enc.global_pass(&mut tape, &store, stacked, 2, n).unwrap();
        let (_, c_all) = enc
            .encode_with_global(&mut tape, &store, h_g, stacked, 1, 2, n)
            .unwrap();
        for (i, single) in [ca, cb].into_iter().enumerate() {
            let got = tape.slice_rows(c_all, i, 1).unwrap();
            for (x, y) in tape.value(got).data().iter().zip(tape.value(single).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
