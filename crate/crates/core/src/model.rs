//! The assembled tracker: embeddings, one encoder variant, and the scoring
//! head, with the batched forward pass used by training, evaluation, and
//! the benchmark.
//!
//! Layout convention: a batch of T turns is scored per slot; candidate
//! value contexts are computed once per batch (they do not depend on the
//! turn), and score columns come back as `(T*V) x 1` with row `t*V + v`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::data::{tokenize, DialogueTurn, Ontology, Vocab};
use crate::encoders::{Encoder, GceEncoder, GceInput, GladEncoder, Variant};
use crate::error::{Error, Result};
use crate::layers::{Affine, EmbeddingTable, Initializer};
use crate::scorer::{score_slot_batched, SlotValueScore};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_emb: usize,
    pub d_rnn: usize,
    /// Word embeddings are frozen by default (pretrained vectors stay
    /// fixed); slot embeddings and everything else always train.
    pub train_word_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Gce,
            d_emb: 400,
            d_rnn: 200,
            train_word_embeddings: false,
            seed: 1,
        }
    }
}

// ── Model ────────────────────────────────────────────────────────────

pub struct DstModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub ontology: Ontology,
    pub word_emb: EmbeddingTable,
    pub encoder: Encoder,
    /// Eq.-style scoring affine d_rnn -> 1, shared across slots.
    pub score_head: Affine,
    /// Learned mixing weight between utterance and action scores.
    pub omega: ParamId,
    /// Learned sentinel token embedding; encoded like a length-1 system
    /// action so the action pool is never empty.
    pub null_action: ParamId,
    /// Token ids of every candidate value, `[slot][value] -> ids`.
    value_tokens: Vec<Vec<Vec<usize>>>,
}

/// A turn mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTurn {
    pub tokens: Vec<usize>,
    pub acts: Vec<Vec<usize>>,
}

/// Scores of one slot over its candidate values for a batch of T turns.
pub struct SlotForward {
    pub slot_idx: usize,
    /// Ontology value index of each scored column.
    pub value_indices: Vec<usize>,
    /// `(T*V) x 1` probability column, row `t*V + v`.
    pub y: NodeId,
    pub y_utt: NodeId,
    pub y_act: NodeId,
}

pub struct BatchForward {
    pub t: usize,
    pub slots: Vec<SlotForward>,
}

/// Per-slot encodings of one turn, kept as individual nodes (the
/// sequential route: one encode call per piece).
pub struct EncodedSlotTurn {
    pub h_utt: NodeId,
    pub c_utt: NodeId,
    /// Row 0 is the null action context.
    pub act_ctx: Vec<NodeId>,
    pub val_ctx: Vec<NodeId>,
}

impl DstModel {
    /// Build a model bound to an ontology and vocabulary. The word table
    /// comes from `embedding_matrix` when given (e.g. loaded from a file)
    /// and is randomly initialized otherwise; it is created first so both
    /// variants share identical word vectors for one seed.
    pub fn new(
        cfg: ModelConfig,
        ontology: Ontology,
        vocab: Vocab,
        embedding_matrix: Option<Tensor>,
    ) -> Result<Self> {
        ontology.validate()?;
        if cfg.d_rnn % 2 != 0 {
            return Err(Error::Config("d_rnn must be even".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        let word_emb = match embedding_matrix {
            Some(t) => {
                if t.cols() != cfg.d_emb {
                    return Err(Error::Config(format!(
                        "embedding file dim {} != d_emb {}",
                        t.cols(),
                        cfg.d_emb
                    )));
                }
                if t.rows() != vocab.len() {
                    return Err(Error::Config(format!(
                        "embedding rows {} != vocab size {}",
                        t.rows(),
                        vocab.len()
                    )));
                }
                EmbeddingTable::from_tensor(
                    &mut store,
                    "word_emb",
                    t,
                    vocab.oov_id(),
                    cfg.train_word_embeddings,
                )
            }
            None => EmbeddingTable::random(
                &mut store,
                "word_emb",
                vocab.len(),
                cfg.d_emb,
                vocab.oov_id(),
                cfg.train_word_embeddings,
                &mut init,
            ),
        };
        let slot_names = ontology.slot_names();
        let encoder = match cfg.variant {
            Variant::Gce => Encoder::Gce(GceEncoder::new(
                &mut store,
                &slot_names,
                cfg.d_emb,
                cfg.d_rnn,
                &mut init,
            )),
            Variant::Glad => Encoder::Glad(GladEncoder::new(
                &mut store,
                slot_names.len(),
                cfg.d_emb,
                cfg.d_rnn,
                &mut init,
            )),
        };
        let score_head = Affine::new(&mut store, "score_head", cfg.d_rnn, 1, &mut init);
        let omega = store.add("omega", Tensor::scalar(1.0), true);
        let null_action = store.add(
            "null_action",
            init.uniform(1, cfg.d_emb, cfg.d_emb),
            true,
        );

        let value_tokens = ontology
            .slots
            .iter()
            .map(|slot| {
                slot.values
                    .iter()
                    .map(|v| vocab.encode(&tokenize(v)))
                    .collect()
            })
            .collect();

        Ok(DstModel {
            cfg,
            store,
            vocab,
            ontology,
            word_emb,
            encoder,
            score_head,
            omega,
            null_action,
            value_tokens,
        })
    }

    /// Exact count of scalar learnable parameters. The frozen word table
    /// is excluded because it never trains.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn d_rnn(&self) -> usize {
        self.cfg.d_rnn
    }

    pub fn slot_count(&self) -> usize {
        self.ontology.slot_count()
    }

    pub fn prepare_turn(&self, turn: &DialogueTurn) -> Result<PreparedTurn> {
        if turn.tokens.is_empty() {
            return Err(Error::EmptySequence { what: "utterance" });
        }
        for act in &turn.system_acts {
            if act.is_empty() {
                return Err(Error::EmptySequence {
                    what: "system action",
                });
            }
        }
        Ok(PreparedTurn {
            tokens: self.vocab.encode(&turn.tokens),
            acts: turn
                .system_acts
                .iter()
                .map(|a| self.vocab.encode(a))
                .collect(),
        })
    }

    // ── Forward pass ─────────────────────────────────────────────────

    /// Score candidate values for a batch of T turns. With `slot_plan =
    /// None` every (slot, value) pair in the ontology is scored; a plan
    /// restricts scoring to the listed pairs (training's sampled subset).
    /// `batch_slots` selects the stacked cross-slot pass for the GCE
    /// variant; GLAD always runs its local modules per slot.
    ///
    /// For T > 1 all turns must share the utterance length and action
    /// shape (the benchmark's synthetic batches do).
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        turns: &[PreparedTurn],
        slot_plan: Option<&[(usize, Vec<usize>)]>,
        batch_slots: bool,
    ) -> Result<BatchForward> {
        let t_count = turns.len();
        if t_count == 0 {
            return Err(Error::EmptySequence { what: "turn batch" });
        }
        let n = turns[0].tokens.len();
        let act_shape: Vec<usize> = turns[0].acts.iter().map(Vec::len).collect();
        for turn in turns {
            if turn.tokens.len() != n
                || turn.acts.len() != act_shape.len()
                || turn.acts.iter().map(Vec::len).collect::<Vec<_>>() != act_shape
            {
                return Err(Error::data(
                    "batched turns must share utterance length and action shape",
                ));
            }
        }

        let default_plan: Vec<(usize, Vec<usize>)>;
        let plan: &[(usize, Vec<usize>)] = match slot_plan {
            Some(p) => p,
            None => {
                default_plan = self
                    .ontology
                    .slots
                    .iter()
                    .enumerate()
                    .map(|(k, s)| (k, (0..s.values.len()).collect()))
                    .collect();
                &default_plan
            }
        };
        for (k, vals) in plan {
            if *k >= self.slot_count() {
                return Err(Error::UnknownSlot(format!("index {k}")));
            }
            if vals.is_empty() {
                return Err(Error::EmptySequence {
                    what: "slot value plan",
                });
            }
        }

        // utterance tokens, time-major over turns
        let utt_ids = stack_time_major(&turns.iter().map(|t| &t.tokens[..]).collect::<Vec<_>>());
        let x_utt = self.word_emb.lookup(tape, &self.store, &utt_ids)?;

        // per planned slot: H_utt (n*T x d), c_utt (T x d)
        let (h_utt, c_utt) = self.encode_utterances(tape, x_utt, plan, t_count, n, batch_slots)?;

        // action contexts per planned slot: ((L+1)*T x d), null first
        let act_ctx = self.encode_actions(tape, turns, plan, t_count, &act_shape, batch_slots)?;

        // value contexts per planned slot: (V x d) with their ontology indices
        let val_ctx = self.encode_values(tape, plan, batch_slots)?;

        let mut slots = Vec::with_capacity(plan.len());
        for (pos, (k, _)) in plan.iter().enumerate() {
            let (vals_node, value_indices) = &val_ctx[pos];
            let (y, y_utt, y_act) = score_slot_batched(
                tape,
                &self.store,
                &self.score_head,
                self.omega,
                h_utt[pos],
                c_utt[pos],
                act_ctx[pos],
                *vals_node,
                t_count,
            )?;
            slots.push(SlotForward {
                slot_idx: *k,
                value_indices: value_indices.clone(),
                y,
                y_utt,
                y_act,
            });
        }
        Ok(BatchForward {
            t: t_count,
            slots,
        })
    }

    fn encode_utterances(
        &self,
        tape: &mut Tape,
        x_utt: NodeId,
        plan: &[(usize, Vec<usize>)],
        t_count: usize,
        n: usize,
        batch_slots: bool,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let ks = plan.len();
        match &self.encoder {
            Encoder::Gce(enc) if batch_slots => {
                // one stacked pass over all (slot, turn) lanes
                let mut sel = Vec::with_capacity(ks * t_count);
                let mut cond = Vec::with_capacity(ks * t_count);
                for (k, _) in plan {
                    for tau in 0..t_count {
                        sel.push(tau);
                        cond.push(*k);
                    }
                }
                let input = GceInput::Fanout {
                    x: x_utt,
                    t: t_count,
                    sel,
                };
                let (h_all, c_all) = enc.encode_batch(tape, &self.store, &input, &cond, n)?;
                let mut hs = Vec::with_capacity(ks);
                let mut cs = Vec::with_capacity(ks);
                for pos in 0..ks {
                    hs.push(tape.slice_batch(h_all, ks * t_count, pos * t_count, t_count)?);
                    cs.push(tape.slice_rows(c_all, pos * t_count, t_count)?);
                }
                Ok((hs, cs))
            }
            Encoder::Gce(enc) => {
                let mut hs = Vec::with_capacity(ks);
                let mut cs = Vec::with_capacity(ks);
                for (k, _) in plan {
                    let input = GceInput::Stacked {
                        x: x_utt,
                        batch: t_count,
                    };
                    let (h, c) =
                        enc.encode_batch(tape, &self.store, &input, &vec![*k; t_count], n)?;
                    hs.push(h);
                    cs.push(c);
                }
                Ok((hs, cs))
            }
            Encoder::Glad(enc) => {
                let h_g = enc.global_pass(tape, &self.store, x_utt, t_count, n)?;
                let mut hs = Vec::with_capacity(ks);
                let mut cs = Vec::with_capacity(ks);
                for (k, _) in plan {
                    let (h, c) = enc
                        .encode_with_global(tape, &self.store, h_g, x_utt, *k, t_count, n)?;
                    hs.push(h);
                    cs.push(c);
                }
                Ok((hs, cs))
            }
        }
    }

    /// Encode the null sentinel plus each real system action for every
    /// planned slot; assemble per slot as `(L+1)*T x d`, action-major so
    /// the softmax over actions runs per turn.
    fn encode_actions(
        &self,
        tape: &mut Tape,
        turns: &[PreparedTurn],
        plan: &[(usize, Vec<usize>)],
        t_count: usize,
        act_shape: &[usize],
        batch_slots: bool,
    ) -> Result<Vec<NodeId>> {
        let ks = plan.len();
        let null_leaf = tape.param(&self.store, self.null_action);

        // null context per planned slot (turn independent): ks x d
        let null_ctx: Vec<NodeId> = match &self.encoder {
            Encoder::Gce(enc) if batch_slots => {
                let cond: Vec<usize> = plan.iter().map(|(k, _)| *k).collect();
                let input = GceInput::Fanout {
                    x: null_leaf,
                    t: 1,
                    sel: vec![0; ks],
                };
                let (_, c_all) = enc.encode_batch(tape, &self.store, &input, &cond, 1)?;
                (0..ks)
                    .map(|pos| tape.slice_rows(c_all, pos, 1))
                    .collect::<Result<_>>()?
            }
            Encoder::Gce(enc) => plan
                .iter()
                .map(|(k, _)| {
                    let input = GceInput::Stacked {
                        x: null_leaf,
                        batch: 1,
                    };
                    let (_, c) = enc.encode_batch(tape, &self.store, &input, &[*k], 1)?;
                    Ok(c)
                })
                .collect::<Result<_>>()?,
            Encoder::Glad(enc) => {
                let h_g = enc.global_pass(tape, &self.store, null_leaf, 1, 1)?;
                plan.iter()
                    .map(|(k, _)| {
                        let (_, c) = enc
                            .encode_with_global(tape, &self.store, h_g, null_leaf, *k, 1, 1)?;
                        Ok(c)
                    })
                    .collect::<Result<_>>()?
            }
        };

        // real action j context per planned slot: T x d each
        let mut act_ctx_per_slot: Vec<Vec<NodeId>> = vec![Vec::new(); ks];
        for (j, &len) in act_shape.iter().enumerate() {
            let ids =
                stack_time_major(&turns.iter().map(|t| &t.acts[j][..]).collect::<Vec<_>>());
            let x_act = self.word_emb.lookup(tape, &self.store, &ids)?;
            match &self.encoder {
                Encoder::Gce(enc) if batch_slots => {
                    let mut sel = Vec::with_capacity(ks * t_count);
                    let mut cond = Vec::with_capacity(ks * t_count);
                    for (k, _) in plan {
                        for tau in 0..t_count {
                            sel.push(tau);
                            cond.push(*k);
                        }
                    }
                    let input = GceInput::Fanout {
                        x: x_act,
                        t: t_count,
                        sel,
                    };
                    let (_, c_all) = enc.encode_batch(tape, &self.store, &input, &cond, len)?;
                    for (pos, ctxs) in act_ctx_per_slot.iter_mut().enumerate() {
                        ctxs.push(tape.slice_rows(c_all, pos * t_count, t_count)?);
                    }
                }
                Encoder::Gce(enc) => {
                    for (pos, (k, _)) in plan.iter().enumerate() {
                        let input = GceInput::Stacked {
                            x: x_act,
                            batch: t_count,
                        };
                        let (_, c) =
                            enc.encode_batch(tape, &self.store, &input, &vec![*k; t_count], len)?;
                        act_ctx_per_slot[pos].push(c);
                    }
                }
                Encoder::Glad(enc) => {
                    let h_g = enc.global_pass(tape, &self.store, x_act, t_count, len)?;
                    for (pos, (k, _)) in plan.iter().enumerate() {
                        let (_, c) = enc
                            .encode_with_global(tape, &self.store, h_g, x_act, *k, t_count, len)?;
                        act_ctx_per_slot[pos].push(c);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(ks);
        for (pos, reals) in act_ctx_per_slot.into_iter().enumerate() {
            let null_rows = tape.tile_rows(null_ctx[pos], t_count);
            let mut parts = vec![null_rows];
            parts.extend(reals);
            out.push(tape.concat_rows(&parts)?);
        }
        Ok(out)
    }

    /// Candidate value contexts per planned slot, grouped by token length
    /// so same-length values share one stacked pass (across slots for the
    /// batched GCE path, within a slot otherwise).
    fn encode_values(
        &self,
        tape: &mut Tape,
        plan: &[(usize, Vec<usize>)],
        batch_slots: bool,
    ) -> Result<Vec<(NodeId, Vec<usize>)>> {
        let ks = plan.len();
        match &self.encoder {
            Encoder::Gce(enc) if batch_slots => {
                // group (slot position, value) by token length, plan order
                let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
                for (pos, (k, vals)) in plan.iter().enumerate() {
                    for &v in vals {
                        let len = self.value_tokens[*k][v].len();
                        groups.entry(len).or_default().push((pos, v));
                    }
                }
                // encode each group in one stacked pass
                let mut per_slot_parts: Vec<Vec<NodeId>> = vec![Vec::new(); ks];
                let mut per_slot_indices: Vec<Vec<usize>> = vec![Vec::new(); ks];
                for (len, members) in groups {
                    let seqs: Vec<&[usize]> = members
                        .iter()
                        .map(|(pos, v)| &self.value_tokens[plan[*pos].0][*v][..])
                        .collect();
                    let ids = stack_time_major(&seqs);
                    let x = self.word_emb.lookup(tape, &self.store, &ids)?;
                    let cond: Vec<usize> = members.iter().map(|(pos, _)| plan[*pos].0).collect();
                    let input = GceInput::Stacked {
                        x,
                        batch: members.len(),
                    };
                    let (_, c_all) = enc.encode_batch(tape, &self.store, &input, &cond, len)?;
                    // members are plan-ordered, so each slot's rows are contiguous
                    let mut offset = 0;
                    while offset < members.len() {
                        let pos = members[offset].0;
                        let mut end = offset;
                        while end < members.len() && members[end].0 == pos {
                            end += 1;
                        }
                        let slice = tape.slice_rows(c_all, offset, end - offset)?;
                        per_slot_parts[pos].push(slice);
                        per_slot_indices[pos]
                            .extend(members[offset..end].iter().map(|(_, v)| *v));
                        offset = end;
                    }
                }
                per_slot_parts
                    .into_iter()
                    .zip(per_slot_indices)
                    .map(|(parts, idx)| Ok((tape.concat_rows(&parts)?, idx)))
                    .collect()
            }
            _ => {
                // per slot, grouped by length within the slot
                let mut out = Vec::with_capacity(ks);
                for (k, vals) in plan {
                    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                    for &v in vals {
                        groups
                            .entry(self.value_tokens[*k][v].len())
                            .or_default()
                            .push(v);
                    }
                    let mut parts = Vec::new();
                    let mut indices = Vec::new();
                    for (len, members) in groups {
                        let seqs: Vec<&[usize]> = members
                            .iter()
                            .map(|v| &self.value_tokens[*k][*v][..])
                            .collect();
                        let ids = stack_time_major(&seqs);
                        let x = self.word_emb.lookup(tape, &self.store, &ids)?;
                        let c = match &self.encoder {
                            Encoder::Gce(enc) => {
                                let input = GceInput::Stacked {
                                    x,
                                    batch: members.len(),
                                };
                                let (_, c) = enc.encode_batch(
                                    tape,
                                    &self.store,
                                    &input,
                                    &vec![*k; members.len()],
                                    len,
                                )?;
                                c
                            }
                            Encoder::Glad(enc) => {
                                let h_g = enc
                                    .global_pass(tape, &self.store, x, members.len(), len)?;
                                let (_, c) = enc.encode_with_global(
                                    tape,
                                    &self.store,
                                    h_g,
                                    x,
                                    *k,
                                    members.len(),
                                    len,
                                )?;
                                c
                            }
                        };
                        parts.push(c);
                        indices.extend(members);
                    }
                    out.push((tape.concat_rows(&parts)?, indices));
                }
                Ok(out)
            }
        }
    }

    // ── Inference conveniences ───────────────────────────────────────

    /// Score every (slot, value) pair of one turn on an inference tape.
    /// Returns per slot the (value index, y_utt, y_act, y) tuples.
    pub fn score_turn(
        &self,
        turn: &DialogueTurn,
        batch_slots: bool,
    ) -> Result<Vec<(usize, Vec<(usize, f64, f64, f64)>)>> {
        let prepared = self.prepare_turn(turn)?;
        let mut tape = Tape::inference();
        let fwd = self.forward_batch(&mut tape, &[prepared], None, batch_slots)?;
        Ok(fwd
            .slots
            .iter()
            .map(|s| {
                let y = tape.value(s.y).data();
                let yu = tape.value(s.y_utt).data();
                let ya = tape.value(s.y_act).data();
                let entries = s
                    .value_indices
                    .iter()
                    .enumerate()
                    .map(|(col, &v)| (v, yu[col], ya[col], y[col]))
                    .collect();
                (s.slot_idx, entries)
            })
            .collect())
    }

    /// Score a single (slot, value) pair. Unknown slots or values are
    /// rejected; the result does not depend on which other values exist.
    pub fn score_slot_value(
        &self,
        turn: &DialogueTurn,
        slot: &str,
        value: &str,
    ) -> Result<SlotValueScore> {
        let k = self.ontology.slot_index(slot)?;
        let v = self.ontology.value_index(k, value)?;
        let prepared = self.prepare_turn(turn)?;
        let mut tape = Tape::inference();
        let plan = vec![(k, vec![v])];
        let fwd = self.forward_batch(&mut tape, &[prepared], Some(&plan), true)?;
        let s = &fwd.slots[0];
        Ok(SlotValueScore {
            slot: slot.to_string(),
            value: value.to_string(),
            y_utt: tape.value(s.y_utt).data()[0],
            y_act: tape.value(s.y_act).data()[0],
            y: tape.value(s.y).data()[0],
        })
    }

    /// Sequential per-piece encoding of one turn for one slot: utterance,
    /// null plus each action, and every candidate value, as independent
    /// encode calls.
    pub fn encode_turn_slot(
        &self,
        tape: &mut Tape,
        turn: &PreparedTurn,
        slot_idx: usize,
    ) -> Result<EncodedSlotTurn> {
        if slot_idx >= self.slot_count() {
            return Err(Error::UnknownSlot(format!("index {slot_idx}")));
        }
        let x = self.word_emb.lookup(tape, &self.store, &turn.tokens)?;
        let (h_utt, c_utt) = self.encoder.encode_single(tape, &self.store, x, slot_idx)?;
        let null_leaf = tape.param(&self.store, self.null_action);
        let (_, null_ctx) = self
            .encoder
            .encode_single(tape, &self.store, null_leaf, slot_idx)?;
        let mut act_ctx = vec![null_ctx];
        for act in &turn.acts {
            let xa = self.word_emb.lookup(tape, &self.store, act)?;
            let (_, c) = self.encoder.encode_single(tape, &self.store, xa, slot_idx)?;
            act_ctx.push(c);
        }
        let mut val_ctx = Vec::new();
        for ids in &self.value_tokens[slot_idx] {
            let xv = self.word_emb.lookup(tape, &self.store, ids)?;
            let (_, c) = self.encoder.encode_single(tape, &self.store, xv, slot_idx)?;
            val_ctx.push(c);
        }
        Ok(EncodedSlotTurn {
            h_utt,
            c_utt,
            act_ctx,
            val_ctx,
        })
    }

    pub fn value_token_ids(&self, slot_idx: usize, value_idx: usize) -> &[usize] {
        &self.value_tokens[slot_idx][value_idx]
    }
}

/// Interleave same-length sequences into time-major order: output index
/// `t*B + b` holds element t of sequence b.
pub fn stack_time_major(seqs: &[&[usize]]) -> Vec<usize> {
    let n = seqs[0].len();
    let mut ids = Vec::with_capacity(n * seqs.len());
    for t in 0..n {
        for s in seqs {
            ids.push(s[t]);
        }
    }
    ids
}

// ── Tests ────────────────────────────────────────────────────────────
