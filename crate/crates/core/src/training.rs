//! Per-pair binary cross-entropy training with Adam, turn-level
//! mini-batches, negative sampling, early stopping on dev joint goal, and
//! self-contained checkpoints.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, ParamStore, SavedParam, Tape, Tensor};
use crate::data::{Dialogue, Ontology, Vocab};
use crate::error::{Error, Result};
use crate::model::{DstModel, ModelConfig};
use crate::tracker;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Turns per mini-batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Dev evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// Sampled negatives per positive pair; 0 scores the full ontology.
    pub negative_ratio: usize,
    pub batch_slots: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            adam: AdamConfig::default(),
            epochs: 30,
            patience: 10,
            seed: 1,
            negative_ratio: 3,
            batch_slots: true,
            threshold: 0.5,
        }
    }
}

// ── Loss ─────────────────────────────────────────────────────────────

const BCE_CLAMP: f64 = 1e-12;

/// Binary cross-entropy of one probability node against a 0/1 label,
/// clamped away from the log singularities.
pub fn bce_loss(tape: &mut Tape, y: NodeId, label: bool) -> Result<NodeId> {
    let p = if label {
        tape.clamp(y, BCE_CLAMP, 1.0 - BCE_CLAMP)
    } else {
        let neg = tape.scale(y, -1.0);
        let one_minus = tape.add_const(neg, 1.0);
        tape.clamp(one_minus, BCE_CLAMP, 1.0 - BCE_CLAMP)
    };
    let ln = tape.ln(p);
    Ok(tape.scale(ln, -1.0))
}

/// Column of per-pair losses for a probability column and aligned labels.
pub fn bce_loss_column(tape: &mut Tape, y: NodeId, labels: &[f64]) -> Result<NodeId> {
    let m = tape.value(y).rows();
    if m != labels.len() || tape.value(y).cols() != 1 {
        return Err(Error::ShapeMismatch {
            op: "bce_loss_column",
            lhs: tape.value(y).shape_str(),
            rhs: format!("{} labels", labels.len()),
        });
    }
    let lab = tape.leaf(Tensor::new(m, 1, labels.to_vec()));
    let inv_lab_neg = tape.scale(lab, -1.0);
    let inv_lab = tape.add_const(inv_lab_neg, 1.0);

    let y_pos = tape.clamp(y, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let ln_pos = tape.ln(y_pos);
    let y_neg0 = tape.scale(y, -1.0);
    let y_neg1 = tape.add_const(y_neg0, 1.0);
    let y_neg = tape.clamp(y_neg1, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let ln_neg = tape.ln(y_neg);

    let pos_term = tape.mul(ln_pos, lab)?;
    let neg_term = tape.mul(ln_neg, inv_lab)?;
    let sum = tape.add(pos_term, neg_term)?;
    Ok(tape.scale(sum, -1.0))
}

// ── Adam ─────────────────────────────────────────────────────────────

/// First/second moment buffers aligned with the store's parameters.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamState { m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every trainable parameter.
/// Gradient buffers are zeroed afterward. A non-finite gradient skips the
/// whole step (the incident is logged to stderr) and still zeroes the
/// buffers so one bad batch cannot poison the next.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> bool {
    let finite = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .all(|(_, p)| p.grad.iter().all(|g| g.is_finite()));
    if !finite {
        eprintln!("adam_step: non-finite gradient, step {} skipped", state.t + 1);
        store.zero_grads();
        return false;
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let grad = store.get(id).grad.clone();
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let value = store.value_mut(id);
        for (j, g) in grad.iter().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            value.data_mut()[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
    true
}

// ── Early stopping ───────────────────────────────────────────────────

/// Index of the evaluation that exhausts patience (no strict improvement
/// over the best for `patience` consecutive evaluations), or None.
pub fn early_stop_index(history: &[f64], patience: usize) -> Option<usize> {
    if patience == 0 {
        return None;
    }
    let mut best = f64::NEG_INFINITY;
    let mut since = 0usize;
    for (i, &x) in history.iter().enumerate() {
        if x > best {
            best = x;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                return Some(i);
            }
        }
    }
    None
}

// ── Training loop ────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub dev_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev: f64,
}

type PairPlan = Vec<(usize, Vec<usize>, Vec<f64>)>; // slot, value indices, labels

/// Positive pairs of a turn plus sampled negatives (or the full ontology
/// when `negative_ratio` is 0). Labels align with the value lists.
fn plan_turn_pairs(
    model: &DstModel,
    turn: &crate::data::DialogueTurn,
    negative_ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairPlan> {
    let onto = &model.ontology;
    let mut positives: HashSet<(usize, usize)> = HashSet::new();
    for (slot, value) in &turn.label.inform {
        let k = onto.slot_index(slot)?;
        let v = onto.value_index(k, value)?;
        positives.insert((k, v));
    }
    if let Some(rk) = onto.request_slot_index() {
        for r in &turn.label.request {
            let v = onto.value_index(rk, r)?;
            positives.insert((rk, v));
        }
    }

    let mut plan: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
    if negative_ratio == 0 {
        for (k, slot) in onto.slots.iter().enumerate() {
            let vals: Vec<usize> = (0..slot.values.len()).collect();
            let labels = vals
                .iter()
                .map(|&v| if positives.contains(&(k, v)) { 1.0 } else { 0.0 })
                .collect();
            plan.push((k, vals, labels));
        }
        return Ok(plan);
    }

    let mut all_pairs: Vec<(usize, usize)> = Vec::new();
    for (k, slot) in onto.slots.iter().enumerate() {
        for v in 0..slot.values.len() {
            if !positives.contains(&(k, v)) {
                all_pairs.push((k, v));
            }
        }
    }
    let n_neg = (negative_ratio * positives.len().max(1)).min(all_pairs.len());
    let negatives: Vec<(usize, usize)> = all_pairs
        .choose_multiple(rng, n_neg)
        .cloned()
        .collect();

    let mut by_slot: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); onto.slot_count()];
    for &(k, v) in &positives {
        by_slot[k].0.push(v);
        by_slot[k].1.push(1.0);
    }
    for &(k, v) in &negatives {
        by_slot[k].0.push(v);
        by_slot[k].1.push(0.0);
    }
    for (k, (vals, labels)) in by_slot.into_iter().enumerate() {
        if !vals.is_empty() {
            plan.push((k, vals, labels));
        }
    }
    Ok(plan)
}

/// One pass over the corpus in shuffled mini-batches of turns; one Adam
/// step per batch on the mean per-pair loss. Returns that mean over the
/// epoch.
pub fn train_epoch(
    model: &mut DstModel,
    dialogues: &[Dialogue],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if dialogues.is_empty() {
        return Err(Error::EmptySequence { what: "corpus" });
    }
    let mut turn_refs: Vec<(usize, usize)> = Vec::new();
    for (di, d) in dialogues.iter().enumerate() {
        for ti in 0..d.turns.len() {
            turn_refs.push((di, ti));
        }
    }
    turn_refs.shuffle(rng);

    let mut total_loss = 0.0;
    let mut total_pairs = 0usize;
    for batch in turn_refs.chunks(cfg.batch_size) {
        // plan every turn first so the loss can be a true mean over pairs
        let mut plans: Vec<(&crate::data::DialogueTurn, PairPlan)> = Vec::new();
        let mut batch_pairs = 0usize;
        for &(di, ti) in batch {
            let turn = &dialogues[di].turns[ti];
            let plan = plan_turn_pairs(model, turn, cfg.negative_ratio, rng)?;
            batch_pairs += plan.iter().map(|(_, v, _)| v.len()).sum::<usize>();
            plans.push((turn, plan));
        }
        if batch_pairs == 0 {
            continue;
        }
        let scale = 1.0 / batch_pairs as f64;
        for (turn, plan) in plans {
            if plan.is_empty() {
                continue;
            }
            let prepared = model.prepare_turn(turn)?;
            let slot_plan: Vec<(usize, Vec<usize>)> =
                plan.iter().map(|(k, v, _)| (*k, v.clone())).collect();
            let mut tape = Tape::new();
            let fwd = model.forward_batch(&mut tape, &[prepared], Some(&slot_plan), cfg.batch_slots)?;
            let mut slot_losses = Vec::with_capacity(fwd.slots.len());
            for (sf, (_, planned_vals, labels)) in fwd.slots.iter().zip(&plan) {
                // forward may reorder candidates by token length; realign
                let aligned: Vec<f64> = sf
                    .value_indices
                    .iter()
                    .map(|v| {
                        let pos = planned_vals.iter().position(|pv| pv == v).unwrap();
                        labels[pos]
                    })
                    .collect();
                let losses = bce_loss_column(&mut tape, sf.y, &aligned)?;
                slot_losses.push(tape.sum_all(losses));
            }
            let turn_sum = if slot_losses.len() == 1 {
                slot_losses[0]
            } else {
                let stacked = tape.concat_rows(&slot_losses)?;
                tape.sum_all(stacked)
            };
            total_loss += tape.value(turn_sum).item();
            let scaled = tape.scale(turn_sum, scale);
            tape.backward(scaled, &mut model.store)?;
        }
        total_pairs += batch_pairs;
        adam_step(&mut model.store, adam, &cfg.adam);
    }
    Ok(total_loss / total_pairs.max(1) as f64)
}

/// Split dialogues into train/dev by a seeded shuffle; `dev_frac` of the
/// dialogues (at least one, unless there is only one) go to dev.
pub fn seeded_split(
    dialogues: &[Dialogue],
    dev_frac: f64,
    seed: u64,
) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut idx: Vec<usize> = (0..dialogues.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_dev = ((dialogues.len() as f64 * dev_frac).round() as usize)
        .clamp(usize::from(dialogues.len() > 1), dialogues.len().saturating_sub(1));
    let dev: Vec<Dialogue> = idx[..n_dev].iter().map(|&i| dialogues[i].clone()).collect();
    let train: Vec<Dialogue> = idx[n_dev..].iter().map(|&i| dialogues[i].clone()).collect();
    (train, dev)
}

/// Full training run: epochs of `train_epoch`, a dev evaluation per epoch
/// when a dev set is given, early stopping on dev joint goal, and
/// restoration of the best parameters before returning.
pub fn train(
    model: &mut DstModel,
    train_set: &[Dialogue],
    dev_set: Option<&[Dialogue]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut adam = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::new();
    let mut dev_history = Vec::new();
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = model.store.snapshot();

    let mut epochs_run = 0usize;
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(model, train_set, cfg, &mut adam, &mut rng)?;
        epoch_losses.push(loss);
        epochs_run = epoch + 1;
        if let Some(dev) = dev_set {
            let ontology = model.ontology.clone();
            let metrics =
                tracker::evaluate(model, dev, &ontology, cfg.threshold, cfg.batch_slots)?;
            dev_history.push(metrics.joint_goal);
            if metrics.joint_goal > best_dev {
                best_dev = metrics.joint_goal;
                best_epoch = epoch;
                best_snapshot = model.store.snapshot();
            }
            if early_stop_index(&dev_history, cfg.patience) == Some(dev_history.len() - 1) {
                break;
            }
        }
    }
    if dev_set.is_some() {
        model.store.restore(&best_snapshot);
    } else {
        best_epoch = epochs_run.saturating_sub(1);
        best_dev = f64::NAN;
    }
    Ok(TrainOutcome {
        epochs_run,
        epoch_losses,
        dev_history,
        best_epoch,
        best_dev,
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────

/// Hex SHA-256 of a value's canonical JSON, used to tie checkpoints and
/// reports to the exact configuration that produced them.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Self-contained model snapshot: configuration, vocabulary, ontology,
/// and every parameter array. Reloading reproduces forward outputs
/// bitwise (JSON floats round-trip exactly).
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub ontology: Ontology,
    pub epoch: usize,
    pub dev_metric: f64,
    pub params: Vec<SavedParam>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &DstModel, epoch: usize, dev_metric: f64, hash: String) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash,
            model: model.cfg.clone(),
            vocab: model.vocab.clone(),
            ontology: model.ontology.clone(),
            epoch,
            dev_metric,
            params: model.store.export_values(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::data(format!("cannot read `{}`: {e}", path.display())))?;
        let mut ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.vocab.rebuild_index();
        Ok(ckpt)
    }

    /// Rebuild the model and overwrite every parameter with the saved
    /// values.
    pub fn restore_model(&self) -> Result<DstModel> {
        let mut model = DstModel::new(
            self.model.clone(),
            self.ontology.clone(),
            self.vocab.clone(),
            None,
        )?;
        model.store.import_values(&self.params)?;
        Ok(model)
    }
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, gen_synthetic, SyntheticSpec};
    use crate::encoders::Variant;

    #[test]
    fn bce_trivial_points_and_limit() {
        let mut tape = Tape::new();
        let half = tape.leaf(Tensor::scalar(0.5));
        let l = bce_loss(&mut tape, half, true).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // loss -> 0 as p -> 1 for a positive label
        let mut prev = f64::INFINITY;
        for p in [0.9, 0.99, 0.999, 0.9999] {
            let node = tape.leaf(Tensor::scalar(p));
            let l = bce_loss(&mut tape, node, true).unwrap();
            let v = tape.value(l).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn bce_gradient_matches_closed_form() {
        // dL/dy at (0.8, label 1) = -1/0.8
        let mut store = ParamStore::new();
        let y = store.add("y", Tensor::scalar(0.8), true);
        let mut tape = Tape::new();
        let leaf = tape.param(&store, y);
        let l = bce_loss(&mut tape, leaf, true).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert!((store.grad(y)[0] - (-1.25)).abs() < 1e-12);

        let report = crate::autodiff::grad_check(
            &mut store,
            |s| {
                let mut t = Tape::new();
                let leaf = t.param(s, y);
                let l = bce_loss(&mut t, leaf, true)?;
                Ok(t.value(l).item())
            },
            1e-6,
            1e-7,
            1e-9,
        );
        assert!(report.pass);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_rows(&[vec![1.0, -2.0]]), true);
        let before = store.value(p).data().to_vec();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default());
        assert_eq!(store.value(p).data(), &before[..]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(0.0), true);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::default();
        store.grad_mut(p)[0] = 0.37; // any constant gradient
        adam_step(&mut store, &mut state, &cfg);
        // bias-corrected first step is lr * g/(|g| + eps') ~= lr
        let step = store.value(p).item().abs();
        assert!((step - cfg.lr).abs() < 1e-6, "step {step}");
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(1.0), true);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        for _ in 0..500 {
            let x = store.value(p).item();
            store.grad_mut(p)[0] = 2.0 * x;
            adam_step(&mut store, &mut state, &cfg);
        }
        assert!(store.value(p).item().abs() < 1e-3);
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0), true);
        let mut state = AdamState::new(&store);
        store.grad_mut(p)[0] = f64::NAN;
        let stepped = adam_step(&mut store, &mut state, &AdamConfig::default());
        assert!(!stepped);
        assert_eq!(store.value(p).item(), 1.0);
        assert_eq!(store.grad(p)[0], 0.0); // buffers cleared
        assert_eq!(state.steps(), 0);
    }

    #[test]
    fn early_stop_cases() {
        assert_eq!(early_stop_index(&[0.1, 0.2, 0.3, 0.4], 3), None);
        assert_eq!(early_stop_index(&[0.5, 0.5, 0.5, 0.5], 3), Some(3));
        // noisy trace: best at index 2, patience 2 exhausts at index 4
        assert_eq!(early_stop_index(&[0.3, 0.2, 0.6, 0.5, 0.55], 2), Some(4));
        // improvement resets the counter
        assert_eq!(early_stop_index(&[0.3, 0.2, 0.6, 0.5, 0.7, 0.1], 2), None);
    }

    fn small_setup(seed: u64) -> (DstModel, Vec<Dialogue>) {
        let spec = SyntheticSpec {
            slots: 2,
            values_per_slot: 3,
            dialogues: 3,
            turns_per_dialogue: 2,
            vocab_size: 8,
            seed: 5,
        };
        let (dialogues, onto) = gen_synthetic(&spec);
        let vocab = build_vocab(&dialogues, &onto);
        let cfg = ModelConfig {
            variant: Variant::Gce,
            d_emb: 6,
            d_rnn: 6,
            train_word_embeddings: false,
            seed,
        };
        (DstModel::new(cfg, onto, vocab, None).unwrap(), dialogues)
    }

    #[test]
    fn zero_learning_rate_keeps_params_bitwise() {
        let (mut model, dialogues) = small_setup(3);
        let before: Vec<Vec<u64>> = model
            .store
            .iter()
            .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        train_epoch(&mut model, &dialogues, &cfg, &mut adam, &mut rng).unwrap();
        let after: Vec<Vec<u64>> = model
            .store
            .iter()
            .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_gives_identical_loss_trajectory() {
        let run = || {
            let (mut model, dialogues) = small_setup(3);
            let cfg = TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            };
            let outcome = train(&mut model, &dialogues, None, &cfg).unwrap();
            outcome
                .epoch_losses
                .iter()
                .map(|l| l.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_turn_corpus_overfits() {
        let (mut model, dialogues) = small_setup(7);
        let one = vec![Dialogue {
            id: "only".into(),
            turns: vec![dialogues[0].turns[0].clone()],
        }];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            negative_ratio: 0, // full ontology: deterministic target
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &one, None, &cfg).unwrap();
        let last = *outcome.epoch_losses.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
        assert!(last < outcome.epoch_losses[0]);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs_bitwise() {
        let (mut model, dialogues) = small_setup(9);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &dialogues, None, &cfg).unwrap();
        let onto = model.ontology.clone();
        let before =
            tracker::evaluate(&model, &dialogues, &onto, 0.5, true).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ckpt = Checkpoint::from_model(&model, 2, 0.5, config_hash(&cfg));
        ckpt.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().restore_model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(restored.store.iter()) {
            let ba: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "param {}", a.name);
        }
        let after = tracker::evaluate(&restored, &dialogues, &onto, 0.5, true).unwrap();
        assert_eq!(before.joint_goal.to_bits(), after.joint_goal.to_bits());
        assert_eq!(before.turn_request.to_bits(), after.turn_request.to_bits());
        assert_eq!(before.turn_inform.to_bits(), after.turn_inform.to_bits());
    }

    #[test]
    fn seeded_split_is_deterministic_and_sized() {
        let (_, dialogues) = small_setup(3);
        let (tr1, dv1) = seeded_split(&dialogues, 0.34, 11);
        let (tr2, dv2) = seeded_split(&dialogues, 0.34, 11);
        assert_eq!(dv1, dv2);
        assert_eq!(tr1, tr2);
        assert_eq!(dv1.len(), 1);
        assert_eq!(tr1.len() + dv1.len(), dialogues.len());
    }
}
