//! Turn-level prediction, belief-state accumulation across turns, and the
//! three tracking metrics: joint goal, turn request, and turn inform.
//!
//! Joint goal accumulates turn goals: later informed values overwrite
//! earlier ones for the same slot, and a turn counts as correct when the
//! accumulated predicted state equals the accumulated gold state exactly.
//! Requested slots are per-turn sets and never accumulate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dialogue, DialogueTurn, Ontology};
use crate::error::{Error, Result};
use crate::model::DstModel;
use crate::scorer::select_values;

// ── Types ────────────────────────────────────────────────────────────

/// What one turn asserts: at most one value per informable slot, plus the
/// requested-slot set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub inform: Vec<(String, String)>,
    pub request: Vec<String>,
}

impl TurnPrediction {
    fn inform_map(&self) -> BTreeMap<&str, &str> {
        self.inform
            .iter()
            .map(|(s, v)| (s.as_str(), v.as_str()))
            .collect()
    }

    fn request_set(&self) -> std::collections::BTreeSet<&str> {
        self.request.iter().map(String::as_str).collect()
    }
}

/// Accumulated slot -> value assignments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefState {
    pub slots: BTreeMap<String, String>,
}

/// New state: the prediction's informed pairs overwrite same-slot entries.
pub fn accumulate(state: &BeliefState, pred: &TurnPrediction) -> BeliefState {
    let mut next = state.clone();
    for (slot, value) in &pred.inform {
        next.slots.insert(slot.clone(), value.clone());
    }
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub joint_goal: f64,
    pub turn_request: f64,
    pub turn_inform: f64,
    pub turns: usize,
    pub dialogues: usize,
}

impl MetricsReport {
    /// Flat key=value block, one line per field.
    pub fn to_text(&self) -> String {
        format!(
            "joint_goal={}\nturn_request={}\nturn_inform={}\nturns={}\ndialogues={}\n",
            self.joint_goal, self.turn_request, self.turn_inform, self.turns, self.dialogues
        )
    }
}

// ── Prediction ───────────────────────────────────────────────────────

/// Score every (slot, value) pair of the ontology and apply the decision
/// policy: informable slots keep the argmax above the threshold, the
/// request slot keeps everything above it.
pub fn predict_turn(
    model: &DstModel,
    turn: &DialogueTurn,
    ontology: &Ontology,
    threshold: f64,
    batch_slots: bool,
) -> Result<TurnPrediction> {
    if ontology.slot_names() != model.ontology.slot_names() {
        return Err(Error::data(
            "ontology does not match the one the model was built against",
        ));
    }
    let scored = model.score_turn(turn, batch_slots)?;
    let mut pred = TurnPrediction::default();
    for (slot_idx, entries) in scored {
        let ys: Vec<(usize, f64)> = entries.iter().map(|(v, _, _, y)| (*v, *y)).collect();
        let is_request = ontology.is_request_slot(slot_idx);
        let picked = select_values(&ys, threshold, is_request);
        let slot = &ontology.slots[slot_idx];
        for v in picked {
            if is_request {
                pred.request.push(slot.values[v].clone());
            } else {
                pred.inform.push((slot.name.clone(), slot.values[v].clone()));
            }
        }
    }
    pred.request.sort();
    Ok(pred)
}

// ── Metrics ──────────────────────────────────────────────────────────

fn gold_prediction(turn: &DialogueTurn) -> TurnPrediction {
    TurnPrediction {
        inform: turn.label.inform.clone(),
        request: turn.label.request.clone(),
    }
}

/// Metrics from per-turn predictions aligned with the dialogues. Both the
/// predicted and the gold belief states are built with the same
/// `accumulate`, so one accumulation semantics covers both sides.
pub fn metrics_from_predictions(
    dialogues: &[Dialogue],
    predictions: &[Vec<TurnPrediction>],
) -> Result<MetricsReport> {
    if dialogues.is_empty() {
        return Err(Error::EmptySequence { what: "dialogues" });
    }
    if dialogues.len() != predictions.len() {
        return Err(Error::data("one prediction list per dialogue required"));
    }
    let mut turns = 0usize;
    let mut joint_hits = 0usize;
    let mut request_hits = 0usize;
    let mut inform_hits = 0usize;
    for (d, preds) in dialogues.iter().zip(predictions) {
        if d.turns.len() != preds.len() {
            return Err(Error::data(format!(
                "dialogue {} has {} turns but {} predictions",
                d.id,
                d.turns.len(),
                preds.len()
            )));
        }
        let mut pred_state = BeliefState::default();
        let mut gold_state = BeliefState::default();
        for (turn, pred) in d.turns.iter().zip(preds) {
            let gold = gold_prediction(turn);
            pred_state = accumulate(&pred_state, pred);
            gold_state = accumulate(&gold_state, &gold);
            turns += 1;
            if pred_state == gold_state {
                joint_hits += 1;
            }
            if pred.request_set() == gold.request_set() {
                request_hits += 1;
            }
            if pred.inform_map() == gold.inform_map() {
                inform_hits += 1;
            }
        }
    }
    Ok(MetricsReport {
        joint_goal: joint_hits as f64 / turns as f64,
        turn_request: request_hits as f64 / turns as f64,
        turn_inform: inform_hits as f64 / turns as f64,
        turns,
        dialogues: dialogues.len(),
    })
}

/// Run the model over every turn and compute the three metrics.
pub fn evaluate(
    model: &DstModel,
    dialogues: &[Dialogue],
    ontology: &Ontology,
    threshold: f64,
    batch_slots: bool,
) -> Result<MetricsReport> {
    if dialogues.is_empty() {
        return Err(Error::EmptySequence { what: "dialogues" });
    }
    let mut predictions = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let mut per_turn = Vec::with_capacity(d.turns.len());
        for turn in &d.turns {
            per_turn.push(predict_turn(model, turn, ontology, threshold, batch_slots)?);
        }
        predictions.push(per_turn);
    }
    metrics_from_predictions(dialogues, &predictions)
}

// ── Tests ────────────────────────────────────────────────────────────
