//! Corpus ingestion and preparation: tokenization, vocabulary and ontology
//! construction, WoZ / Multi-WoZ loaders, embedding files, and a seeded
//! synthetic corpus generator for desk-scale runs.
//!
//! Corpus files are JSON arrays of dialogue records; see `docs/formats.md`
//! for the field-by-field description and a complete example.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

// ── Tokenization ─────────────────────────────────────────────────────

const PUNCT: &[char] = &[
    '.', ',', '!', '?', ';', ':', '"', '\'', '(', ')', '[', ']', '{', '}',
];

/// Lowercase, split punctuation into standalone tokens, then split on
/// whitespace. Deterministic; for pre-spaced lowercase text the token
/// list joined with single spaces reproduces the input.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if PUNCT.contains(&ch) {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

// ── Vocabulary ───────────────────────────────────────────────────────

pub const OOV_TOKEN: &str = "<unk>";

/// Token-to-id mapping with dense ids from 0. Unknown tokens resolve to
/// the OOV id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    oov_id: usize,
}

impl Vocab {
    /// Build from token occurrences in first-seen order. The OOV token is
    /// always present at id 0.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab {
            tokens: vec![OOV_TOKEN.to_string()],
            index: HashMap::from([(OOV_TOKEN.to_string(), 0)]),
            oov_id: 0,
        };
        for t in tokens {
            v.intern(t);
        }
        v
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Rebuild the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn oov_id(&self) -> usize {
        self.oov_id
    }

    pub fn id_of(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&self.oov_id)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

// ── Ontology ─────────────────────────────────────────────────────────

/// One slot with its ordered candidate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDef {
    pub name: String,
    pub values: Vec<String>,
}

/// The full enumeration of slots and candidate values. The slot named by
/// `request_slot` (if present) holds requestable slot names as its values
/// and is evaluated as a set per turn; all other slots are informable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub slots: Vec<SlotDef>,
    #[serde(default)]
    pub request_slot: Option<String>,
}

impl Ontology {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for s in &self.slots {
            if !names.insert(&s.name) {
                return Err(Error::data(format!("duplicate slot name `{}`", s.name)));
            }
            if s.values.is_empty() {
                return Err(Error::data(format!("slot `{}` has no values", s.name)));
            }
            let mut vals = HashSet::new();
            for v in &s.values {
                if !vals.insert(v) {
                    return Err(Error::data(format!(
                        "slot `{}` has duplicate value `{v}`",
                        s.name
                    )));
                }
            }
        }
        if let Some(rs) = &self.request_slot {
            if !self.slots.iter().any(|s| &s.name == rs) {
                return Err(Error::data(format!(
                    "request slot `{rs}` not present in slot list"
                )));
            }
        }
        Ok(())
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_index(&self, name: &str) -> Result<usize> {
        self.slots
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSlot(name.into()))
    }

    pub fn value_index(&self, slot_idx: usize, value: &str) -> Result<usize> {
        let slot = &self.slots[slot_idx];
        slot.values
            .iter()
            .position(|v| v == value)
            .ok_or_else(|| Error::UnknownValue {
                slot: slot.name.clone(),
                value: value.into(),
            })
    }

    pub fn request_slot_index(&self) -> Option<usize> {
        self.request_slot
            .as_ref()
            .and_then(|rs| self.slots.iter().position(|s| &s.name == rs))
    }

    pub fn is_request_slot(&self, idx: usize) -> bool {
        self.request_slot_index() == Some(idx)
    }

    pub fn slot_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }
}

// ── Dialogues ────────────────────────────────────────────────────────

/// Gold annotation of one turn: informable pairs plus requested slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnLabel {
    pub inform: Vec<(String, String)>,
    pub request: Vec<String>,
}

/// One user turn with the system actions that preceded it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub transcript: String,
    pub tokens: Vec<String>,
    /// Each prior system action is its own token sequence.
    pub system_acts: Vec<Vec<String>>,
    pub label: TurnLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<DialogueTurn>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub dialogues: usize,
    pub turns: usize,
    pub tokens: usize,
}

// ── Raw JSON corpus schema ───────────────────────────────────────────

#[derive(Debug, Deserialize, Serialize)]
struct RawDialogue {
    dialogue_idx: serde_json::Value,
    dialogue: Vec<RawTurn>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawTurn {
    #[serde(default)]
    turn_idx: Option<usize>,
    transcript: String,
    #[serde(default)]
    system_acts: Vec<RawAct>,
    turn_label: Vec<(String, String)>,
}

/// A system act is either a bare string ("request food") or a token list.
#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawAct {
    Text(String),
    Tokens(Vec<String>),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::data(format!("cannot read `{}`: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_ontology(path: &Path) -> Result<Ontology> {
    let onto: Ontology = read_json(path)?;
    onto.validate()?;
    Ok(onto)
}

fn convert_dialogues(
    raw: Vec<RawDialogue>,
    ontology: &Ontology,
    map_slot: &dyn Fn(&str) -> String,
) -> Result<(Vec<Dialogue>, LoadStats)> {
    let mut out = Vec::with_capacity(raw.len());
    let mut stats = LoadStats::default();
    for (rec, rd) in raw.into_iter().enumerate() {
        if rd.dialogue.is_empty() {
            return Err(Error::Record {
                record: rec,
                msg: "dialogue has no turns".into(),
            });
        }
        let mut turns = Vec::with_capacity(rd.dialogue.len());
        for rt in rd.dialogue {
            let tokens = tokenize(&rt.transcript);
            if tokens.is_empty() {
                return Err(Error::Record {
                    record: rec,
                    msg: "empty utterance after tokenization".into(),
                });
            }
            stats.tokens += tokens.len();
            let mut system_acts = Vec::new();
            for act in rt.system_acts {
                let act_tokens = match act {
                    RawAct::Text(s) => tokenize(&s),
                    RawAct::Tokens(ts) => ts
                        .iter()
                        .flat_map(|t| tokenize(t))
                        .collect(),
                };
                if act_tokens.is_empty() {
                    return Err(Error::Record {
                        record: rec,
                        msg: "empty system action".into(),
                    });
                }
                stats.tokens += act_tokens.len();
                system_acts.push(act_tokens);
            }
            let mut label = TurnLabel::default();
            for (slot, value) in rt.turn_label {
                let slot = map_slot(&slot);
                let sidx = ontology.slot_index(&slot).map_err(|e| Error::Record {
                    record: rec,
                    msg: e.to_string(),
                })?;
                ontology
                    .value_index(sidx, &value)
                    .map_err(|e| Error::Record {
                        record: rec,
                        msg: e.to_string(),
                    })?;
                if ontology.is_request_slot(sidx) {
                    label.request.push(value);
                } else {
                    label.inform.push((slot, value));
                }
            }
            turns.push(DialogueTurn {
                transcript: rt.transcript,
                tokens,
                system_acts,
                label,
            });
        }
        stats.turns += turns.len();
        out.push(Dialogue {
            id: rd.dialogue_idx.to_string(),
            turns,
        });
    }
    stats.dialogues = out.len();
    Ok((out, stats))
}

/// Load a WoZ-format corpus plus its ontology. Every turn is validated:
/// non-empty utterance, non-empty action sequences, ontology-valid labels
/// (a violation is a hard error carrying the record index).
pub fn load_woz(data: &Path, ontology: &Path) -> Result<(Vec<Dialogue>, Ontology, LoadStats)> {
    let onto = load_ontology(ontology)?;
    let raw: Vec<RawDialogue> = read_json(data)?;
    let (dialogues, stats) = convert_dialogues(raw, &onto, &|s| s.to_string())?;
    Ok((dialogues, onto, stats))
}

/// Strip the `domain-` prefix from a Multi-WoZ slot name.
fn strip_domain(slot: &str) -> String {
    match slot.split_once('-') {
        Some((_, rest)) if !rest.is_empty() => rest.to_string(),
        _ => slot.to_string(),
    }
}

/// Merge a domain-qualified ontology into domain-free slots: identically
/// named slots from different domains become one slot whose value list is
/// the union in first-occurrence order.
pub fn merge_multiwoz_ontology(raw: &Ontology) -> Ontology {
    let mut order: Vec<String> = Vec::new();
    let mut merged: HashMap<String, Vec<String>> = HashMap::new();
    for slot in &raw.slots {
        let name = strip_domain(&slot.name);
        let entry = merged.entry(name.clone()).or_insert_with(|| {
            order.push(name.clone());
            Vec::new()
        });
        for v in &slot.values {
            if !entry.contains(v) {
                entry.push(v.clone());
            }
        }
    }
    let slots = order
        .into_iter()
        .map(|name| {
            let values = merged.remove(&name).unwrap();
            SlotDef { name, values }
        })
        .collect();
    Ontology {
        slots,
        request_slot: raw.request_slot.as_deref().map(strip_domain),
    }
}

/// Load a Multi-WoZ-format corpus: domain prefixes are dropped from slot
/// names in both the ontology and the labels, and identically named slots
/// are merged.
pub fn load_multiwoz(data: &Path, ontology: &Path) -> Result<(Vec<Dialogue>, Ontology, LoadStats)> {
    let raw_onto: Ontology = read_json(ontology)?;
    let onto = merge_multiwoz_ontology(&raw_onto);
    onto.validate()?;
    let raw: Vec<RawDialogue> = read_json(data)?;
    let (dialogues, stats) = convert_dialogues(raw, &onto, &strip_domain)?;
    Ok((dialogues, onto, stats))
}

/// Serialize dialogues back to the corpus JSON format.
pub fn save_corpus(path: &Path, dialogues: &[Dialogue], ontology: &Ontology) -> Result<()> {
    let raw: Vec<RawDialogue> = dialogues
        .iter()
        .map(|d| RawDialogue {
            dialogue_idx: serde_json::Value::String(d.id.clone()),
            dialogue: d
                .turns
                .iter()
                .enumerate()
                .map(|(i, t)| RawTurn {
                    turn_idx: Some(i),
                    transcript: t.transcript.clone(),
                    system_acts: t
                        .system_acts
                        .iter()
                        .map(|a| RawAct::Tokens(a.clone()))
                        .collect(),
                    turn_label: t
                        .label
                        .inform
                        .iter()
                        .cloned()
                        .chain(t.label.request.iter().map(|r| {
                            let rs = ontology
                                .request_slot
                                .clone()
                                .unwrap_or_else(|| "request".into());
                            (rs, r.clone())
                        }))
                        .collect(),
                })
                .collect(),
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&raw)?)?;
    Ok(())
}

pub fn save_ontology(path: &Path, ontology: &Ontology) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(ontology)?)?;
    Ok(())
}

/// Collect the vocabulary of a corpus plus all ontology value and slot-name
/// tokens, in first-seen order.
pub fn build_vocab(dialogues: &[Dialogue], ontology: &Ontology) -> Vocab {
    let mut all: Vec<&str> = Vec::new();
    for d in dialogues {
        for t in &d.turns {
            all.extend(t.tokens.iter().map(String::as_str));
            for act in &t.system_acts {
                all.extend(act.iter().map(String::as_str));
            }
        }
    }
    let mut owned_value_tokens: Vec<String> = Vec::new();
    for slot in &ontology.slots {
        owned_value_tokens.extend(tokenize(&slot.name));
        for v in &slot.values {
            owned_value_tokens.extend(tokenize(v));
        }
    }
    all.extend(owned_value_tokens.iter().map(String::as_str));
    Vocab::build(all)
}

// ── Embedding files ──────────────────────────────────────────────────

/// Parse a plain-text embedding file: one token per line followed by its
/// vector; an optional leading `<count> <dim>` header is auto-detected.
/// Returns one row per vocab token: file rows where found, seeded random
/// rows otherwise, and the mean of the loaded rows at the OOV position.
pub fn load_embedding_matrix(
    path: &Path,
    vocab: &Vocab,
    seed: u64,
) -> Result<(Tensor, usize)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read `{}`: {e}", path.display())))?;
    let mut dim: Option<usize> = None;
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let vals: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "bad float `{f}` on line {} of {}",
                        lineno + 1,
                        path.display()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        // header line: "<count> <dim>" (token parses as an integer, one field)
        if lineno == 0 && vals.len() == 1 && token.parse::<usize>().is_ok() && vals[0].fract() == 0.0
        {
            continue;
        }
        if vals.is_empty() {
            return Err(Error::data(format!(
                "no vector on line {} of {}",
                lineno + 1,
                path.display()
            )));
        }
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(Error::data(format!(
                    "inconsistent embedding dim on line {}: {} vs {}",
                    lineno + 1,
                    vals.len(),
                    d
                )));
            }
            _ => {}
        }
        if vocab.contains(token) {
            found.insert(vocab.id_of(token), vals);
        }
    }
    let dim = dim.ok_or_else(|| Error::data("embedding file has no vector lines"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut data = vec![0.0; vocab.len() * dim];
    let mut mean = vec![0.0; dim];
    for row in found.values() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    if !found.is_empty() {
        for m in &mut mean {
            *m /= found.len() as f64;
        }
    }
    for id in 0..vocab.len() {
        let dst = &mut data[id * dim..(id + 1) * dim];
        if id == vocab.oov_id() {
            if found.is_empty() {
                for v in dst.iter_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
            } else {
                dst.copy_from_slice(&mean);
            }
        } else if let Some(row) = found.get(&id) {
            dst.copy_from_slice(row);
        } else {
            for v in dst.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
    }
    Ok((Tensor::new(vocab.len(), dim, data), found.len()))
}

// ── Synthetic corpus ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub slots: usize,
    pub values_per_slot: usize,
    pub dialogues: usize,
    pub turns_per_dialogue: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            slots: 3,
            values_per_slot: 5,
            dialogues: 20,
            turns_per_dialogue: 4,
            vocab_size: 30,
            seed: 7,
        }
    }
}

/// Deterministic synthetic corpus whose labels are lexically grounded:
/// every informed pair's value token appears in the turn's utterance, and
/// a requested slot appears as its slot-name token after a marker word.
/// That makes the tracking task learnable at desk scale.
pub fn gen_synthetic(spec: &SyntheticSpec) -> (Vec<Dialogue>, Ontology) {
    assert!(
        spec.slots > 0
            && spec.values_per_slot > 0
            && spec.dialogues > 0
            && spec.turns_per_dialogue > 0
            && spec.vocab_size > 0,
        "synthetic spec counts must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slot_names: Vec<String> = (0..spec.slots).map(|k| format!("s{k}")).collect();
    let mut slots: Vec<SlotDef> = slot_names
        .iter()
        .map(|name| SlotDef {
            name: name.clone(),
            values: (0..spec.values_per_slot)
                .map(|v| format!("{name}v{v}"))
                .collect(),
        })
        .collect();
    slots.push(SlotDef {
        name: "request".into(),
        values: slot_names.clone(),
    });
    let ontology = Ontology {
        slots,
        request_slot: Some("request".into()),
    };

    let fillers: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let mut dialogues = Vec::with_capacity(spec.dialogues);
    for d in 0..spec.dialogues {
        let mut turns = Vec::with_capacity(spec.turns_per_dialogue);
        for _ in 0..spec.turns_per_dialogue {
            let mut label = TurnLabel::default();
            let mut tokens: Vec<String> = Vec::new();
            tokens.push(fillers[rng.gen_range(0..fillers.len())].clone());

            // 1..=2 informed pairs on most turns, sometimes none
            let n_inform = match rng.gen_range(0..10) {
                0 => 0,
                1..=6 => 1,
                _ => 2.min(spec.slots),
            };
            let mut chosen: Vec<usize> = (0..spec.slots).collect();
            for _ in 0..n_inform {
                let pick = rng.gen_range(0..chosen.len());
                let k = chosen.swap_remove(pick);
                let v = rng.gen_range(0..spec.values_per_slot);
                let value = format!("s{k}v{v}");
                tokens.push(value.clone());
                tokens.push(fillers[rng.gen_range(0..fillers.len())].clone());
                label.inform.push((format!("s{k}"), value));
            }
            // one requested slot on roughly a third of turns
            if rng.gen_range(0..3) == 0 {
                let k = rng.gen_range(0..spec.slots);
                tokens.push("give".into());
                tokens.push(slot_names[k].clone());
                label.request.push(slot_names[k].clone());
            }
            tokens.push(fillers[rng.gen_range(0..fillers.len())].clone());

            // previous system action: sometimes a request act, else none
            let system_acts = if rng.gen_bool(0.5) {
                vec![vec![
                    "request".to_string(),
                    slot_names[rng.gen_range(0..spec.slots)].clone(),
                ]]
            } else {
                Vec::new()
            };

            turns.push(DialogueTurn {
                transcript: tokens.join(" "),
                tokens,
                system_acts,
                label,
            });
        }
        dialogues.push(Dialogue {
            id: format!("syn-{d}"),
            turns,
        });
    }
    (dialogues, ontology)
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("I want Cheap, Thai food!"),
            vec!["i", "want", "cheap", ",", "thai", "food", "!"]
        );
        assert_eq!(tokenize("   "), Vec::<String>::new());
    }

    #[test]
    fn tokenize_roundtrips_prespaced_text() {
        let text = "what is the phone number";
        let tokens = tokenize(text);
        assert_eq!(tokens.join(" "), text);
    }

    #[test]
    fn vocab_ids_dense_and_oov() {
        let v = Vocab::build(["b", "a", "b", "c"]);
        assert_eq!(v.len(), 4); // <unk> + 3
        assert_eq!(v.id_of("b"), 1);
        assert_eq!(v.id_of("a"), 2);
        assert_eq!(v.id_of("zzz"), v.oov_id());
        let ids: Vec<usize> = (0..v.len()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ontology_validation_catches_duplicates() {
        let onto = Ontology {
            slots: vec![
                SlotDef {
                    name: "food".into(),
                    values: vec!["thai".into(), "thai".into()],
                },
            ],
            request_slot: None,
        };
        assert!(onto.validate().is_err());
    }

    #[test]
    fn multiwoz_merge_unions_values_in_first_seen_order() {
        let raw = Ontology {
            slots: vec![
                SlotDef {
                    name: "hotel-area".into(),
                    values: vec!["north".into(), "south".into()],
                },
                SlotDef {
                    name: "hotel-price".into(),
                    values: vec!["cheap".into()],
                },
                SlotDef {
                    name: "attraction-area".into(),
                    values: vec!["south".into(), "centre".into()],
                },
                SlotDef {
                    name: "train-day".into(),
                    values: vec!["monday".into()],
                },
            ],
            request_slot: None,
        };
        let merged = merge_multiwoz_ontology(&raw);
        assert_eq!(merged.slot_count(), 3); // area collision merged
        let area = &merged.slots[merged.slot_index("area").unwrap()];
        assert_eq!(area.values, vec!["north", "south", "centre"]);
        // no duplicates
        let set: HashSet<_> = area.values.iter().collect();
        assert_eq!(set.len(), area.values.len());
    }

    #[test]
    fn multiwoz_merge_is_order_independent_on_slot_names() {
        let mut raw = Ontology {
            slots: vec![
                SlotDef { name: "hotel-area".into(), values: vec!["north".into()] },
                SlotDef { name: "attraction-area".into(), values: vec!["south".into()] },
                SlotDef { name: "train-day".into(), values: vec!["monday".into()] },
            ],
            request_slot: None,
        };
        let a: HashSet<String> = merge_multiwoz_ontology(&raw)
            .slots
            .iter()
            .map(|s| s.name.clone())
            .collect();
        raw.slots.reverse();
        let b: HashSet<String> = merge_multiwoz_ontology(&raw)
            .slots
            .iter()
            .map(|s| s.name.clone())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec {
            slots: 3,
            values_per_slot: 5,
            dialogues: 20,
            turns_per_dialogue: 4,
            vocab_size: 30,
            seed: 7,
        };
        let (dialogues, onto) = gen_synthetic(&spec);
        assert_eq!(dialogues.len(), 20);
        let turns: usize = dialogues.iter().map(|d| d.turns.len()).sum();
        assert_eq!(turns, 80);
        assert_eq!(onto.slot_count(), 4); // 3 informable + request
        assert!(onto.slots.iter().take(3).all(|s| s.values.len() == 5));

        let (again, _) = gen_synthetic(&spec);
        assert_eq!(dialogues, again);
    }

    #[test]
    fn synthetic_labels_are_lexically_grounded() {
        let (dialogues, _) = gen_synthetic(&SyntheticSpec::default());
        for d in &dialogues {
            for t in &d.turns {
                for (_, value) in &t.label.inform {
                    assert!(
                        t.tokens.contains(value),
                        "value token {value} missing from utterance {:?}",
                        t.tokens
                    );
                }
                for r in &t.label.request {
                    assert!(t.tokens.contains(r));
                }
            }
        }
    }

    #[test]
    fn synthetic_labels_are_ontology_valid() {
        let (dialogues, onto) = gen_synthetic(&SyntheticSpec::default());
        for d in &dialogues {
            for t in &d.turns {
                for (slot, value) in &t.label.inform {
                    let sidx = onto.slot_index(slot).unwrap();
                    onto.value_index(sidx, value).unwrap();
                }
            }
        }
    }
}
