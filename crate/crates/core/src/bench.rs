//! Wall-clock latency comparison of the two encoder variants over
//! synthetic turn batches, sweeping the slot count.
//!
//! Methodology: both variants score identical batches (checksummed) at
//! identical dimensions, through the same tensor substrate, so the
//! comparison isolates architecture. Timings are medians with
//! interquartile ranges over `iters` measured iterations after `warmup`
//! discarded ones; train mode includes backward and the optimizer step,
//! test mode is forward only. Runs are single-threaded unless the
//! concurrent per-slot inference row is requested.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{build_vocab, Dialogue, DialogueTurn, Ontology, SlotDef, TurnLabel};
use crate::encoders::Variant;
use crate::error::{Error, Result};
use crate::model::{DstModel, ModelConfig, PreparedTurn};
use crate::training::{adam_step, bce_loss_column, AdamConfig, AdamState};

// ── Specification ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSpec {
    pub variants: Vec<Variant>,
    pub slot_counts: Vec<usize>,
    /// Turns per batch.
    pub batch_size: usize,
    /// Utterance length in tokens.
    pub seq_len: usize,
    pub d_emb: usize,
    pub d_rnn: usize,
    pub values_per_slot: usize,
    /// Tokens per candidate value.
    pub value_len: usize,
    /// Real system actions per turn (the null sentinel is always added).
    pub actions_per_turn: usize,
    pub act_len: usize,
    pub vocab_size: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    pub batch_slots: bool,
    /// Also measure the threaded per-slot inference path.
    pub concurrent: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            variants: vec![Variant::Gce, Variant::Glad],
            slot_counts: vec![5, 10, 20, 40],
            batch_size: 50,
            seq_len: 30,
            d_emb: 16,
            d_rnn: 64,
            values_per_slot: 8,
            value_len: 2,
            actions_per_turn: 1,
            act_len: 2,
            vocab_size: 200,
            warmup: 2,
            iters: 5,
            seed: 7,
            batch_slots: true,
            concurrent: false,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 5 {
            return Err(Error::Config("bench needs at least 5 measured iterations".into()));
        }
        if self.warmup < 1 {
            return Err(Error::Config("bench needs at least 1 warmup iteration".into()));
        }
        if self.variants.is_empty() || self.slot_counts.is_empty() {
            return Err(Error::Config("bench needs variants and slot counts".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Test => "test",
        }
    }
}

// ── Report ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub k: usize,
    pub mode: String,
    pub median_s: f64,
    pub iqr_s: f64,
    /// GLAD median / GCE median for this (k, mode); present when both
    /// variants were measured.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub warmup: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub d_emb: usize,
    pub d_rnn: usize,
    pub batch_slots: bool,
    pub input_checksum: String,
}

impl BenchReport {
    pub fn speedup(&self, k: usize, mode: Mode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.k == k && r.mode == mode.as_str() && r.speedup.is_some())
            .and_then(|r| r.speedup)
    }

    pub fn median(&self, variant: &str, k: usize, mode: Mode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.k == k && r.mode == mode.as_str())
            .map(|r| r.median_s)
    }
}

// ── Synthetic batch ──────────────────────────────────────────────────

pub struct BenchSetup {
    pub ontology: Ontology,
    pub turns: Vec<DialogueTurn>,
    /// (turn, slot, value) positives for the training loss.
    pub positives: HashSet<(usize, usize, usize)>,
    pub vocab: crate::data::Vocab,
    pub checksum: String,
}

/// Deterministic batch of identical-shape turns plus a K-slot ontology.
pub fn build_setup(spec: &BenchSpec, k: usize) -> BenchSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (k as u64).wrapping_mul(0x9e37_79b9));
    let slots: Vec<SlotDef> = (0..k)
        .map(|s| SlotDef {
            name: format!("slot{s}"),
            values: (0..spec.values_per_slot)
                .map(|v| {
                    (0..spec.value_len)
                        .map(|w| format!("v{s}x{v}w{w}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect(),
        })
        .collect();
    let ontology = Ontology {
        slots,
        request_slot: None,
    };

    let fillers: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let mut turns = Vec::with_capacity(spec.batch_size);
    let mut positives = HashSet::new();
    for t in 0..spec.batch_size {
        let tokens: Vec<String> = (0..spec.seq_len)
            .map(|_| fillers[rng.gen_range(0..fillers.len())].clone())
            .collect();
        let system_acts: Vec<Vec<String>> = (0..spec.actions_per_turn)
            .map(|_| {
                (0..spec.act_len)
                    .map(|_| fillers[rng.gen_range(0..fillers.len())].clone())
                    .collect()
            })
            .collect();
        // one positive pair per turn for the training loss
        let slot = t % k;
        let value = rng.gen_range(0..spec.values_per_slot);
        positives.insert((t, slot, value));
        turns.push(DialogueTurn {
            transcript: tokens.join(" "),
            tokens,
            system_acts,
            label: TurnLabel::default(),
        });
    }

    let pseudo = vec![Dialogue {
        id: "bench".into(),
        turns: turns.clone(),
    }];
    let vocab = build_vocab(&pseudo, &ontology);

    let mut hasher = Fnv64::new();
    for turn in &turns {
        for tok in &turn.tokens {
            hasher.update(tok.as_bytes());
        }
        for act in &turn.system_acts {
            for tok in act {
                hasher.update(tok.as_bytes());
            }
        }
    }
    for slot in &ontology.slots {
        hasher.update(slot.name.as_bytes());
        for v in &slot.values {
            hasher.update(v.as_bytes());
        }
    }
    let checksum = format!("{:016x}", hasher.finish());

    BenchSetup {
        ontology,
        turns,
        positives,
        vocab,
        checksum,
    }
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

// ── Timing ───────────────────────────────────────────────────────────

/// Wall-clock seconds for one full batch pass. Test mode scores every
/// (slot, value) pair forward-only; train mode adds the mean per-pair
/// binary cross-entropy, backward, and one optimizer step.
pub fn time_batch(
    model: &mut DstModel,
    turns: &[PreparedTurn],
    positives: &HashSet<(usize, usize, usize)>,
    mode: Mode,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    batch_slots: bool,
) -> Result<f64> {
    let start = Instant::now();
    match mode {
        Mode::Test => {
            let mut tape = Tape::inference();
            let fwd = model.forward_batch(&mut tape, turns, None, batch_slots)?;
            // touch the outputs so the pass cannot be elided
            let mut sink = 0.0;
            for s in &fwd.slots {
                sink += tape.value(s.y).data()[0];
            }
            std::hint::black_box(sink);
        }
        Mode::Train => {
            let mut tape = Tape::new();
            let fwd = model.forward_batch(&mut tape, turns, None, batch_slots)?;
            let t_count = turns.len();
            let total_pairs: usize = fwd
                .slots
                .iter()
                .map(|s| s.value_indices.len() * t_count)
                .sum();
            let mut slot_losses = Vec::with_capacity(fwd.slots.len());
            for s in &fwd.slots {
                let v = s.value_indices.len();
                let mut labels = vec![0.0; t_count * v];
                for (col, &vi) in s.value_indices.iter().enumerate() {
                    for t in 0..t_count {
                        if positives.contains(&(t, s.slot_idx, vi)) {
                            labels[t * v + col] = 1.0;
                        }
                    }
                }
                let losses = bce_loss_column(&mut tape, s.y, &labels)?;
                slot_losses.push(tape.sum_all(losses));
            }
            let stacked = tape.concat_rows(&slot_losses)?;
            let total = tape.sum_all(stacked);
            let loss = tape.scale(total, 1.0 / total_pairs as f64);
            tape.backward(loss, &mut model.store)?;
            drop(tape);
            adam_step(&mut model.store, adam, adam_cfg);
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Threaded per-slot inference: one thread per slot, each scoring its own
/// slot's values on a private tape against the shared parameters.
pub fn time_batch_concurrent(model: &DstModel, turns: &[PreparedTurn]) -> Result<f64> {
    let start = Instant::now();
    let k = model.slot_count();
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..k)
            .map(|slot| {
                let turns = &turns;
                let model = &model;
                scope.spawn(move || -> Result<()> {
                    let vals: Vec<usize> =
                        (0..model.ontology.slots[slot].values.len()).collect();
                    let plan = vec![(slot, vals)];
                    let mut tape = Tape::inference();
                    let fwd = model.forward_batch(&mut tape, turns, Some(&plan), false)?;
                    std::hint::black_box(tape.value(fwd.slots[0].y).data()[0]);
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }
    Ok(start.elapsed().as_secs_f64())
}

fn median_iqr(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let q1 = samples[(n - 1) / 4];
    let q3 = samples[3 * (n - 1) / 4];
    (median, q3 - q1)
}

// ── Sweep ────────────────────────────────────────────────────────────

/// Time both variants across the slot-count sweep, on identical inputs.
pub fn scaling_sweep(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut checksum_all = String::new();

    for &k in &spec.slot_counts {
        let setup = build_setup(spec, k);
        if checksum_all.is_empty() {
            checksum_all = setup.checksum.clone();
        } else {
            checksum_all = format!("{checksum_all},{}", setup.checksum);
        }
        let mut medians: Vec<(Variant, Mode, f64, f64)> = Vec::new();
        let mut per_variant_checksum: Option<String> = None;
        for &variant in &spec.variants {
            // same batch content for every variant, asserted by checksum
            match &per_variant_checksum {
                None => per_variant_checksum = Some(setup.checksum.clone()),
                Some(c) => assert_eq!(c, &setup.checksum, "variants must see identical inputs"),
            }
            let cfg = ModelConfig {
                variant,
                d_emb: spec.d_emb,
                d_rnn: spec.d_rnn,
                train_word_embeddings: false,
                seed: spec.seed,
            };
            let mut model =
                DstModel::new(cfg, setup.ontology.clone(), setup.vocab.clone(), None)?;
            let turns: Vec<PreparedTurn> = setup
                .turns
                .iter()
                .map(|t| model.prepare_turn(t))
                .collect::<Result<_>>()?;
            let mut adam = AdamState::new(&model.store);
            let adam_cfg = AdamConfig::default();

            for mode in [Mode::Train, Mode::Test] {
                for _ in 0..spec.warmup {
                    time_batch(
                        &mut model,
                        &turns,
                        &setup.positives,
                        mode,
                        &mut adam,
                        &adam_cfg,
                        spec.batch_slots,
                    )?;
                }
                let mut samples = Vec::with_capacity(spec.iters);
                for _ in 0..spec.iters {
                    samples.push(time_batch(
                        &mut model,
                        &turns,
                        &setup.positives,
                        mode,
                        &mut adam,
                        &adam_cfg,
                        spec.batch_slots,
                    )?);
                }
                let (median, iqr) = median_iqr(&mut samples);
                medians.push((variant, mode, median, iqr));
            }

            if spec.concurrent {
                for _ in 0..spec.warmup {
                    time_batch_concurrent(&model, &turns)?;
                }
                let mut samples = Vec::with_capacity(spec.iters);
                for _ in 0..spec.iters {
                    samples.push(time_batch_concurrent(&model, &turns)?);
                }
                let (median, iqr) = median_iqr(&mut samples);
                rows.push(BenchRow {
                    variant: format!("{variant}+threads"),
                    k,
                    mode: Mode::Test.as_str().into(),
                    median_s: median,
                    iqr_s: iqr,
                    speedup: None,
                });
            }
        }

        for mode in [Mode::Train, Mode::Test] {
            let glad = medians
                .iter()
                .find(|(v, m, ..)| *v == Variant::Glad && *m == mode)
                .map(|(_, _, med, _)| *med);
            let gce = medians
                .iter()
                .find(|(v, m, ..)| *v == Variant::Gce && *m == mode)
                .map(|(_, _, med, _)| *med);
            let speedup = match (glad, gce) {
                (Some(g), Some(c)) if c > 0.0 => Some(g / c),
                _ => None,
            };
            for &(variant, m, median, iqr) in &medians {
                if m == mode {
                    rows.push(BenchRow {
                        variant: variant.to_string(),
                        k,
                        mode: mode.as_str().into(),
                        median_s: median,
                        iqr_s: iqr,
                        speedup,
                    });
                }
            }
        }
    }

    Ok(BenchReport {
        rows,
        warmup: spec.warmup,
        iters: spec.iters,
        batch_size: spec.batch_size,
        seq_len: spec.seq_len,
        d_emb: spec.d_emb,
        d_rnn: spec.d_rnn,
        batch_slots: spec.batch_slots,
        input_checksum: checksum_all,
    })
}

// ── Serialization ────────────────────────────────────────────────────

/// CSV with the fixed column set; floats print in shortest round-trip
/// form. An empty sweep yields the header line only.
pub fn to_csv(report: &BenchReport) -> String {
    let mut out = String::from("variant,k,mode,median_s,iqr_s,speedup\n");
    for r in &report.rows {
        let speedup = r.speedup.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.k, r.mode, r.median_s, r.iqr_s, speedup
        ));
    }
    out
}

/// Parse rows back from `to_csv` output (the methodology fields are not
/// part of the CSV and are left at their defaults).
pub fn rows_from_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "variant,k,mode,median_s,iqr_s,speedup" {
                return Err(Error::data("unexpected CSV header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::data(format!("CSV row {i} has {} fields", fields.len())));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::data(format!("bad {what} `{s}` in CSV row {i}")))
        };
        rows.push(BenchRow {
            variant: fields[0].to_string(),
            k: fields[1]
                .parse()
                .map_err(|_| Error::data(format!("bad k `{}` in CSV row {i}", fields[1])))?,
            mode: fields[2].to_string(),
            median_s: parse_f(fields[3], "median")?,
            iqr_s: parse_f(fields[4], "iqr")?,
            speedup: if fields[5].is_empty() {
                None
            } else {
                Some(parse_f(fields[5], "speedup")?)
            },
        });
    }
    Ok(rows)
}

/// Human-readable summary with the methodology up front.
pub fn to_text(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "latency sweep: batch={} turns, seq_len={}, d_emb={}, d_rnn={}, slot-batching={}\n",
        report.batch_size, report.seq_len, report.d_emb, report.d_rnn, report.batch_slots
    ));
    out.push_str(&format!(
        "timing: median over {} iterations after {} warmup (excluded); input checksum {}\n",
        report.iters, report.warmup, report.input_checksum
    ));
    out.push_str(&format!(
        "{:<14} {:>4} {:>6} {:>12} {:>12} {:>10}\n",
        "variant", "K", "mode", "median_s", "iqr_s", "speedup"
    ));
    for r in &report.rows {
        let speedup = r
            .speedup
            .map(|s| format!("{s:.3}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<14} {:>4} {:>6} {:>12.6} {:>12.6} {:>10}\n",
            r.variant, r.k, r.mode, r.median_s, r.iqr_s, speedup
        ));
    }
    out
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> BenchSpec {
        BenchSpec {
            variants: vec![Variant::Gce, Variant::Glad],
            slot_counts: vec![2],
            batch_size: 3,
            seq_len: 4,
            d_emb: 4,
            d_rnn: 4,
            values_per_slot: 2,
            value_len: 1,
            actions_per_turn: 1,
            act_len: 2,
            vocab_size: 12,
            warmup: 1,
            iters: 5,
            seed: 3,
            batch_slots: true,
            concurrent: false,
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = tiny_spec();
        spec.iters = 4;
        assert!(spec.validate().is_err());
        spec.iters = 5;
        spec.warmup = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn times_are_positive_and_test_not_slower_than_train() {
        let spec = tiny_spec();
        let report = scaling_sweep(&spec).unwrap();
        assert!(report.rows.iter().all(|r| r.median_s > 0.0));
        for variant in ["gce", "glad"] {
            let train = report.median(variant, 2, Mode::Train).unwrap();
            let test = report.median(variant, 2, Mode::Test).unwrap();
            assert!(
                test <= train,
                "{variant}: test {test} > train {train} (median over >=5 runs)"
            );
        }
    }

    #[test]
    fn setup_is_deterministic() {
        let spec = tiny_spec();
        let a = build_setup(&spec, 2);
        let b = build_setup(&spec, 2);
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.turns, b.turns);
    }

    #[test]
    fn csv_roundtrip_and_empty_sweep_header() {
        let report = BenchReport {
            rows: vec![
                BenchRow {
                    variant: "gce".into(),
                    k: 5,
                    mode: "train".into(),
                    median_s: 0.012345678901234567,
                    iqr_s: 0.001,
                    speedup: Some(1.25),
                },
                BenchRow {
                    variant: "glad".into(),
                    k: 5,
                    mode: "train".into(),
                    median_s: 0.0154321,
                    iqr_s: 0.002,
                    speedup: Some(1.25),
                },
                BenchRow {
                    variant: "gce+threads".into(),
                    k: 5,
                    mode: "test".into(),
                    median_s: 0.009,
                    iqr_s: 0.0005,
                    speedup: None,
                },
            ],
            warmup: 2,
            iters: 5,
            batch_size: 50,
            seq_len: 30,
            d_emb: 16,
            d_rnn: 64,
            batch_slots: true,
            input_checksum: "deadbeef".into(),
        };
        let csv = to_csv(&report);
        let rows = rows_from_csv(&csv).unwrap();
        assert_eq!(rows, report.rows);

        let empty = BenchReport {
            rows: vec![],
            ..report
        };
        assert_eq!(to_csv(&empty), "variant,k,mode,median_s,iqr_s,speedup\n");
    }

    #[test]
    fn two_variant_two_k_report_has_eight_rows() {
        let mut spec = tiny_spec();
        spec.slot_counts = vec![1, 2];
        let report = scaling_sweep(&spec).unwrap();
        assert_eq!(report.rows.len(), 8); // 2 variants x 2 K x 2 modes
        assert!(report.rows.iter().all(|r| r.speedup.is_some()));
    }

    #[test]
    fn concurrent_flag_adds_separate_rows() {
        let mut spec = tiny_spec();
        spec.concurrent = true;
        let report = scaling_sweep(&spec).unwrap();
        let threaded: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.variant.ends_with("+threads"))
            .collect();
        assert_eq!(threaded.len(), 2);
        assert!(threaded.iter().all(|r| r.mode == "test"));
    }
}
