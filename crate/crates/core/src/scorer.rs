//! Turn-level binary scoring of one (slot, value) pair from the encoded
//! turn: an utterance score attends over the hidden sequence with the
//! value context as the query, an action score attends over the previous
//! system actions with the utterance context as the query, and the two
//! combine through a learned mixing weight and a sigmoid.

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::layers::Affine;

/// Final score for one (slot, value) pair. `y` is the sigmoid of
/// `y_utt + omega * y_act` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotValueScore {
    pub slot: String,
    pub value: String,
    pub y_utt: f64,
    pub y_act: f64,
    pub y: f64,
}

/// Utterance score of one candidate value: dot-product attention of the
/// value context over the hidden rows, pooled and passed through the
/// scoring affine.
pub fn score_utterance(
    tape: &mut Tape,
    store: &ParamStore,
    h_utt: NodeId,
    c_val: NodeId,
    head: &Affine,
) -> Result<NodeId> {
    let cv = tape.value(c_val);
    if cv.rows() != 1 {
        return Err(Error::ShapeMismatch {
            op: "score_utterance",
            lhs: cv.shape_str(),
            rhs: "1 x d value context".into(),
        });
    }
    let cv_t = tape.transpose(c_val);
    let scores = tape.matmul(h_utt, cv_t)?; // n x 1
    let p = tape.softmax_time(scores, 1)?;
    let q = tape.attend_time(h_utt, p, 1)?; // 1 x d
    let y = head.apply(tape, store, q)?;
    Ok(y)
}

/// Action score of one candidate value: the utterance context queries the
/// action contexts (the null action is row 0 and guarantees a non-empty
/// pool), and the pooled action summary is scored against the value.
pub fn score_actions(
    tape: &mut Tape,
    c_act: NodeId,
    c_utt: NodeId,
    c_val: NodeId,
) -> Result<NodeId> {
    if tape.value(c_act).rows() == 0 {
        return Err(Error::EmptySequence {
            what: "action contexts",
        });
    }
    let cu_t = tape.transpose(c_utt);
    let scores = tape.matmul(c_act, cu_t)?; // (l+1) x 1
    let p = tape.softmax_time(scores, 1)?;
    let q = tape.attend_time(c_act, p, 1)?; // 1 x d
    let cv_t = tape.transpose(c_val);
    let y = tape.matmul(q, cv_t)?; // 1 x 1
    Ok(y)
}

/// y = sigmoid(y_utt + omega * y_act), strictly inside (0, 1).
pub fn combine_scores(
    tape: &mut Tape,
    store: &ParamStore,
    y_utt: NodeId,
    y_act: NodeId,
    omega: ParamId,
) -> Result<NodeId> {
    let om = tape.param(store, omega);
    let gated = tape.mul(y_act, om)?;
    let sum = tape.add(y_utt, gated)?;
    Ok(tape.sigmoid(sum))
}

/// Batched scoring block shared by training, evaluation, and the
/// benchmark. Inputs are the per-slot encodings of `t` turns in time-major
/// layout; `val_ctx` holds V candidate value contexts shared by all turns.
/// Returns `(y, y_utt, y_act)`, each a `(t*V) x 1` column whose row
/// `turn*V + v` scores candidate v for that turn.
pub fn score_slot_batched(
    tape: &mut Tape,
    store: &ParamStore,
    head: &Affine,
    omega: ParamId,
    h_utt: NodeId,
    c_utt: NodeId,
    act_ctx: NodeId,
    val_ctx: NodeId,
    t: usize,
) -> Result<(NodeId, NodeId, NodeId)> {
    let v = tape.value(val_ctx).rows();
    let cv_t = tape.transpose(val_ctx); // d x V

    // utterance side
    let a_utt = tape.matmul(h_utt, cv_t)?; // (n*t) x V
    let p_utt = tape.softmax_time(a_utt, t)?;
    let q_utt = tape.attend_time(h_utt, p_utt, t)?; // (t*V) x d
    let y_utt = head.apply(tape, store, q_utt)?; // (t*V) x 1

    // action side: q_act is per turn, independent of the candidate value
    let acts = tape.value(act_ctx).rows() / t;
    debug_assert!(acts >= 1, "null action guarantees a non-empty pool");
    let cu_tiled = tape.tile_rows(c_utt, acts); // ((l+1)*t) x d
    let prod = tape.mul(act_ctx, cu_tiled)?;
    let a_act = tape.sum_rows(prod); // ((l+1)*t) x 1
    let p_act = tape.softmax_time(a_act, t)?;
    let q_act = tape.attend_time(act_ctx, p_act, t)?; // t x d
    let y_act_mat = tape.matmul(q_act, cv_t)?; // t x V
    let y_act = tape.reshape(y_act_mat, t * v, 1)?;

    let om = tape.param(store, omega);
    let gated = tape.mul(y_act, om)?;
    let summed = tape.add(y_utt, gated)?;
    let y = tape.sigmoid(summed);
    Ok((y, y_utt, y_act))
}

/// Threshold policy over one slot's scored values. For informable slots at
/// most one value is asserted: among values above the threshold, the
/// argmax wins and ties break toward the lower ontology index. For the
/// request slot every value above the threshold is kept.
pub fn select_values(
    scored: &[(usize, f64)],
    threshold: f64,
    is_request_slot: bool,
) -> Vec<usize> {
    if is_request_slot {
        let mut picked: Vec<usize> = scored
            .iter()
            .filter(|(_, y)| *y > threshold)
            .map(|(v, _)| *v)
            .collect();
        picked.sort_unstable();
        return picked;
    }
    let mut best: Option<(usize, f64)> = None;
    for &(v, y) in scored {
        if y <= threshold {
            continue;
        }
        best = match best {
            None => Some((v, y)),
            Some((bv, by)) => {
                if y > by || (y == by && v < bv) {
                    Some((v, y))
                } else {
                    Some((bv, by))
                }
            }
        };
    }
    best.map(|(v, _)| vec![v]).unwrap_or_default()
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::layers::Initializer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data)
    }

    fn head(store: &mut ParamStore, d: usize) -> Affine {
        let mut init = Initializer::new(77);
        Affine::new(store, "head", d, 1, &mut init)
    }

    #[test]
    fn orthogonal_value_gives_uniform_attention_and_row_mean() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 2);
        let mut tape = Tape::new();
        // rows of H are orthogonal to c_val
        let h_utt = tape.leaf(Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![3.0, 0.0],
            vec![-2.0, 0.0],
        ]));
        let c_val = tape.leaf(Tensor::from_rows(&[vec![0.0, 5.0]]));
        let y = score_utterance(&mut tape, &store, h_utt, c_val, &h).unwrap();
        // uniform p gives q = row mean = [2/3, 0]
        let w = store.value(h.w);
        let expect = 2.0 / 3.0 * w.get(0, 0) + store.value(h.b).data()[0];
        assert!((tape.value(y).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn single_row_utterance_ignores_value_direction() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row = rand_tensor(&mut rng, 1, 3);
        let mut tape = Tape::new();
        let h_utt = tape.leaf(row.clone());
        let v1 = tape.leaf(rand_tensor(&mut rng, 1, 3));
        let v2 = tape.leaf(rand_tensor(&mut rng, 1, 3));
        let y1 = score_utterance(&mut tape, &store, h_utt, v1, &h).unwrap();
        let y2 = score_utterance(&mut tape, &store, h_utt, v2, &h).unwrap();
        // q = H_0 either way
        assert!((tape.value(y1).item() - tape.value(y2).item()).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_leaves_y_utt_unchanged() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h_rows = rand_tensor(&mut rng, 4, 2);
        let c_row = rand_tensor(&mut rng, 1, 2);
        let mut tape = Tape::new();

        // adding a constant to every attention logit must not change p
        let h_utt = tape.leaf(h_rows.clone());
        let c_val = tape.leaf(c_row.clone());
        let cv_t = tape.transpose(c_val);
        let scores = tape.matmul(h_utt, cv_t).unwrap();
        let p1 = tape.softmax_time(scores, 1).unwrap();
        let shifted = tape.add_const(scores, 7.5);
        let p2 = tape.softmax_time(shifted, 1).unwrap();
        for (a, b) in tape.value(p1).data().iter().zip(tape.value(p2).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let y1 = score_utterance(&mut tape, &store, h_utt, c_val, &h).unwrap();
        let _ = y1;
    }

    #[test]
    fn single_null_action_pool_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let null_row = rand_tensor(&mut rng, 1, 3);
        let c_utt = rand_tensor(&mut rng, 1, 3);
        let c_val = rand_tensor(&mut rng, 1, 3);
        let mut tape = Tape::new();
        let ca = tape.leaf(null_row.clone());
        let cu = tape.leaf(c_utt);
        let cv = tape.leaf(c_val.clone());
        let y = score_actions(&mut tape, ca, cu, cv).unwrap();
        let expect: f64 = null_row
            .data()
            .iter()
            .zip(c_val.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((tape.value(y).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_action_contexts_pool_to_that_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let row = rand_tensor(&mut rng, 1, 4);
        let stacked = Tensor::from_rows(&[
            row.data().to_vec(),
            row.data().to_vec(),
            row.data().to_vec(),
        ]);
        let c_utt = rand_tensor(&mut rng, 1, 4);
        let c_val = rand_tensor(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let ca = tape.leaf(stacked);
        let cu = tape.leaf(c_utt);
        let cv = tape.leaf(c_val.clone());
        let y = score_actions(&mut tape, ca, cu, cv).unwrap();
        let expect: f64 = row
            .data()
            .iter()
            .zip(c_val.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((tape.value(y).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn combine_trivial_and_derived_points() {
        let mut store = ParamStore::new();
        let omega = store.add("omega", Tensor::scalar(1.0), true);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let y = combine_scores(&mut tape, &store, z, z, omega).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);

        // omega = 0 gates the action path off entirely
        let mut store0 = ParamStore::new();
        let omega0 = store0.add("omega", Tensor::scalar(0.0), true);
        let big = tape.leaf(Tensor::scalar(5.0));
        let y = combine_scores(&mut tape, &store0, z, big, omega0).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);

        // sigmoid(1.2 + 0.5 * -0.4) = sigmoid(1.0)
        let mut store_h = ParamStore::new();
        let omega_h = store_h.add("omega", Tensor::scalar(0.5), true);
        let yu = tape.leaf(Tensor::scalar(1.2));
        let ya = tape.leaf(Tensor::scalar(-0.4));
        let y = combine_scores(&mut tape, &store_h, yu, ya, omega_h).unwrap();
        assert!((tape.value(y).item() - 0.7310585786300049).abs() < 1e-12);
        assert!(tape.value(y).item() > 0.0 && tape.value(y).item() < 1.0);
    }

    #[test]
    fn combine_is_monotone_in_utterance_score() {
        let mut store = ParamStore::new();
        let omega = store.add("omega", Tensor::scalar(0.7), true);
        let mut prev = -1.0;
        for i in 0..20 {
            let yu = -2.0 + i as f64 * 0.25;
            let mut tape = Tape::new();
            let yu_n = tape.leaf(Tensor::scalar(yu));
            let ya_n = tape.leaf(Tensor::scalar(0.9)); // omega * y_act >= 0 fixed
            let y = combine_scores(&mut tape, &store, yu_n, ya_n, omega).unwrap();
            let v = tape.value(y).item();
            assert!(v > prev, "not strictly increasing at yu={yu}");
            prev = v;
        }
    }

    #[test]
    fn batched_scoring_matches_scalar_ops() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 4);
        let omega = store.add("omega", Tensor::scalar(1.0), true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h_utt_t = rand_tensor(&mut rng, 5, 4);
        let c_utt_t = rand_tensor(&mut rng, 1, 4);
        let acts_t = rand_tensor(&mut rng, 3, 4);
        let vals_t = rand_tensor(&mut rng, 2, 4);

        let mut tape = Tape::new();
        let h_utt = tape.leaf(h_utt_t);
        let c_utt = tape.leaf(c_utt_t);
        let acts = tape.leaf(acts_t);
        let vals = tape.leaf(vals_t);
        let (y, y_utt, y_act) =
            score_slot_batched(&mut tape, &store, &h, omega, h_utt, c_utt, acts, vals, 1)
                .unwrap();
        assert_eq!(tape.value(y).rows(), 2);

        for v in 0..2 {
            let c_val = tape.slice_rows(vals, v, 1).unwrap();
            let yu = score_utterance(&mut tape, &store, h_utt, c_val, &h).unwrap();
            let ya = score_actions(&mut tape, acts, c_utt, c_val).unwrap();
            let yc = combine_scores(&mut tape, &store, yu, ya, omega).unwrap();
            assert!((tape.value(y_utt).data()[v] - tape.value(yu).item()).abs() < 1e-12);
            assert!((tape.value(y_act).data()[v] - tape.value(ya).item()).abs() < 1e-12);
            assert!((tape.value(y).data()[v] - tape.value(yc).item()).abs() < 1e-12);
        }
    }

    #[test]
    fn select_values_policies() {
        // informable: argmax above threshold, ties to lower ontology index
        assert_eq!(select_values(&[(0, 0.2), (1, 0.4)], 0.5, false), Vec::<usize>::new());
        assert_eq!(select_values(&[(0, 0.2), (1, 0.7)], 0.5, false), vec![1]);
        assert_eq!(
            select_values(&[(0, 0.8), (1, 0.9), (2, 0.9)], 0.5, false),
            vec![1]
        );
        // request: keep everything above threshold
        assert_eq!(
            select_values(&[(0, 0.8), (1, 0.4), (2, 0.6)], 0.5, true),
            vec![0, 2]
        );
    }
}
