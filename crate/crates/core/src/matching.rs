//! Set matching between predicted and ground-truth predicate nodes: greedy
//! volume-IoU assignment of detected entities to ground-truth entities, the
//! per-pair matching cost (classification + adjacency terms), an exact
//! Hungarian solver, and the full stage loss with background padding.
//!
//! The optimal assignment is recomputed from detached forward values each
//! step; gradients flow only through the per-term loss, never the matching.

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::eval::viou;
use crate::graph::{TemporalBipartiteGraph, Tracklet};

#[derive(Debug, Error, PartialEq)]
pub enum MatchingError {
    #[error("cost matrix must be square, got {rows}×{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("non-finite cost entry")]
    NonFinite,
    #[error("{gt} ground-truth nodes exceed the {queries} available queries")]
    TooManyGtNodes { gt: usize, queries: usize },
    #[error("ground-truth class {class} out of range ({classes} real classes)")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("adjacency is {got} wide but the attention covers {expected} entities")]
    EntityCountMismatch { got: usize, expected: usize },
}

/// Ground truth translated into the detected scene's index space.
#[derive(Clone, Debug, PartialEq)]
pub struct GtAssignment {
    /// Detected entity index → ground-truth entity index.
    pub entity_map: Vec<Option<usize>>,
    /// Role-wise binary adjacency, each `gt_nodes × detected_entities`;
    /// row j marks the detected entity standing in for gt node j's subject
    /// (channel 0) or object (channel 1), all-zero when that entity found no
    /// detected counterpart.
    pub adjacency: [Tensor; 2],
    /// Ground-truth predicate category per node.
    pub classes: Vec<usize>,
}

/// Greedy descending-vIoU assignment: a detected tracklet claims a
/// same-category ground-truth entity when their volume IoU reaches 0.5;
/// both sides are claimed at most once, best overlaps first.
pub fn assign_gt_entities(detected: &[Tracklet], gt: &[Tracklet]) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (d, det) in detected.iter().enumerate() {
        for (g, truth) in gt.iter().enumerate() {
            if det.category != truth.category {
                continue;
            }
            let v = viou(det, truth);
            if v >= 0.5 {
                pairs.push((v, d, g));
            }
        }
    }
    // Best overlap first; exact ties resolved by the lower indices.
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut map = vec![None; detected.len()];
    let mut claimed = vec![false; gt.len()];
    for (_, d, g) in pairs {
        if map[d].is_none() && !claimed[g] {
            map[d] = Some(g);
            claimed[g] = true;
        }
    }
    map
}

/// Builds the full assignment for one scene: entity map plus the role-wise
/// adjacency rows of every ground-truth predicate node.
pub fn gt_assignment(detected: &[Tracklet], truth: &TemporalBipartiteGraph) -> GtAssignment {
    let entity_map = assign_gt_entities(detected, &truth.entities);
    let mut gt_to_detected = vec![None; truth.entities.len()];
    for (d, m) in entity_map.iter().enumerate() {
        if let Some(g) = m {
            gt_to_detected[*g] = Some(d);
        }
    }
    let nodes = truth.predicates.len();
    let n = detected.len();
    let mut adjacency = [Tensor::zeros(vec![nodes.max(1), n.max(1)]), Tensor::zeros(vec![nodes.max(1), n.max(1)])];
    for (j, node) in truth.predicates.iter().enumerate() {
        for (channel, entity) in [(0, node.subject_idx), (1, node.object_idx)] {
            if let Some(d) = gt_to_detected[entity] {
                adjacency[channel].set2(j, d, 1.0);
            }
        }
    }
    GtAssignment {
        entity_map,
        adjacency,
        classes: truth.predicates.iter().map(|p| p.category).collect(),
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.max(1e-12).ln()
}

/// Mean binary cross-entropy over both role rows (2n elements).
fn bce_rows(target: (&[f64], &[f64]), predicted: (&[f64], &[f64])) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t_row, p_row) in [(target.0, predicted.0), (target.1, predicted.1)] {
        for (&t, &p) in t_row.iter().zip(p_row) {
            sum -= t * clamped_ln(p) + (1.0 - t) * clamped_ln(1.0 - p);
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

/// Cost of pairing one ground-truth node with one predicted node: zero for
/// the background class, otherwise the negative class log-probability plus
/// `lambda` times the mean adjacency cross-entropy over both role rows.
pub fn match_cost(
    gt_class: Option<usize>,
    gt_adjacency: (&[f64], &[f64]),
    probabilities: &[f64],
    attention: (&[f64], &[f64]),
    lambda: f64,
) -> f64 {
    match gt_class {
        None => 0.0,
        Some(c) => {
            -clamped_ln(probabilities[c]) + lambda * bce_rows(gt_adjacency, attention)
        }
    }
}

/// Exact minimum-cost assignment over a square matrix (shortest augmenting
/// paths with potentials, cubic time). Returns `perm` with `perm[row] =
/// column`.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>, MatchingError> {
    if cost.rank() != 2 || cost.rows() != cost.cols() {
        return Err(MatchingError::NonSquare { rows: cost.rows(), cols: cost.cols() });
    }
    if !cost.is_finite() {
        return Err(MatchingError::NonFinite);
    }
    let n = cost.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-indexed potentials; p[j] is the row currently matched to column j.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at2(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    Ok(perm)
}

/// The matched stage loss and the assignment it used.
pub struct StageLoss {
    /// Differentiable scalar on the tape.
    pub loss: Var,
    /// Ground-truth node index → query index; entries past the real node
    /// count are the background-padded remainder.
    pub permutation: Vec<usize>,
    /// Total matching cost at the detached forward values.
    pub matched_cost: f64,
}

/// Builds the classification-stage loss on the tape. Ground-truth nodes are
/// padded with background to the query count, the optimal pairing is found
/// on detached values, and the returned loss sums the matched class and
/// adjacency terms plus background log-loss for the padded remainder.
pub fn stage_loss(
    tape: &Tape,
    probabilities: Var,
    attention: [Var; 2],
    assignment: &GtAssignment,
    lambda: f64,
) -> Result<StageLoss, MatchingError> {
    let probs = tape.value_clone(probabilities);
    let att = [tape.value_clone(attention[0]), tape.value_clone(attention[1])];
    let m = probs.rows();
    let n = att[0].cols();
    let g = assignment.classes.len();
    let classes = probs.cols() - 1;
    if g > m {
        return Err(MatchingError::TooManyGtNodes { gt: g, queries: m });
    }
    if g > 0 && assignment.adjacency[0].cols() != n {
        return Err(MatchingError::EntityCountMismatch {
            got: assignment.adjacency[0].cols(),
            expected: n,
        });
    }
    for &c in &assignment.classes {
        if c >= classes {
            return Err(MatchingError::ClassOutOfRange { class: c, classes });
        }
    }

    // Detached cost matrix: row = (padded) ground-truth node, column = query.
    let mut cost = Tensor::zeros(vec![m, m]);
    for j in 0..g {
        let rows = (assignment.adjacency[0].row(j), assignment.adjacency[1].row(j));
        for k in 0..m {
            let c = match_cost(
                Some(assignment.classes[j]),
                rows,
                probs.row(k),
                (att[0].row(k), att[1].row(k)),
                lambda,
            );
            cost.set2(j, k, c);
        }
    }
    let permutation = hungarian(&cost)?;
    let matched_cost: f64 = permutation.iter().enumerate().map(|(j, &k)| cost.at2(j, k)).sum();

    let mut terms: Vec<Var> = Vec::with_capacity(m);
    for (j, &k) in permutation.iter().enumerate() {
        let row = tape.slice_rows(probabilities, k, 1);
        if j < g {
            let p = tape.slice_cols(row, assignment.classes[j], 1);
            let nll = tape.scale(tape.ln(tape.clamp_min(p, 1e-12)), -1.0);
            let predicted = tape.concat_cols(&[
                tape.slice_rows(attention[0], k, 1),
                tape.slice_rows(attention[1], k, 1),
            ]);
            let mut target = assignment.adjacency[0].row(j).to_vec();
            target.extend_from_slice(assignment.adjacency[1].row(j));
            let bce = tape.bce_mean(predicted, &Tensor::new(vec![1, 2 * n], target));
            terms.push(tape.add(tape.sum(nll), tape.scale(bce, lambda)));
        } else {
            let p = tape.slice_cols(row, classes, 1);
            let nll = tape.scale(tape.ln(tape.clamp_min(p, 1e-12)), -1.0);
            terms.push(tape.sum(nll));
        }
    }
    let loss = terms
        .into_iter()
        .reduce(|a, b| tape.add(a, b))
        .unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(StageLoss { loss, permutation, matched_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::normalized_attention;
    use crate::graph::{PredicateNode, TimeSlot};
    use crate::nn::{central_diff_grads, max_rel_error, Bound, ParamStore};
    use approx::assert_abs_diff_eq;

    fn track(id: usize, category: usize, start: usize, frames: usize) -> Tracklet {
        Tracklet {
            id,
            category,
            start_frame: start,
            frame_count: 32,
            boxes: vec![[0.0, 0.0, 1.0, 1.0]; frames],
        }
    }

    #[test]
    fn entity_assignment_greedy_rules() {
        let gt = vec![track(0, 1, 0, 10)];
        // Identical: assigned.
        assert_eq!(assign_gt_entities(&[track(5, 1, 0, 10)], &gt), vec![Some(0)]);
        // Volume IoU 1/3 (half-overlap): below threshold.
        assert_eq!(assign_gt_entities(&[track(5, 1, 5, 10)], &gt), vec![None]);
        // Category mismatch: never assigned.
        assert_eq!(assign_gt_entities(&[track(5, 2, 0, 10)], &gt), vec![None]);
        // Two candidates: only the better overlap claims the single truth.
        let close = track(5, 1, 0, 10);
        let worse = track(6, 1, 2, 10);
        assert_eq!(assign_gt_entities(&[worse, close], &gt), vec![None, Some(0)]);
    }

    #[test]
    fn adjacency_rows_follow_entity_map() {
        let slot = TimeSlot::new(0.0, 0.5).unwrap();
        let truth = TemporalBipartiteGraph {
            entities: vec![track(0, 1, 0, 10), track(1, 2, 0, 10)],
            predicates: vec![PredicateNode {
                category: 0,
                subject_idx: 0,
                object_idx: 1,
                time_slots: vec![slot],
                score: 1.0,
            }],
        };
        // Detected: entity 0 matches gt subject; nothing matches the object.
        let detected = vec![track(9, 2, 20, 5), track(8, 1, 0, 10)];
        let a = gt_assignment(&detected, &truth);
        assert_eq!(a.entity_map, vec![None, Some(0)]);
        assert_eq!(a.adjacency[0].row(0), &[0.0, 1.0]);
        assert_eq!(a.adjacency[1].row(0), &[0.0, 0.0]);
        assert_eq!(a.classes, vec![0]);
    }

    #[test]
    fn match_cost_frozen_example() {
        let cost = match_cost(
            Some(0),
            (&[1.0], &[0.0]),
            &[0.5, 0.5],
            (&[0.9], &[0.1]),
            30.0,
        );
        let expected = -(0.5_f64.ln()) + 30.0 * -(0.9_f64.ln());
        assert_abs_diff_eq!(cost, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(cost, 3.854, epsilon = 1e-3);
        // Background rows cost nothing.
        assert_eq!(match_cost(None, (&[1.0], &[0.0]), &[0.1, 0.9], (&[0.5], &[0.5]), 30.0), 0.0);
        // Perfect prediction drives the cost to zero.
        let perfect = match_cost(
            Some(0),
            (&[1.0], &[0.0]),
            &[1.0 - 1e-15, 1e-15],
            (&[1.0 - 1e-15], &[1e-15]),
            30.0,
        );
        assert!(perfect < 1e-10);
    }

    #[test]
    fn hungarian_small_cases() {
        let id = hungarian(&Tensor::new(vec![2, 2], vec![0.0, 9.0, 9.0, 0.0])).unwrap();
        assert_eq!(id, vec![0, 1]);
        let swap = hungarian(&Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_eq!(swap, vec![1, 0]);
        assert!(matches!(
            hungarian(&Tensor::new(vec![1, 2], vec![0.0, 1.0])),
            Err(MatchingError::NonSquare { .. })
        ));
        assert!(matches!(
            hungarian(&Tensor::new(vec![1, 1], vec![f64::NAN])),
            Err(MatchingError::NonFinite)
        ));
    }

    fn brute_force_min(cost: &Tensor) -> f64 {
        fn go(cost: &Tensor, row: usize, used: &mut Vec<bool>) -> f64 {
            let n = cost.rows();
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for col in 0..n {
                if !used[col] {
                    used[col] = true;
                    best = best.min(cost.at2(row, col) + go(cost, row + 1, used));
                    used[col] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.rows()])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut state = 0xfeed_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for trial in 0..50 {
            let n = 2 + trial % 4;
            let cost = Tensor::new(vec![n, n], (0..n * n).map(|_| 10.0 * next() - 5.0).collect());
            let perm = hungarian(&cost).unwrap();
            // A permutation, and exactly optimal.
            let mut seen = vec![false; n];
            for &c in &perm {
                assert!(!seen[c]);
                seen[c] = true;
            }
            let total: f64 = perm.iter().enumerate().map(|(r, &c)| cost.at2(r, c)).sum();
            assert_abs_diff_eq!(total, brute_force_min(&cost), epsilon = 1e-9);
        }
    }

    fn assignment_for(classes: Vec<usize>, subject: Vec<f64>, object: Vec<f64>, n: usize) -> GtAssignment {
        let g = classes.len();
        let tensor = |data: Vec<f64>| {
            if g == 0 {
                Tensor::zeros(vec![1, n])
            } else {
                Tensor::new(vec![g, n], data)
            }
        };
        GtAssignment {
            entity_map: vec![None; n],
            adjacency: [tensor(subject), tensor(object)],
            classes,
        }
    }

    #[test]
    fn single_pair_loss_is_the_match_cost() {
        let tape = Tape::new();
        let probabilities = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]));
        let a1 = tape.constant(Tensor::new(vec![1, 1], vec![0.9]));
        let a2 = tape.constant(Tensor::new(vec![1, 1], vec![0.1]));
        let assignment = assignment_for(vec![0], vec![1.0], vec![0.0], 1);
        let out = stage_loss(&tape, probabilities, [a1, a2], &assignment, 30.0).unwrap();
        assert_abs_diff_eq!(tape.item(out.loss), 3.854, epsilon = 1e-3);
        assert_eq!(out.permutation, vec![0]);
    }

    #[test]
    fn confident_background_costs_nothing() {
        let tape = Tape::new();
        // Two queries, both putting ~all mass on the background column.
        let logits = Tensor::new(vec![2, 3], vec![0.0, 0.0, 50.0, 0.0, 0.0, 50.0]);
        let probabilities = tape.softmax_rows(tape.constant(logits));
        let a1 = tape.constant(Tensor::new(vec![2, 2], vec![0.5; 4]));
        let a2 = tape.constant(Tensor::new(vec![2, 2], vec![0.5; 4]));
        let assignment = assignment_for(vec![], vec![], vec![], 2);
        let out = stage_loss(&tape, probabilities, [a1, a2], &assignment, 30.0).unwrap();
        assert!(tape.item(out.loss) < 1e-9);
    }

    #[test]
    fn loss_is_nonnegative_and_label_order_invariant() {
        let tape = Tape::new();
        let logits = Tensor::new(
            vec![3, 3],
            vec![0.4, -0.2, 0.1, 1.3, 0.0, -0.5, -0.7, 0.9, 0.2],
        );
        let probabilities = tape.softmax_rows(tape.constant(logits));
        let raw1 = tape.constant(Tensor::new(vec![3, 2], vec![0.3, -0.1, 0.8, 0.2, -0.4, 0.6]));
        let raw2 = tape.constant(Tensor::new(vec![3, 2], vec![-0.2, 0.5, 0.1, -0.3, 0.7, 0.0]));
        let att = normalized_attention(&tape, raw1, raw2);
        let a = assignment_for(
            vec![0, 1],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0, 0.0],
            2,
        );
        let out = stage_loss(&tape, probabilities, att.values, &a, 30.0).unwrap();
        let value = tape.item(out.loss);
        assert!(value > 0.0);

        // Swapping the two ground-truth nodes leaves the total unchanged.
        let swapped = assignment_for(
            vec![1, 0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
        );
        let out2 = stage_loss(&tape, probabilities, att.values, &swapped, 30.0).unwrap();
        assert_abs_diff_eq!(value, tape.item(out2.loss), epsilon = 1e-12);
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let tape = Tape::new();
        let probabilities = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]));
        let a1 = tape.constant(Tensor::new(vec![1, 1], vec![0.9]));
        let a2 = tape.constant(Tensor::new(vec![1, 1], vec![0.1]));
        let too_many = assignment_for(vec![0, 0], vec![1.0, 0.0], vec![0.0, 1.0], 1);
        assert!(matches!(
            stage_loss(&tape, probabilities, [a1, a2], &too_many, 30.0),
            Err(MatchingError::TooManyGtNodes { .. })
        ));
        let bad_class = assignment_for(vec![5], vec![1.0], vec![0.0], 1);
        assert!(matches!(
            stage_loss(&tape, probabilities, [a1, a2], &bad_class, 30.0),
            Err(MatchingError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn stage_loss_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        store.insert(
            "cls_logits",
            Tensor::new(vec![2, 3], vec![0.3, -0.4, 0.2, 0.8, 0.1, -0.6]),
        );
        store.insert("att1", Tensor::new(vec![2, 2], vec![0.5, -0.2, 0.3, 0.9]));
        store.insert("att2", Tensor::new(vec![2, 2], vec![-0.1, 0.4, 0.6, -0.7]));
        let assignment = assignment_for(vec![1], vec![0.0, 1.0], vec![1.0, 0.0], 2);

        let build = |tape: &Tape, b: &Bound| {
            let probabilities = tape.softmax_rows(b.var("cls_logits"));
            let att = normalized_attention(tape, b.var("att1"), b.var("att2"));
            stage_loss(tape, probabilities, att.values, &assignment, 30.0).unwrap().loss
        };
        let tape = Tape::new();
        let b = Bound::bind(&tape, &store);
        let loss = build(&tape, &b);
        let analytic = b.collect_grads(&tape.backward(loss), &store);
        let numeric = central_diff_grads(&store, 1e-6, |s| {
            let tape = Tape::new();
            let b = Bound::bind(&tape, s);
            tape.item(build(&tape, &b))
        });
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-4, "max rel err {err}");
    }
}
