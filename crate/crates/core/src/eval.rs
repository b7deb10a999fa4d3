//! Scoring protocol for grounded relation triplets: volume IoU between
//! tracklets, greedy score-ordered matching of predictions to ground truth,
//! detection mAP and Recall@K, tagging Precision@K, and per-sample fraction
//! recall split by single- vs multi-instance samples.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{RelationTriplet, Tracklet};

/// Matching threshold used throughout the protocol.
pub const VIOU_THRESHOLD: f64 = 0.5;

/// One video's ranked predictions alongside its ground truth.
pub type VideoPair = (Vec<RelationTriplet>, Vec<RelationTriplet>);

fn box_area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn box_intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Volume IoU: per-frame intersection and union areas summed over the joint
/// frame span. A frame covered by only one tracklet contributes that
/// tracklet's full box area to the union and nothing to the intersection.
pub fn viou(a: &Tracklet, b: &Tracklet) -> f64 {
    let start = a.start_frame.min(b.start_frame);
    let end = a.end_frame().max(b.end_frame());
    let mut inter = 0.0;
    let mut union = 0.0;
    for frame in start..end {
        match (a.box_at_frame(frame), b.box_at_frame(frame)) {
            (Some(x), Some(y)) => {
                let i = box_intersection(x, y);
                inter += i;
                union += box_area(x) + box_area(y) - i;
            }
            (Some(x), None) => union += box_area(x),
            (None, Some(y)) => union += box_area(y),
            (None, None) => {}
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Result of matching ranked predictions against one video's ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    /// Prediction indices in evaluation order (descending score; equal scores
    /// keep their input order).
    pub ranking: Vec<usize>,
    /// For each rank, the index of the ground-truth triplet it claimed.
    pub hits: Vec<Option<usize>>,
    /// For each ground-truth triplet, the rank that claimed it.
    pub gt_hit_rank: Vec<Option<usize>>,
}

/// Greedy matcher: walking predictions in score order, each one claims the
/// first unclaimed ground truth with the same category triple whose subject
/// and object tracklets both reach `thresh` volume IoU.
pub fn greedy_match(
    preds: &[RelationTriplet],
    gts: &[RelationTriplet],
    thresh: f64,
) -> MatchOutcome {
    let mut ranking: Vec<usize> = (0..preds.len()).collect();
    ranking.sort_by(|&i, &j| {
        preds[j].score.partial_cmp(&preds[i].score).unwrap_or(Ordering::Equal)
    });
    let mut hits = vec![None; preds.len()];
    let mut gt_hit_rank = vec![None; gts.len()];
    for (rank, &p) in ranking.iter().enumerate() {
        let pred = &preds[p];
        for (g, gt) in gts.iter().enumerate() {
            if gt_hit_rank[g].is_some() || pred.category_triple() != gt.category_triple() {
                continue;
            }
            if viou(&pred.subject, &gt.subject) >= thresh
                && viou(&pred.object, &gt.object) >= thresh
            {
                hits[rank] = Some(g);
                gt_hit_rank[g] = Some(rank);
                break;
            }
        }
    }
    MatchOutcome { ranking, hits, gt_hit_rank }
}

/// Detection scores: average precision and Recall@K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelDet {
    /// Mean over videos with at least one ground-truth triplet.
    pub map: f64,
    pub recall: BTreeMap<usize, f64>,
}

/// Detection protocol: per video, AP is the sum of precision at each hit
/// rank divided by the ground-truth count; Recall@K counts hits within the
/// top K. Videos without ground truth are excluded from the means.
pub fn reldet(videos: &[VideoPair], ks: &[usize]) -> RelDet {
    let mut ap_sum = 0.0;
    let mut recall_sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut counted = 0usize;
    for (preds, gts) in videos {
        if gts.is_empty() {
            continue;
        }
        counted += 1;
        let outcome = greedy_match(preds, gts, VIOU_THRESHOLD);
        let mut seen = 0usize;
        let mut ap = 0.0;
        for (rank, hit) in outcome.hits.iter().enumerate() {
            if hit.is_some() {
                seen += 1;
                ap += seen as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / gts.len() as f64;
        for (&k, sum) in recall_sums.iter_mut() {
            let in_top_k =
                outcome.hits.iter().take(k).filter(|h| h.is_some()).count();
            *sum += in_top_k as f64 / gts.len() as f64;
        }
    }
    let denom = counted.max(1) as f64;
    RelDet {
        map: ap_sum / denom,
        recall: recall_sums.into_iter().map(|(k, s)| (k, s / denom)).collect(),
    }
}

/// Tagging protocol: predictions collapse to unique category triplets (best
/// score kept); Precision@K is the share of the top K unique triplets that
/// appear among the ground-truth category triplets, averaged over videos.
pub fn reltag(videos: &[VideoPair], ks: &[usize]) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    for (preds, gts) in videos {
        let mut ranking: Vec<usize> = (0..preds.len()).collect();
        ranking.sort_by(|&i, &j| {
            preds[j].score.partial_cmp(&preds[i].score).unwrap_or(Ordering::Equal)
        });
        let mut unique = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for &p in &ranking {
            if seen.insert(preds[p].category_triple()) {
                unique.push(preds[p].category_triple());
            }
        }
        let gt_triples: std::collections::BTreeSet<_> =
            gts.iter().map(|g| g.category_triple()).collect();
        for (&k, sum) in sums.iter_mut() {
            let correct =
                unique.iter().take(k).filter(|t| gt_triples.contains(t)).count();
            *sum += correct as f64 / k as f64;
        }
    }
    let denom = videos.len().max(1) as f64;
    sums.into_iter().map(|(k, s)| (k, s / denom)).collect()
}

/// Fraction recall split into single- and multi-instance samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRecall {
    /// Mean fraction over samples with exactly one instance.
    pub single: BTreeMap<usize, f64>,
    /// Mean fraction over samples with two or more instances.
    pub multi: BTreeMap<usize, f64>,
    pub single_samples: usize,
    pub multi_samples: usize,
}

/// A sample is the set of ground-truth triplets sharing (subject tracklet,
/// object tracklet, predicate category). Its fraction under the top-K
/// predictions is hit instances / total instances; samples pool across
/// videos before averaging.
pub fn fraction_recall(videos: &[VideoPair], ks: &[usize]) -> FractionRecall {
    let mut single: BTreeMap<usize, Vec<f64>> = ks.iter().map(|&k| (k, Vec::new())).collect();
    let mut multi: BTreeMap<usize, Vec<f64>> = ks.iter().map(|&k| (k, Vec::new())).collect();
    for &k in ks {
        for (preds, gts) in videos {
            if gts.is_empty() {
                continue;
            }
            let mut ranking: Vec<usize> = (0..preds.len()).collect();
            ranking.sort_by(|&i, &j| {
                preds[j].score.partial_cmp(&preds[i].score).unwrap_or(Ordering::Equal)
            });
            let top: Vec<RelationTriplet> =
                ranking.iter().take(k).map(|&p| preds[p].clone()).collect();
            let outcome = greedy_match(&top, gts, VIOU_THRESHOLD);
            let mut samples: BTreeMap<(usize, usize, usize), (usize, usize)> = BTreeMap::new();
            for (g, gt) in gts.iter().enumerate() {
                let key = (gt.subject.id, gt.object.id, gt.predicate);
                let entry = samples.entry(key).or_insert((0, 0));
                entry.0 += 1;
                if outcome.gt_hit_rank[g].is_some() {
                    entry.1 += 1;
                }
            }
            for (instances, hits) in samples.values() {
                let fraction = *hits as f64 / *instances as f64;
                if *instances == 1 {
                    single.get_mut(&k).unwrap().push(fraction);
                } else {
                    multi.get_mut(&k).unwrap().push(fraction);
                }
            }
        }
    }
    let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let single_samples = single.values().next().map_or(0, |v| v.len());
    let multi_samples = multi.values().next().map_or(0, |v| v.len());
    FractionRecall {
        single: single.iter().map(|(&k, v)| (k, mean(v))).collect(),
        multi: multi.iter().map(|(&k, v)| (k, mean(v))).collect(),
        single_samples,
        multi_samples,
    }
}

/// Aggregate scores across the whole evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Videos with at least one ground-truth triplet.
    pub videos: usize,
    pub map: f64,
    pub recall: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    pub fraction: FractionRecall,
    pub gt_count: usize,
    pub pred_count: usize,
    /// Hits of the full (untruncated) prediction lists.
    pub hit_count: usize,
}

/// Runs the full protocol at the standard cutoffs: Recall@{50,100},
/// Precision@{1,5,10}, fraction recall @{50,100,150}.
pub fn evaluate(videos: &[VideoPair]) -> EvalReport {
    let det = reldet(videos, &[50, 100]);
    let tag = reltag(videos, &[1, 5, 10]);
    let fraction = fraction_recall(videos, &[50, 100, 150]);
    let mut hit_count = 0;
    for (preds, gts) in videos {
        hit_count +=
            greedy_match(preds, gts, VIOU_THRESHOLD).hits.iter().flatten().count();
    }
    EvalReport {
        videos: videos.iter().filter(|(_, g)| !g.is_empty()).count(),
        map: det.map,
        recall: det.recall,
        precision: tag,
        fraction,
        gt_count: videos.iter().map(|(_, g)| g.len()).sum(),
        pred_count: videos.iter().map(|(p, _)| p.len()).sum(),
        hit_count,
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "videos: {}  gt: {}  preds: {}  hits: {}", self.videos, self.gt_count, self.pred_count, self.hit_count)?;
        writeln!(f, "detection   mAP {:.4}", self.map)?;
        for (k, v) in &self.recall {
            writeln!(f, "detection   R@{k} {v:.4}")?;
        }
        for (k, v) in &self.precision {
            writeln!(f, "tagging     P@{k} {v:.4}")?;
        }
        for (k, v) in &self.fraction.single {
            writeln!(f, "fraction    fR_S@{k} {v:.4}")?;
        }
        for (k, v) in &self.fraction.multi {
            writeln!(f, "fraction    fR_M@{k} {v:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TimeSlot;
    use approx::assert_abs_diff_eq;

    fn track(id: usize, category: usize, start: usize, frames: usize, b: [f64; 4]) -> Tracklet {
        Tracklet {
            id,
            category,
            start_frame: start,
            frame_count: 32,
            boxes: vec![b; frames],
        }
    }

    fn triplet(
        sub: Tracklet,
        predicate: usize,
        obj: Tracklet,
        score: f64,
    ) -> RelationTriplet {
        RelationTriplet {
            time_slot: TimeSlot::from_frames(
                sub.start_frame,
                sub.end_frame(),
                sub.frame_count,
            )
            .unwrap(),
            subject: sub,
            predicate,
            object: obj,
            score,
        }
    }

    const UNIT: [f64; 4] = [0.0, 0.0, 1.0, 1.0];

    #[test]
    fn viou_frozen_cases() {
        let a = track(0, 0, 0, 10, UNIT);
        assert_abs_diff_eq!(viou(&a, &a), 1.0, epsilon = 1e-15);
        let disjoint = track(1, 0, 20, 5, UNIT);
        assert_abs_diff_eq!(viou(&a, &disjoint), 0.0, epsilon = 1e-15);
        let shifted = track(2, 0, 5, 10, UNIT);
        assert_abs_diff_eq!(viou(&a, &shifted), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn greedy_match_one_to_one() {
        let gt = vec![triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 1.0)];
        let exact = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.9);
        let second = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.8);
        let out = greedy_match(&[second.clone(), exact.clone()], &gt, VIOU_THRESHOLD);
        // Higher score ranks first and claims the ground truth.
        assert_eq!(out.ranking, vec![1, 0]);
        assert_eq!(out.hits, vec![Some(0), None]);
        assert_eq!(out.gt_hit_rank, vec![Some(0)]);
    }

    #[test]
    fn low_viou_is_a_miss() {
        // Same categories, half-overlapping spans: volume IoU 1/3 < 0.5.
        let gt = vec![triplet(track(0, 1, 0, 10, UNIT), 2, track(1, 3, 0, 10, UNIT), 1.0)];
        let pred = triplet(track(0, 1, 5, 10, UNIT), 2, track(1, 3, 5, 10, UNIT), 0.9);
        let out = greedy_match(&[pred], &gt, VIOU_THRESHOLD);
        assert_eq!(out.hits, vec![None]);
    }

    #[test]
    fn detection_ap_is_precision_sum_over_gt() {
        let gt_a = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 1.0);
        let gt_b = triplet(track(2, 4, 0, 8, UNIT), 5, track(3, 6, 0, 8, UNIT), 1.0);
        // Hits at ranks 1 and 3 (rank 2 is a category miss).
        let preds = vec![
            triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.9),
            triplet(track(0, 7, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.8),
            triplet(track(2, 4, 0, 8, UNIT), 5, track(3, 6, 0, 8, UNIT), 0.7),
        ];
        let det = reldet(&[(preds, vec![gt_a, gt_b])], &[50, 100]);
        assert_abs_diff_eq!(det.map, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(det.recall[&50], 1.0, epsilon = 1e-12);

        let single = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 1.0);
        let hit = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.9);
        let det1 = reldet(&[(vec![hit], vec![single.clone()])], &[50]);
        assert_abs_diff_eq!(det1.map, 1.0, epsilon = 1e-15);
        let det0 = reldet(&[(vec![], vec![single])], &[50]);
        assert_abs_diff_eq!(det0.map, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(det0.recall[&50], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tagging_ignores_localization() {
        let gt = vec![triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 1.0)];
        // Totally different boxes/frames, same categories.
        let off = [0.5, 0.5, 0.6, 0.6];
        let pred = triplet(track(9, 1, 20, 4, off), 2, track(8, 3, 20, 4, off), 0.9);
        let tag = reltag(&[(vec![pred], gt)], &[1]);
        assert_abs_diff_eq!(tag[&1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tagging_precision_counts_unique_triplets() {
        // 5 ground-truth category triples; predictions contain 3 correct
        // unique triples (one duplicated, which must collapse) plus junk.
        let gt: Vec<RelationTriplet> = (0..5)
            .map(|i| triplet(track(i, i, 0, 8, UNIT), 7, track(10 + i, 9, 0, 8, UNIT), 1.0))
            .collect();
        let mut preds = Vec::new();
        for (rank, i) in [0usize, 1, 2].iter().enumerate() {
            preds.push(triplet(
                track(*i, *i, 0, 8, UNIT),
                7,
                track(10 + i, 9, 0, 8, UNIT),
                0.9 - 0.1 * rank as f64,
            ));
        }
        // Duplicate of the best triple with lower score.
        preds.push(triplet(track(0, 0, 0, 8, UNIT), 7, track(10, 9, 0, 8, UNIT), 0.5));
        // Two wrong-category fillers.
        preds.push(triplet(track(30, 8, 0, 8, UNIT), 6, track(31, 8, 0, 8, UNIT), 0.4));
        preds.push(triplet(track(32, 8, 0, 8, UNIT), 5, track(33, 8, 0, 8, UNIT), 0.3));
        let tag = reltag(&[(preds.clone(), gt.clone())], &[5]);
        assert_abs_diff_eq!(tag[&5], 3.0 / 5.0, epsilon = 1e-12);
        let none = reltag(&[(vec![preds[4].clone()], gt)], &[1]);
        assert_abs_diff_eq!(none[&1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn fraction_recall_splits_by_instance_count() {
        // Sample A: one instance, hit. Sample B: three instances of the same
        // (subject, object, predicate) at disjoint spans, two hit.
        let sub = |start| track(0, 1, start, 5, UNIT);
        let obj = |start| track(1, 2, start, 5, UNIT);
        let gt = vec![
            triplet(track(5, 4, 0, 5, UNIT), 9, track(6, 5, 0, 5, UNIT), 1.0),
            triplet(sub(0), 3, obj(0), 1.0),
            triplet(sub(10), 3, obj(10), 1.0),
            triplet(sub(20), 3, obj(20), 1.0),
        ];
        let preds = vec![
            triplet(track(5, 4, 0, 5, UNIT), 9, track(6, 5, 0, 5, UNIT), 0.9),
            triplet(sub(0), 3, obj(0), 0.8),
            triplet(sub(10), 3, obj(10), 0.7),
        ];
        let fr = fraction_recall(&[(preds, gt.clone())], &[50]);
        assert_eq!(fr.single_samples, 1);
        assert_eq!(fr.multi_samples, 1);
        assert_abs_diff_eq!(fr.single[&50], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fr.multi[&50], 2.0 / 3.0, epsilon = 1e-12);
        let empty = fraction_recall(&[(vec![], gt)], &[50]);
        assert_abs_diff_eq!(empty.single[&50], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(empty.multi[&50], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn late_false_positive_changes_nothing() {
        let gt = vec![triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 1.0)];
        let hit = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.9);
        let junk = triplet(track(7, 8, 0, 8, UNIT), 6, track(9, 8, 0, 8, UNIT), 0.1);
        let base = evaluate(&[(vec![hit.clone()], gt.clone())]);
        let with_junk = evaluate(&[(vec![hit, junk], gt)]);
        assert_abs_diff_eq!(base.map, with_junk.map, epsilon = 1e-15);
        assert_eq!(base.recall, with_junk.recall);
        assert_eq!(base.fraction.single, with_junk.fraction.single);
        // Tagging P@K has a fixed divisor, so the extra unique triplet below
        // the hit cannot raise it either.
        assert!(with_junk.precision[&1] <= base.precision[&1] + 1e-15);
    }

    #[test]
    fn equal_scores_keep_insertion_order() {
        let gt = vec![triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 1.0)];
        let a = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.5);
        let b = triplet(track(0, 1, 0, 8, UNIT), 2, track(1, 3, 0, 8, UNIT), 0.5);
        let out = greedy_match(&[a, b], &gt, VIOU_THRESHOLD);
        assert_eq!(out.ranking, vec![0, 1]);
        assert_eq!(out.hits, vec![Some(0), None]);
    }
}
