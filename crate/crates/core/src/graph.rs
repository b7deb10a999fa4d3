//! Temporal bipartite graph: entity tracklets on one side, predicate nodes on
//! the other. A predicate node bundles every temporal instance of one
//! (subject, object, category) relation; flattening a graph yields one
//! relation triplet per instance and merging triplets reverses that.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("invalid time slot [{start}, {end}]: need 0 <= start < end <= 1")]
    InvalidTimeSlot { start: f64, end: f64 },
    #[error("invalid frame range [{begin}, {end}) for {frame_count} frames")]
    InvalidFrameRange { begin: usize, end: usize, frame_count: usize },
    #[error("triplet references unknown tracklet id {0}")]
    UnknownTrackletId(usize),
    #[error("duplicate tracklet id {0} in entity list")]
    DuplicateTrackletId(usize),
}

/// Half-open temporal interval normalized by video length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSlot {
    start: f64,
    end: f64,
}

impl TimeSlot {
    pub fn new(start: f64, end: f64) -> Result<Self, GraphError> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end > 1.0 || start >= end {
            return Err(GraphError::InvalidTimeSlot { start, end });
        }
        Ok(TimeSlot { start, end })
    }

    /// Slot covering frames `[begin, end)` of a `frame_count`-frame video.
    pub fn from_frames(begin: usize, end: usize, frame_count: usize) -> Result<Self, GraphError> {
        if begin >= end || end > frame_count || frame_count == 0 {
            return Err(GraphError::InvalidFrameRange { begin, end, frame_count });
        }
        let t = frame_count as f64;
        TimeSlot::new(begin as f64 / t, end as f64 / t)
    }

    /// Nearest frame range `[begin, end)`. May be empty for sub-frame slots.
    pub fn to_frames(&self, frame_count: usize) -> (usize, usize) {
        let t = frame_count as f64;
        let begin = (self.start * t).round() as usize;
        let end = (self.end * t).round() as usize;
        (begin.min(frame_count), end.min(frame_count))
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Intersection, if non-degenerate.
    pub fn overlap(&self, other: &TimeSlot) -> Option<TimeSlot> {
        let s = self.start.max(other.start);
        let e = self.end.min(other.end);
        if s < e {
            Some(TimeSlot { start: s, end: e })
        } else {
            None
        }
    }

    /// Contains `other` entirely.
    pub fn contains(&self, other: &TimeSlot) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// Temporal intersection-over-union of two slots.
    pub fn tiou(&self, other: &TimeSlot) -> f64 {
        let inter = (self.end.min(other.end) - self.start.max(other.start)).max(0.0);
        let union = self.length() + other.length() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Entity node: one detected or ground-truth object track with a box per
/// frame over a contiguous frame span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: usize,
    pub category: usize,
    /// First frame the tracklet covers.
    pub start_frame: usize,
    /// Frame count of the parent video (used to normalize time).
    pub frame_count: usize,
    /// One `[xmin, ymin, xmax, ymax]` box per covered frame.
    pub boxes: Vec<[f64; 4]>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// One past the last covered frame.
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len()
    }

    pub fn time_slot(&self) -> Result<TimeSlot, GraphError> {
        TimeSlot::from_frames(self.start_frame, self.end_frame(), self.frame_count)
    }

    pub fn box_at_frame(&self, frame: usize) -> Option<&[f64; 4]> {
        if frame < self.start_frame || frame >= self.end_frame() {
            None
        } else {
            Some(&self.boxes[frame - self.start_frame])
        }
    }

    /// Restriction to a frame range; `None` when the ranges do not meet.
    pub fn crop_frames(&self, begin: usize, end: usize) -> Option<Tracklet> {
        let b = begin.max(self.start_frame);
        let e = end.min(self.end_frame());
        if b >= e {
            return None;
        }
        Some(Tracklet {
            id: self.id,
            category: self.category,
            start_frame: b,
            frame_count: self.frame_count,
            boxes: self.boxes[b - self.start_frame..e - self.start_frame].to_vec(),
        })
    }

    /// Restriction to a normalized time slot.
    pub fn crop(&self, slot: &TimeSlot) -> Option<Tracklet> {
        let (b, e) = slot.to_frames(self.frame_count);
        self.crop_frames(b, e)
    }
}

/// Predicate node: every temporal instance of one relation between a fixed
/// subject and object entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateNode {
    pub category: usize,
    pub subject_idx: usize,
    pub object_idx: usize,
    /// One slot per relation instance; at least one.
    pub time_slots: Vec<TimeSlot>,
    pub score: f64,
}

/// The bipartite graph for one video.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemporalBipartiteGraph {
    pub entities: Vec<Tracklet>,
    pub predicates: Vec<PredicateNode>,
}

/// One relation instance, flattened: tracklets already cropped to the slot.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationTriplet {
    pub subject: Tracklet,
    pub predicate: usize,
    pub object: Tracklet,
    pub time_slot: TimeSlot,
    pub score: f64,
}

impl RelationTriplet {
    /// (subject category, predicate category, object category)
    pub fn category_triple(&self) -> (usize, usize, usize) {
        (self.subject.category, self.predicate, self.object.category)
    }
}

/// A structural problem found by [`validate_graph`]. Violations are data,
/// not failures: an invalid graph can still be inspected and repaired.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EmptyTracklet { entity: usize },
    BadBox { entity: usize, frame: usize },
    SpanOutOfRange { entity: usize },
    FrameCountMismatch { entity: usize },
    EntityIndexOutOfRange { node: usize },
    SelfRelation { node: usize },
    NoTimeSlots { node: usize },
    SlotOutsideOverlap { node: usize, slot: usize },
    ScoreOutOfRange { node: usize },
    DuplicateNode { first: usize, second: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyTracklet { entity } => write!(f, "entity {entity} has no boxes"),
            Violation::BadBox { entity, frame } => {
                write!(f, "entity {entity} has a degenerate box at frame {frame}")
            }
            Violation::SpanOutOfRange { entity } => {
                write!(f, "entity {entity} extends past the video's frame count")
            }
            Violation::FrameCountMismatch { entity } => {
                write!(f, "entity {entity} disagrees with entity 0 on the video frame count")
            }
            Violation::EntityIndexOutOfRange { node } => {
                write!(f, "predicate node {node} references a missing entity")
            }
            Violation::SelfRelation { node } => {
                write!(f, "predicate node {node} relates an entity to itself")
            }
            Violation::NoTimeSlots { node } => write!(f, "predicate node {node} has no time slots"),
            Violation::SlotOutsideOverlap { node, slot } => write!(
                f,
                "predicate node {node} slot {slot} leaves the subject-object overlap"
            ),
            Violation::ScoreOutOfRange { node } => {
                write!(f, "predicate node {node} score is outside [0, 1]")
            }
            Violation::DuplicateNode { first, second } => write!(
                f,
                "predicate nodes {first} and {second} duplicate one (subject, object, category)"
            ),
        }
    }
}

/// Checks every structural invariant and reports all violations found.
pub fn validate_graph(g: &TemporalBipartiteGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    for (i, t) in g.entities.iter().enumerate() {
        if t.is_empty() {
            out.push(Violation::EmptyTracklet { entity: i });
            continue;
        }
        if t.frame_count == 0 || t.end_frame() > t.frame_count {
            out.push(Violation::SpanOutOfRange { entity: i });
        }
        if t.frame_count != g.entities[0].frame_count {
            out.push(Violation::FrameCountMismatch { entity: i });
        }
        for (fi, b) in t.boxes.iter().enumerate() {
            let finite = b.iter().all(|v| v.is_finite());
            if !finite || b[0] >= b[2] || b[1] >= b[3] {
                out.push(Violation::BadBox { entity: i, frame: t.start_frame + fi });
            }
        }
    }

    for (j, p) in g.predicates.iter().enumerate() {
        if p.subject_idx >= g.entities.len() || p.object_idx >= g.entities.len() {
            out.push(Violation::EntityIndexOutOfRange { node: j });
            continue;
        }
        if p.subject_idx == p.object_idx {
            out.push(Violation::SelfRelation { node: j });
        }
        if p.time_slots.is_empty() {
            out.push(Violation::NoTimeSlots { node: j });
        }
        if !(0.0..=1.0).contains(&p.score) || p.score.is_nan() {
            out.push(Violation::ScoreOutOfRange { node: j });
        }
        let sub = &g.entities[p.subject_idx];
        let obj = &g.entities[p.object_idx];
        if let (Ok(ss), Ok(os)) = (sub.time_slot(), obj.time_slot()) {
            match ss.overlap(&os) {
                Some(window) => {
                    for (si, slot) in p.time_slots.iter().enumerate() {
                        if !window.contains(slot) {
                            out.push(Violation::SlotOutsideOverlap { node: j, slot: si });
                        }
                    }
                }
                None => {
                    for si in 0..p.time_slots.len() {
                        out.push(Violation::SlotOutsideOverlap { node: j, slot: si });
                    }
                }
            }
        }
    }

    for (j, p) in g.predicates.iter().enumerate() {
        for (k, q) in g.predicates.iter().enumerate().skip(j + 1) {
            if p.subject_idx == q.subject_idx
                && p.object_idx == q.object_idx
                && p.category == q.category
            {
                out.push(Violation::DuplicateNode { first: j, second: k });
            }
        }
    }

    out
}

/// Flattens a graph into one triplet per (node, time slot), tracklets cropped
/// to the slot. Ordered by descending score, ties by predicate category then
/// node and slot index. Slots that crop to nothing (possible only on invalid
/// graphs) are skipped.
pub fn to_triplets(g: &TemporalBipartiteGraph) -> Vec<RelationTriplet> {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (j, p) in g.predicates.iter().enumerate() {
        for si in 0..p.time_slots.len() {
            order.push((j, si));
        }
    }
    order.sort_by(|&(a, ai), &(b, bi)| {
        let pa = &g.predicates[a];
        let pb = &g.predicates[b];
        pb.score
            .partial_cmp(&pa.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(pa.category.cmp(&pb.category))
            .then(a.cmp(&b))
            .then(ai.cmp(&bi))
    });

    let mut out = Vec::with_capacity(order.len());
    for (j, si) in order {
        let p = &g.predicates[j];
        let slot = p.time_slots[si];
        let (Some(sub), Some(obj)) = (
            g.entities[p.subject_idx].crop(&slot),
            g.entities[p.object_idx].crop(&slot),
        ) else {
            continue;
        };
        out.push(RelationTriplet {
            subject: sub,
            predicate: p.category,
            object: obj,
            time_slot: slot,
            score: p.score,
        });
    }
    out
}

/// Rebuilds a graph from flattened triplets over a canonical entity list.
/// Triplets agreeing on (subject id, category, object id) merge into one
/// predicate node whose score is the max over the merged triplets and whose
/// slots are sorted by start time. Tracklet ids must be unique in `entities`
/// and every triplet must reference known ids.
pub fn from_triplets(
    triplets: &[RelationTriplet],
    entities: &[Tracklet],
) -> Result<TemporalBipartiteGraph, GraphError> {
    let mut by_id = std::collections::BTreeMap::new();
    for (i, t) in entities.iter().enumerate() {
        if by_id.insert(t.id, i).is_some() {
            return Err(GraphError::DuplicateTrackletId(t.id));
        }
    }

    // BTreeMap keeps node order deterministic regardless of triplet order.
    let mut nodes: std::collections::BTreeMap<(usize, usize, usize), PredicateNode> =
        std::collections::BTreeMap::new();
    for t in triplets {
        let &si = by_id
            .get(&t.subject.id)
            .ok_or(GraphError::UnknownTrackletId(t.subject.id))?;
        let &oi = by_id
            .get(&t.object.id)
            .ok_or(GraphError::UnknownTrackletId(t.object.id))?;
        let entry = nodes.entry((si, t.predicate, oi)).or_insert_with(|| PredicateNode {
            category: t.predicate,
            subject_idx: si,
            object_idx: oi,
            time_slots: Vec::new(),
            score: 0.0,
        });
        entry.time_slots.push(t.time_slot);
        entry.score = entry.score.max(t.score);
    }

    let mut predicates: Vec<PredicateNode> = nodes.into_values().collect();
    for p in &mut predicates {
        p.time_slots
            .sort_by(|a, b| (a.start(), a.end()).partial_cmp(&(b.start(), b.end())).unwrap());
    }
    Ok(TemporalBipartiteGraph { entities: entities.to_vec(), predicates })
}
