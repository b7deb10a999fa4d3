//! Temporal grounding stage: triplet-query features over category embeddings
//! and the pair's overlap window, multimodal fusion of frame features with
//! the query tokens, a K-bin head predicting per-frame foreground scores,
//! slot boundaries and confidences, bin-wise label assignment and losses,
//! temporal NMS, and the end-to-end inference pipeline that turns classified
//! scenes into scored relation triplets.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::classifier::{entity_embedding_table, predicate_embedding_table, ClassifiedQuery};
use crate::graph::{RelationTriplet, TimeSlot, Tracklet};
use crate::nn::{self, sinusoidal_positions, Bound, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum GroundingError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("matrix width {got}, expected {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("category index {index} out of range ({count} categories)")]
    CategoryRange { index: usize, count: usize },
}

/// Hyper-parameters of the grounding stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    /// Frame feature width.
    pub d_v: usize,
    /// Category embedding width.
    pub d_w: usize,
    /// Fused multimodal width.
    pub d: usize,
    /// Hidden width of MLPs and convolution branches.
    pub hidden: usize,
    /// Number of grounding bins (K).
    pub bins: usize,
    /// Self-attention heads in the two stream encoders and the
    /// cross-attention.
    pub heads: usize,
    /// Add sinusoidal positions to the frame stream.
    pub use_frame_positions: bool,
    pub entity_categories: usize,
    pub predicate_categories: usize,
    pub seed: u64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            d_v: 1024,
            d_w: 300,
            d: 256,
            hidden: 512,
            bins: 10,
            heads: 8,
            use_frame_positions: true,
            entity_categories: 10,
            predicate_categories: 8,
            seed: 0,
        }
    }
}

impl GroundingConfig {
    /// Builds a freshly initialized parameter store: the query-feature MLPs,
    /// the two stream encoders with their input projections, the
    /// cross-attention and fusion projection, the three head branches, and
    /// the category embedding buffers.
    pub fn init(&self) -> ParamStore {
        assert!(self.bins >= 1, "at least one grounding bin");
        assert!(self.d % self.heads == 0, "width must divide into heads");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = ParamStore::new();
        nn::init_mlp(&mut store, "grd.mlpw", self.d_w, self.hidden, self.d_w, &mut rng);
        nn::init_mlp(&mut store, "grd.mlpt", 2, self.hidden, self.d_w, &mut rng);
        nn::init_linear(&mut store, "grd.vproj", self.d_v, self.d, &mut rng);
        nn::init_linear(&mut store, "grd.qproj", self.d_w, self.d, &mut rng);
        nn::init_encoder_layer(&mut store, "grd.venc", self.d, self.hidden, &mut rng);
        nn::init_encoder_layer(&mut store, "grd.qenc", self.d, self.hidden, &mut rng);
        nn::init_attention(&mut store, "grd.cross", self.d, &mut rng);
        nn::init_linear(&mut store, "grd.fuse", 2 * self.d, self.d, &mut rng);
        for (branch, out) in [("cls", self.bins), ("reg", 2 * self.bins), ("conf", self.bins)] {
            nn::init_conv1d(&mut store, &format!("grd.{branch}.c1"), 3, self.d, self.hidden, &mut rng);
            nn::init_conv1d(&mut store, &format!("grd.{branch}.c2"), 3, self.hidden, out, &mut rng);
        }
        store.insert_buffer(
            "embed.entity",
            entity_embedding_table(self.seed, self.entity_categories, self.d_w),
        );
        store.insert_buffer(
            "embed.pred",
            predicate_embedding_table(self.seed, self.predicate_categories, self.d_w),
        );
        store
    }
}

/// One triplet query to ground: the category triple plus the subject–object
/// overlap window it must stay inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundingQuery {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub overlap: TimeSlot,
}

// ─────────────────────────── forward on the tape ────────────────────────────

/// Query token matrix: the three category embeddings pass through a token
/// MLP, and a time MLP of the overlap boundaries is added to every token.
pub fn query_feature_vars(tape: &Tape, b: &Bound, query: &GroundingQuery) -> Var {
    let entity = b.var("embed.entity");
    let predicate = b.var("embed.pred");
    let s = tape.select_rows(entity, &[query.subject]);
    let p = tape.select_rows(predicate, &[query.predicate]);
    let o = tape.select_rows(entity, &[query.object]);
    let tokens = tape.concat_rows(&[s, p, o]);
    let tokens = nn::mlp(tape, b, "grd.mlpw", tokens);
    let span = tape.constant(Tensor::new(
        vec![1, 2],
        vec![query.overlap.start(), query.overlap.end()],
    ));
    let span = nn::mlp(tape, b, "grd.mlpt", span);
    let width = tape.value(span).cols();
    tape.add_row(tokens, tape.reshape(span, vec![width]))
}

/// Fuses frame features with the query tokens: each stream is projected to
/// the shared width and passes its own one-layer self-attention encoder
/// (frames optionally carrying sinusoidal positions); frame-to-query
/// cross-attention then augments every frame, and the concatenated pair is
/// projected back to the shared width.
pub fn multimodal_fuse_vars(
    tape: &Tape,
    b: &Bound,
    cfg: &GroundingConfig,
    frames: Var,
    query_tokens: Var,
) -> Var {
    let mut v = nn::linear(tape, b, "grd.vproj", frames);
    if cfg.use_frame_positions {
        let t = tape.value(v).rows();
        v = tape.add(v, tape.constant(sinusoidal_positions(t, cfg.d)));
    }
    let v = nn::encoder_layer(tape, b, "grd.venc", v, cfg.heads);
    let q = nn::linear(tape, b, "grd.qproj", query_tokens);
    let q = nn::encoder_layer(tape, b, "grd.qenc", q, cfg.heads);
    let cross = nn::attention(tape, b, "grd.cross", v, q, cfg.heads);
    nn::linear(tape, b, "grd.fuse", tape.concat_cols(&[v, cross]))
}

/// Tape handles of the three head branches.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `T × K` foreground scores in (0,1).
    pub cls: Var,
    /// `T × 2K` raw (start, end) predictions per bin.
    pub reg: Var,
    /// `T × K` confidences in (0,1).
    pub conf: Var,
}

fn conv_branch(tape: &Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = tape.relu(nn::conv1d(tape, b, &format!("{prefix}.c1"), x));
    nn::conv1d(tape, b, &format!("{prefix}.c2"), h)
}

/// Three convolution branches over the fused frames.
pub fn head_vars(tape: &Tape, b: &Bound, m: Var) -> HeadVars {
    HeadVars {
        cls: tape.sigmoid(conv_branch(tape, b, "grd.cls", m)),
        reg: conv_branch(tape, b, "grd.reg", m),
        conf: tape.sigmoid(conv_branch(tape, b, "grd.conf", m)),
    }
}

/// Full grounding forward for one query on the tape.
pub fn grounding_forward_vars(
    tape: &Tape,
    b: &Bound,
    cfg: &GroundingConfig,
    frames: Var,
    query: &GroundingQuery,
) -> HeadVars {
    let tokens = query_feature_vars(tape, b, query);
    let fused = multimodal_fuse_vars(tape, b, cfg, frames, tokens);
    head_vars(tape, b, fused)
}

// ───────────────────────────── numeric wrappers ─────────────────────────────

/// Numeric values of the three head branches.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub cls: Tensor,
    pub reg: Tensor,
    pub conf: Tensor,
}

impl HeadOutput {
    pub fn frames(&self) -> usize {
        self.cls.rows()
    }

    pub fn bins(&self) -> usize {
        self.cls.cols()
    }
}

fn check_query(cfg: &GroundingConfig, query: &GroundingQuery) -> Result<(), GroundingError> {
    for (cat, count) in [
        (query.subject, cfg.entity_categories),
        (query.object, cfg.entity_categories),
        (query.predicate, cfg.predicate_categories),
    ] {
        if cat >= count {
            return Err(GroundingError::CategoryRange { index: cat, count });
        }
    }
    Ok(())
}

/// Query token matrix (`3 × d_w`), numerically.
pub fn query_feature(
    store: &ParamStore,
    cfg: &GroundingConfig,
    query: &GroundingQuery,
) -> Result<Tensor, GroundingError> {
    check_query(cfg, query)?;
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let out = query_feature_vars(&tape, &b, query);
    Ok(tape.value_clone(out))
}

/// Fused multimodal matrix (`T × d`), numerically.
pub fn multimodal_fuse(
    store: &ParamStore,
    cfg: &GroundingConfig,
    frames: &Tensor,
    query_tokens: &Tensor,
) -> Result<Tensor, GroundingError> {
    if frames.rows() == 0 {
        return Err(GroundingError::EmptyVideo);
    }
    if frames.cols() != cfg.d_v {
        return Err(GroundingError::WidthMismatch { got: frames.cols(), expected: cfg.d_v });
    }
    if !frames.is_finite() || !query_tokens.is_finite() {
        return Err(GroundingError::NonFinite);
    }
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let out = multimodal_fuse_vars(
        &tape,
        &b,
        cfg,
        tape.constant(frames.clone()),
        tape.constant(query_tokens.clone()),
    );
    Ok(tape.value_clone(out))
}

/// Validated single-query grounding: frame features in, head branches out.
pub fn ground_query(
    store: &ParamStore,
    cfg: &GroundingConfig,
    frames: &Tensor,
    query: &GroundingQuery,
) -> Result<HeadOutput, GroundingError> {
    if frames.rows() == 0 {
        return Err(GroundingError::EmptyVideo);
    }
    if frames.cols() != cfg.d_v {
        return Err(GroundingError::WidthMismatch { got: frames.cols(), expected: cfg.d_v });
    }
    if !frames.is_finite() {
        return Err(GroundingError::NonFinite);
    }
    check_query(cfg, query)?;
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let head = grounding_forward_vars(&tape, &b, cfg, tape.constant(frames.clone()), query);
    Ok(HeadOutput {
        cls: tape.value_clone(head.cls),
        reg: tape.value_clone(head.reg),
        conf: tape.value_clone(head.conf),
    })
}

// ─────────────────────────── labels, loss, decode ───────────────────────────

/// Spreads target slots over K equal bins by slot center (`⌊c·K⌋`, last bin
/// closed at 1.0); when several slots land in one bin the longest stays.
pub fn assign_bins(slots: &[TimeSlot], bins: usize) -> Vec<Option<TimeSlot>> {
    assert!(bins >= 1, "at least one bin");
    let mut out: Vec<Option<TimeSlot>> = vec![None; bins];
    for slot in slots {
        let k = ((slot.center() * bins as f64).floor() as usize).min(bins - 1);
        let longer = match &out[k] {
            None => true,
            Some(prev) => slot.length() > prev.length(),
        };
        if longer {
            out[k] = Some(*slot);
        }
    }
    out
}

/// Per-bin confidence labels: the temporal IoU between each frame's
/// clamped/swapped regressed slot and the bin's target, zeros for empty
/// bins. Computed on plain values — the confidence branch treats these as
/// fixed labels, so no gradient flows back into the regression through them.
pub fn conf_labels(reg: &Tensor, targets: &[Option<TimeSlot>]) -> Vec<Tensor> {
    let t_frames = reg.rows();
    targets
        .iter()
        .enumerate()
        .map(|(k, target)| {
            let mut iou = Tensor::zeros(vec![t_frames, 1]);
            let Some(slot) = target else { return iou };
            for t in 0..t_frames {
                let mut s = reg.at2(t, 2 * k).clamp(0.0, 1.0);
                let mut e = reg.at2(t, 2 * k + 1).clamp(0.0, 1.0);
                if s > e {
                    std::mem::swap(&mut s, &mut e);
                }
                let v = if e > s {
                    TimeSlot::new(s, e).map(|r| r.tiou(slot)).unwrap_or(0.0)
                } else {
                    0.0
                };
                iou.set2(t, 0, v);
            }
            iou
        })
        .collect()
}

/// Three-branch loss, averaged over bins. Per target bin: per-frame binary
/// cross-entropy on the foreground column (a frame is positive when its
/// center lies inside the target), L1 on the (start, end) pair at positive
/// frames, and cross-entropy pulling the confidence toward the detached
/// [`conf_labels`] of the current regression. Empty bins contribute the
/// all-negative foreground term only.
pub fn grounding_loss(tape: &Tape, head: &HeadVars, targets: &[Option<TimeSlot>]) -> Var {
    let labels = conf_labels(&tape.value_clone(head.reg), targets);
    grounding_loss_with_conf_labels(tape, head, targets, &labels)
}

/// [`grounding_loss`] with the confidence labels supplied by the caller —
/// the form gradient checks need, since the labels are constants of the
/// loss rather than functions of the parameters.
pub fn grounding_loss_with_conf_labels(
    tape: &Tape,
    head: &HeadVars,
    targets: &[Option<TimeSlot>],
    labels: &[Tensor],
) -> Var {
    let t_frames = tape.value(head.cls).rows();
    let bins = targets.len();
    assert_eq!(tape.value(head.cls).cols(), bins, "one target entry per bin");
    assert_eq!(labels.len(), bins, "one confidence label column per bin");
    let mut terms = Vec::with_capacity(bins);
    for (k, target) in targets.iter().enumerate() {
        let cls_col = tape.slice_cols(head.cls, k, 1);
        let Some(slot) = target else {
            terms.push(tape.bce_mean(cls_col, &Tensor::zeros(vec![t_frames, 1])));
            continue;
        };
        let mut indicator = Tensor::zeros(vec![t_frames, 1]);
        let mut positives = Vec::new();
        for t in 0..t_frames {
            let center = (t as f64 + 0.5) / t_frames as f64;
            if center >= slot.start() && center < slot.end() {
                indicator.set2(t, 0, 1.0);
                positives.push(t);
            }
        }
        let mut term = tape.bce_mean(cls_col, &indicator);
        if !positives.is_empty() {
            let reg_cols = tape.slice_cols(head.reg, 2 * k, 2);
            let reg_pos = tape.select_rows(reg_cols, &positives);
            let mut target_rows = Tensor::zeros(vec![positives.len(), 2]);
            for row in 0..positives.len() {
                target_rows.set2(row, 0, slot.start());
                target_rows.set2(row, 1, slot.end());
            }
            term = tape.add(term, tape.l1_mean(reg_pos, &target_rows));
        }
        let conf_col = tape.slice_cols(head.conf, k, 1);
        term = tape.add(term, tape.bce_mean(conf_col, &labels[k]));
        terms.push(term);
    }
    let total = terms.into_iter().reduce(|a, b| tape.add(a, b)).expect("bins >= 1");
    tape.scale(total, 1.0 / bins as f64)
}

/// One decoded grounding proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundedSlot {
    pub slot: TimeSlot,
    /// Foreground score × confidence at the decoded frame.
    pub score: f64,
    /// Bin the proposal came from.
    pub bin: usize,
}

/// Reads at most one slot per bin: the frame with the highest foreground
/// score supplies the (start, end) pair, clamped to [0,1] with inverted
/// boundaries swapped and zero-length results dropped.
pub fn decode_slots(head: &HeadOutput) -> Vec<GroundedSlot> {
    let mut out = Vec::new();
    for k in 0..head.bins() {
        let mut best_frame = 0usize;
        let mut best = f64::NEG_INFINITY;
        for t in 0..head.frames() {
            let v = head.cls.at2(t, k);
            if v > best {
                best = v;
                best_frame = t;
            }
        }
        let mut s = head.reg.at2(best_frame, 2 * k).clamp(0.0, 1.0);
        let mut e = head.reg.at2(best_frame, 2 * k + 1).clamp(0.0, 1.0);
        if s > e {
            std::mem::swap(&mut s, &mut e);
        }
        if e <= s {
            continue;
        }
        out.push(GroundedSlot {
            slot: TimeSlot::new(s, e).expect("clamped non-degenerate slot"),
            score: head.cls.at2(best_frame, k) * head.conf.at2(best_frame, k),
            bin: k,
        });
    }
    out
}

/// Greedy suppression over (slot, score) pairs: descending score, keep a
/// candidate only when its temporal IoU with every kept one stays at or
/// below the threshold. Returns kept indices in rank order.
fn nms_keep(candidates: &[(TimeSlot, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b].1.partial_cmp(&candidates[a].1).unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| candidates[k].0.tiou(&candidates[i].0) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Temporal non-maximum suppression at `threshold`; kept slots come back in
/// descending score order.
pub fn temporal_nms(slots: &[GroundedSlot], threshold: f64) -> Vec<GroundedSlot> {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold in (0, 1]");
    let pairs: Vec<(TimeSlot, f64)> = slots.iter().map(|g| (g.slot, g.score)).collect();
    nms_keep(&pairs, threshold).into_iter().map(|i| slots[i]).collect()
}

/// Inference-time knobs with their standard defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferParams {
    /// Predicate categories kept per query.
    pub top_categories: usize,
    /// Minimum best grounded-slot score; queries under it keep only the
    /// overlap slot.
    pub score_floor: f64,
    /// Temporal NMS threshold.
    pub nms_threshold: f64,
}

impl Default for InferParams {
    fn default() -> Self {
        InferParams { top_categories: 10, score_floor: 0.2, nms_threshold: 0.8 }
    }
}

/// Turns one classified scene into scored triplets.
///
/// Per query: the top categories (background excluded) become candidates;
/// identical (subject, object, category) candidates collapse to their best
/// probability; pairs without temporal overlap drop out. Each survivor is
/// grounded (where `ground` returns head outputs); decoded slots are clamped
/// into the overlap window, and if the best clamped score stays under the
/// floor they are all discarded. The overlap slot itself is always appended
/// at score 1.0, suppression runs at the NMS threshold, and every kept slot
/// becomes a triplet scored category-probability × slot-score, with both
/// tracklets cropped to the slot.
pub fn infer_pipeline(
    tracklets: &[Tracklet],
    queries: &[ClassifiedQuery],
    mut ground: impl FnMut(&GroundingQuery) -> Option<HeadOutput>,
    params: &InferParams,
) -> Vec<RelationTriplet> {
    // (subject, object, category) → best probability.
    let mut candidates: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for q in queries {
        if q.subject == q.object {
            continue;
        }
        let real = &q.probabilities[..q.probabilities.len() - 1];
        let mut order: Vec<usize> = (0..real.len()).collect();
        order.sort_by(|&a, &b| {
            real[b].partial_cmp(&real[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        for &category in order.iter().take(params.top_categories) {
            let key = (q.subject, q.object, category);
            let best = candidates.entry(key).or_insert(f64::NEG_INFINITY);
            *best = best.max(real[category]);
        }
    }

    let mut triplets = Vec::new();
    for (&(s, o, category), &probability) in &candidates {
        let (Ok(sub_slot), Ok(obj_slot)) =
            (tracklets[s].time_slot(), tracklets[o].time_slot())
        else {
            continue;
        };
        let Some(overlap) = sub_slot.overlap(&obj_slot) else {
            continue;
        };
        let query = GroundingQuery {
            subject: tracklets[s].category,
            predicate: category,
            object: tracklets[o].category,
            overlap,
        };
        let mut slots: Vec<(TimeSlot, f64)> = Vec::new();
        if let Some(head) = ground(&query) {
            let clamped: Vec<(TimeSlot, f64)> = decode_slots(&head)
                .into_iter()
                .filter_map(|g| g.slot.overlap(&overlap).map(|slot| (slot, g.score)))
                .collect();
            let best = clamped.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            if best >= params.score_floor {
                slots.extend(clamped);
            }
        }
        slots.push((overlap, 1.0));
        for idx in nms_keep(&slots, params.nms_threshold) {
            let (slot, slot_score) = slots[idx];
            let (Some(subject), Some(object)) =
                (tracklets[s].crop(&slot), tracklets[o].crop(&slot))
            else {
                continue;
            };
            triplets.push(RelationTriplet {
                subject,
                predicate: category,
                object,
                time_slot: slot,
                score: probability * slot_score,
            });
        }
    }
    triplets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    triplets
}

/// Classification-only inference: grounding is bypassed entirely, so each
/// kept (pair, category) yields exactly one triplet on the overlap slot.
pub fn vidvrd_mode(
    tracklets: &[Tracklet],
    queries: &[ClassifiedQuery],
    params: &InferParams,
) -> Vec<RelationTriplet> {
    infer_pipeline(tracklets, queries, |_| None, params)
}
