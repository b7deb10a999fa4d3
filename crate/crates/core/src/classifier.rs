//! Relation classification stage: a Transformer encoder contextualizes the
//! pooled entity vectors, a decoder with role-factored cross-attention turns a
//! fixed set of learned queries into predicate representations plus a soft
//! two-channel (subject / object) adjacency, and a classification head scores
//! predicate categories with a pairwise log-frequency prior added in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::features::{spatial_feature, tracklet_feature_vars, FeatureConfig};
use crate::graph::{TemporalBipartiteGraph, Tracklet};
use crate::nn::{self, seeded_unit_rows, xavier, Bound, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("scene has no entities")]
    EmptyScene,
    #[error("scene has {tracklets} tracklets but {appearance} appearance matrices")]
    AppearanceCount { tracklets: usize, appearance: usize },
    #[error("entity {index}: appearance has {rows} rows but the tracklet spans {frames} frames")]
    AppearanceRows { index: usize, rows: usize, frames: usize },
    #[error("matrix width {got}, expected {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("category index {index} out of range ({count} categories)")]
    CategoryRange { index: usize, count: usize },
}

/// Hyper-parameters of the classification stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Number of predicate queries.
    pub m: usize,
    /// Entity feature width (encoder side).
    pub d_e: usize,
    /// Query width (decoder side).
    pub d_q: usize,
    /// Category embedding width.
    pub d_w: usize,
    /// Hidden width of every two-layer MLP.
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Self-attention heads (encoder and decoder self-attention).
    pub heads: usize,
    /// Entity category count.
    pub entity_categories: usize,
    /// Predicate category count, excluding the background class appended
    /// internally as the last probability column.
    pub predicate_categories: usize,
    pub feature: FeatureConfig,
    /// Seed for parameter initialization and the category embedding tables.
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            m: 192,
            d_e: 512,
            d_q: 512,
            d_w: 300,
            hidden: 512,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 8,
            entity_categories: 10,
            predicate_categories: 8,
            feature: FeatureConfig::default(),
            seed: 0,
        }
    }
}

/// Salts keeping the two embedding tables distinct under one seed.
const ENTITY_EMBED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const PREDICATE_EMBED_SALT: u64 = 0xd2b7_4407_b1ce_6e93;

/// Deterministic unit-vector embedding rows for entity categories.
pub fn entity_embedding_table(seed: u64, categories: usize, d_w: usize) -> Tensor {
    seeded_unit_rows(seed ^ ENTITY_EMBED_SALT, categories, d_w)
}

/// Deterministic unit-vector embedding rows for predicate categories.
pub fn predicate_embedding_table(seed: u64, categories: usize, d_w: usize) -> Tensor {
    seeded_unit_rows(seed ^ PREDICATE_EMBED_SALT, categories, d_w)
}

impl ClassifierConfig {
    /// Builds a freshly initialized parameter store for this configuration.
    ///
    /// Trainable parameters: the feature extractor (`feat.*`), the query
    /// embeddings (`query`), encoder layers (`enc{i}.*`), decoder layers
    /// (`dec{i}.*`), and the classification MLP (`cls.*`). Buffers: the two
    /// category embedding tables and the pairwise log prior (zeros until
    /// [`build_prior`] fills it).
    pub fn init(&self) -> ParamStore {
        assert_eq!(
            self.feature.d_e, self.d_e,
            "feature width must match the encoder width"
        );
        assert!(self.m >= 1 && self.encoder_layers >= 1 && self.decoder_layers >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = ParamStore::new();
        self.feature.init(&mut store, "feat", &mut rng);
        store.insert("query", xavier(&mut rng, self.m, self.d_q));
        for i in 0..self.encoder_layers {
            nn::init_encoder_layer(&mut store, &format!("enc{i}"), self.d_e, self.hidden, &mut rng);
        }
        for i in 0..self.decoder_layers {
            let p = format!("dec{i}");
            nn::init_attention(&mut store, &format!("{p}.self"), self.d_q, &mut rng);
            nn::init_norm(&mut store, &format!("{p}.n1"), self.d_q);
            // Per-role projections of the cross-attention logits carry no bias.
            store.insert(format!("{p}.raca.q1"), xavier(&mut rng, self.d_q, self.d_e));
            store.insert(format!("{p}.raca.q2"), xavier(&mut rng, self.d_q, self.d_e));
            store.insert(format!("{p}.raca.k1"), xavier(&mut rng, self.d_e, self.d_e));
            store.insert(format!("{p}.raca.k2"), xavier(&mut rng, self.d_e, self.d_e));
            nn::init_mlp(&mut store, &format!("{p}.raca.fs"), self.d_e, self.hidden, self.d_q, &mut rng);
            nn::init_mlp(&mut store, &format!("{p}.raca.fo"), self.d_e, self.hidden, self.d_q, &mut rng);
            nn::init_norm(&mut store, &format!("{p}.n2"), self.d_q);
            nn::init_mlp(&mut store, &format!("{p}.ffn"), self.d_q, self.hidden, self.d_q, &mut rng);
            nn::init_norm(&mut store, &format!("{p}.n3"), self.d_q);
        }
        let f_in = self.d_q + 2 * self.d_e + 2 * self.d_w;
        nn::init_mlp(&mut store, "cls", f_in, self.hidden, self.predicate_categories + 1, &mut rng);
        store.insert_buffer(
            "embed.entity",
            entity_embedding_table(self.seed, self.entity_categories, self.d_w),
        );
        store.insert_buffer(
            "embed.pred",
            predicate_embedding_table(self.seed, self.predicate_categories, self.d_w),
        );
        store.insert_buffer(
            "prior",
            Tensor::zeros(vec![
                self.entity_categories,
                self.entity_categories,
                self.predicate_categories,
            ]),
        );
        store
    }
}

// ───────────────────────── attention normalization ──────────────────────────

/// Tape handles for the two-channel attention and its two softmax factors.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// Per-channel normalized attention (entity factor × role factor).
    pub values: [Var; 2],
    /// Softmax over entities within each channel row.
    pub entity: [Var; 2],
    /// Softmax over the two role channels at each (query, entity) cell.
    pub role: [Var; 2],
}

/// Normalizes the two channel logit matrices along both the entity axis
/// (softmax within each row) and the role axis (softmax across the two
/// channels at each cell), returning the elementwise product of the factors.
pub fn normalized_attention(tape: &Tape, a1: Var, a2: Var) -> AttentionVars {
    let entity = [tape.softmax_rows(a1), tape.softmax_rows(a2)];
    // Softmax over two channels is the sigmoid of the logit difference.
    let role = [tape.sigmoid(tape.sub(a1, a2)), tape.sigmoid(tape.sub(a2, a1))];
    let values = [tape.mul(entity[0], role[0]), tape.mul(entity[1], role[1])];
    AttentionVars { values, entity, role }
}

/// The two-channel soft adjacency between queries and entities, with the two
/// normalization factors it was assembled from.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    /// Channel 0 = subject, channel 1 = object; each `m × n`.
    pub values: [Tensor; 2],
    pub entity_factor: [Tensor; 2],
    pub role_factor: [Tensor; 2],
}

impl AttentionTensor {
    /// Normalizes raw channel logits (each `m × n`).
    pub fn from_logits(a1: &Tensor, a2: &Tensor) -> Self {
        let tape = Tape::new();
        let v1 = tape.constant(a1.clone());
        let v2 = tape.constant(a2.clone());
        let vars = normalized_attention(&tape, v1, v2);
        Self::from_vars(&tape, &vars)
    }

    pub fn from_vars(tape: &Tape, vars: &AttentionVars) -> Self {
        let grab = |pair: [Var; 2]| [tape.value_clone(pair[0]), tape.value_clone(pair[1])];
        AttentionTensor {
            values: grab(vars.values),
            entity_factor: grab(vars.entity),
            role_factor: grab(vars.role),
        }
    }

    /// Number of queries (rows).
    pub fn queries(&self) -> usize {
        self.values[0].rows()
    }

    /// Number of entities (columns).
    pub fn entities(&self) -> usize {
        self.values[0].cols()
    }

    /// Largest violation of the normalization laws: entity factors sum to 1
    /// along each row, role factors sum to 1 at each cell, every entry lies in
    /// (0, 1) and never exceeds either of its factors.
    pub fn normalization_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..2 {
            for j in 0..self.queries() {
                let sum: f64 = self.entity_factor[r].row(j).iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        for j in 0..self.queries() {
            for i in 0..self.entities() {
                let role_sum = self.role_factor[0].at2(j, i) + self.role_factor[1].at2(j, i);
                worst = worst.max((role_sum - 1.0).abs());
            }
        }
        for r in 0..2 {
            for (idx, &v) in self.values[r].data().iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    worst = worst.max((v - v.clamp(0.0, 1.0)).abs().max(1.0));
                }
                let bound = self.entity_factor[r].data()[idx].min(self.role_factor[r].data()[idx]);
                worst = worst.max((v - bound).max(0.0));
            }
        }
        worst
    }
}

// ─────────────────────────── forward on the tape ────────────────────────────

/// Stacked self-attention encoder over the pooled entity matrix.
pub fn encoder_forward_vars(tape: &Tape, b: &Bound, cfg: &ClassifierConfig, h: Var) -> Var {
    let mut x = h;
    for i in 0..cfg.encoder_layers {
        x = nn::encoder_layer(tape, b, &format!("enc{i}"), x, cfg.heads);
    }
    x
}

/// Role-factored cross-attention block: two per-role logit channels, the
/// double normalization, and the per-role fusion MLPs.
pub fn raca_forward_vars(
    tape: &Tape,
    b: &Bound,
    prefix: &str,
    q_prime: Var,
    h_tilde: Var,
) -> (Var, AttentionVars) {
    let d_e = tape.value(h_tilde).cols();
    let scale = 1.0 / (d_e as f64).sqrt();
    let channel = |r: usize| {
        let qw = tape.matmul(q_prime, b.var(&format!("{prefix}.q{r}")));
        let kw = tape.matmul(h_tilde, b.var(&format!("{prefix}.k{r}")));
        let kt = tape.transpose(kw);
        tape.scale(tape.matmul(qw, kt), scale)
    };
    let (a1, a2) = (channel(1), channel(2));
    let attention = normalized_attention(tape, a1, a2);
    let v1 = tape.matmul(attention.values[0], h_tilde);
    let v2 = tape.matmul(attention.values[1], h_tilde);
    let s = nn::mlp(tape, b, &format!("{prefix}.fs"), v1);
    let o = nn::mlp(tape, b, &format!("{prefix}.fo"), v2);
    (tape.add(s, o), attention)
}

/// Query stream and last-layer attention out of the stacked decoder.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub queries: Var,
    pub attention: AttentionVars,
}

/// Decoder stack: per layer, self-attention over queries, role-factored
/// cross-attention against the encoded entities, then a feed-forward block,
/// each wrapped in a residual + layer norm.
pub fn decoder_forward_vars(tape: &Tape, b: &Bound, cfg: &ClassifierConfig, h_tilde: Var) -> DecoderVars {
    let mut q = b.var("query");
    let mut last = None;
    for i in 0..cfg.decoder_layers {
        let p = format!("dec{i}");
        let sa = nn::attention(tape, b, &format!("{p}.self"), q, q, cfg.heads);
        let q1 = nn::norm(tape, b, &format!("{p}.n1"), tape.add(q, sa));
        let (fused, attention) = raca_forward_vars(tape, b, &format!("{p}.raca"), q1, h_tilde);
        let q2 = nn::norm(tape, b, &format!("{p}.n2"), tape.add(q1, fused));
        let f = nn::mlp(tape, b, &format!("{p}.ffn"), q2);
        q = nn::norm(tape, b, &format!("{p}.n3"), tape.add(q2, f));
        last = Some(attention);
    }
    DecoderVars { queries: q, attention: last.expect("at least one decoder layer") }
}

// ───────────────────────────── numeric wrappers ─────────────────────────────

fn check_matrix(x: &Tensor, cols: usize) -> Result<(), ClassifierError> {
    if x.cols() != cols {
        return Err(ClassifierError::WidthMismatch { got: x.cols(), expected: cols });
    }
    if !x.is_finite() {
        return Err(ClassifierError::NonFinite);
    }
    Ok(())
}

/// Contextualizes pooled entity vectors (`n × d_e`).
pub fn encoder_forward(
    store: &ParamStore,
    cfg: &ClassifierConfig,
    h: &Tensor,
) -> Result<Tensor, ClassifierError> {
    if h.rows() == 0 {
        return Err(ClassifierError::EmptyScene);
    }
    check_matrix(h, cfg.d_e)?;
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let out = encoder_forward_vars(&tape, &b, cfg, tape.constant(h.clone()));
    Ok(tape.value_clone(out))
}

/// One role-factored cross-attention application with the weights stored
/// under `prefix` (e.g. `"dec0.raca"`).
pub fn raca_forward(
    store: &ParamStore,
    prefix: &str,
    q_prime: &Tensor,
    h_tilde: &Tensor,
) -> Result<(Tensor, AttentionTensor), ClassifierError> {
    if h_tilde.rows() == 0 {
        return Err(ClassifierError::EmptyScene);
    }
    if !q_prime.is_finite() || !h_tilde.is_finite() {
        return Err(ClassifierError::NonFinite);
    }
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let q = tape.constant(q_prime.clone());
    let h = tape.constant(h_tilde.clone());
    let (fused, attention) = raca_forward_vars(&tape, &b, prefix, q, h);
    Ok((tape.value_clone(fused), AttentionTensor::from_vars(&tape, &attention)))
}

/// Runs the decoder against already-encoded entities, returning the final
/// query matrix and the last layer's attention.
pub fn decoder_forward(
    store: &ParamStore,
    cfg: &ClassifierConfig,
    h_tilde: &Tensor,
) -> Result<(Tensor, AttentionTensor), ClassifierError> {
    if h_tilde.rows() == 0 {
        return Err(ClassifierError::EmptyScene);
    }
    check_matrix(h_tilde, cfg.d_e)?;
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let dec = decoder_forward_vars(&tape, &b, cfg, tape.constant(h_tilde.clone()));
    Ok((
        tape.value_clone(dec.queries),
        AttentionTensor::from_vars(&tape, &dec.attention),
    ))
}

/// Per-query (subject, object) entity indices: the argmax of each channel
/// row, ties broken toward the lowest entity index.
pub fn select_edges(attention: &AttentionTensor) -> Vec<(usize, usize)> {
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    (0..attention.queries())
        .map(|j| (argmax(attention.values[0].row(j)), argmax(attention.values[1].row(j))))
        .collect()
}

/// Predicate category distribution for one query: softmax of the
/// classification MLP applied to `[q̃; h_s; h_o; Π(c_s); Π(c_o)]` plus the
/// pair's prior row. The output length equals the prior row's length.
pub fn predicate_logits(
    store: &ParamStore,
    q_row: &Tensor,
    h_s: &Tensor,
    h_o: &Tensor,
    subject_category: usize,
    object_category: usize,
    prior_row: &[f64],
) -> Result<Vec<f64>, ClassifierError> {
    let table = store.get("embed.entity");
    for cat in [subject_category, object_category] {
        if cat >= table.rows() {
            return Err(ClassifierError::CategoryRange { index: cat, count: table.rows() });
        }
    }
    let out_cols = store.get("cls.l2.w").cols();
    if prior_row.len() != out_cols {
        return Err(ClassifierError::WidthMismatch { got: prior_row.len(), expected: out_cols });
    }
    let mut feature = Vec::new();
    for part in [q_row.data(), h_s.data(), h_o.data(), table.row(subject_category), table.row(object_category)] {
        feature.extend_from_slice(part);
    }
    let expected = store.get("cls.l1.w").rows();
    if feature.len() != expected {
        return Err(ClassifierError::WidthMismatch { got: feature.len(), expected });
    }
    if feature.iter().any(|v| !v.is_finite()) || prior_row.iter().any(|v| !v.is_finite()) {
        return Err(ClassifierError::NonFinite);
    }
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let f = tape.constant(Tensor::new(vec![1, feature.len()], feature));
    let logits = nn::mlp(&tape, &b, "cls", f);
    let prior = tape.constant(Tensor::new(vec![1, prior_row.len()], prior_row.to_vec()));
    let probs = tape.softmax_rows(tape.add(logits, prior));
    Ok(tape.value_clone(probs).into_data())
}

/// Smoothed log-frequency prior over (subject category, object category,
/// predicate category) triplets, counted per predicate node of the training
/// graphs: `ln((count(s,o,p) + ε) / (count(s,o) + ε·|C_p|))` with Laplace
/// smoothing ε = 1, so sparse corpora fall back toward a uniform prior
/// instead of vetoing unseen combinations.
pub fn build_prior(
    graphs: &[TemporalBipartiteGraph],
    entity_categories: usize,
    predicate_categories: usize,
) -> Tensor {
    const EPS: f64 = 1.0;
    let mut counts = Tensor::zeros(vec![entity_categories, entity_categories, predicate_categories]);
    for g in graphs {
        for node in &g.predicates {
            let s = g.entities[node.subject_idx].category;
            let o = g.entities[node.object_idx].category;
            assert!(
                s < entity_categories && o < entity_categories && node.category < predicate_categories,
                "category out of range while counting triplets"
            );
            let c = counts.at3(s, o, node.category);
            counts.set3(s, o, node.category, c + 1.0);
        }
    }
    let mut prior = Tensor::zeros(vec![entity_categories, entity_categories, predicate_categories]);
    for s in 0..entity_categories {
        for o in 0..entity_categories {
            let pair: f64 = (0..predicate_categories).map(|p| counts.at3(s, o, p)).sum();
            let denom = pair + EPS * predicate_categories as f64;
            for p in 0..predicate_categories {
                prior.set3(s, o, p, ((counts.at3(s, o, p) + EPS) / denom).ln());
            }
        }
    }
    prior
}

// ─────────────────────────── full-scene forward ─────────────────────────────

/// Tape handles produced by one full classification pass over a scene.
pub struct ClassifierForward {
    /// Pooled entity features, `n × d_e`.
    pub pooled: Var,
    /// Encoder output, `n × d_e`.
    pub encoded: Var,
    /// Final query matrix, `m × d_q`.
    pub queries: Var,
    /// Last decoder layer's two-channel attention.
    pub attention: AttentionVars,
    /// Per-query category distribution, `m × (predicate_categories + 1)`;
    /// the last column is the background class.
    pub probabilities: Var,
    /// Selected (subject, object) entity indices per query.
    pub edges: Vec<(usize, usize)>,
}

/// Builds the whole classification stage on `tape`: features → encoder →
/// decoder → edge selection → category head. Inputs must already be
/// validated (see [`classify_scene`] for the checked entry point).
pub fn classifier_forward(
    tape: &Tape,
    b: &Bound,
    cfg: &ClassifierConfig,
    tracklets: &[Tracklet],
    appearance: &[Tensor],
) -> ClassifierForward {
    let pooled_rows: Vec<Var> = tracklets
        .iter()
        .zip(appearance)
        .map(|(t, a)| {
            let av = tape.constant(a.clone());
            let sv = tape.constant(spatial_feature(t));
            tracklet_feature_vars(tape, b, "feat", av, sv, cfg.feature.pool_len).1
        })
        .collect();
    let pooled =
        if pooled_rows.len() == 1 { pooled_rows[0] } else { tape.concat_rows(&pooled_rows) };
    let encoded = encoder_forward_vars(tape, b, cfg, pooled);
    let dec = decoder_forward_vars(tape, b, cfg, encoded);

    // Edge selection is a hard argmax read off the running forward values;
    // gradients flow through the attention itself, not the selection.
    let snapshot = AttentionTensor::from_vars(tape, &dec.attention);
    let edges = select_edges(&snapshot);
    let subjects: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let objects: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let h_s = tape.select_rows(encoded, &subjects);
    let h_o = tape.select_rows(encoded, &objects);
    let table = b.var("embed.entity");
    let subject_cats: Vec<usize> = subjects.iter().map(|&i| tracklets[i].category).collect();
    let object_cats: Vec<usize> = objects.iter().map(|&i| tracklets[i].category).collect();
    let e_s = tape.select_rows(table, &subject_cats);
    let e_o = tape.select_rows(table, &object_cats);

    // Prior rows are fixed statistics: looked up numerically per query for
    // the detected pair, with a zero appended for the background column.
    let prior = tape.value_clone(b.var("prior"));
    let categories = prior.shape()[2];
    let mut rows = Tensor::zeros(vec![cfg.m, categories + 1]);
    for (j, (&cs, &co)) in subject_cats.iter().zip(&object_cats).enumerate() {
        for p in 0..categories {
            rows.set2(j, p, prior.at3(cs, co, p));
        }
    }
    let prior_rows = tape.constant(rows);

    let feature = tape.concat_cols(&[dec.queries, h_s, h_o, e_s, e_o]);
    let logits = nn::mlp(tape, b, "cls", feature);
    let probabilities = tape.softmax_rows(tape.add(logits, prior_rows));
    ClassifierForward {
        pooled,
        encoded,
        queries: dec.queries,
        attention: dec.attention,
        probabilities,
        edges,
    }
}

/// One classified query: the selected entity pair and the category
/// distribution (background last).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifiedQuery {
    pub subject: usize,
    pub object: usize,
    pub probabilities: Vec<f64>,
}

/// Validated inference over one scene.
pub fn classify_scene(
    store: &ParamStore,
    cfg: &ClassifierConfig,
    tracklets: &[Tracklet],
    appearance: &[Tensor],
) -> Result<Vec<ClassifiedQuery>, ClassifierError> {
    if tracklets.is_empty() {
        return Err(ClassifierError::EmptyScene);
    }
    if tracklets.len() != appearance.len() {
        return Err(ClassifierError::AppearanceCount {
            tracklets: tracklets.len(),
            appearance: appearance.len(),
        });
    }
    for (i, (t, a)) in tracklets.iter().zip(appearance).enumerate() {
        if a.rows() != t.len() {
            return Err(ClassifierError::AppearanceRows { index: i, rows: a.rows(), frames: t.len() });
        }
        check_matrix(a, cfg.feature.d_a)?;
        if t.category >= cfg.entity_categories {
            return Err(ClassifierError::CategoryRange {
                index: t.category,
                count: cfg.entity_categories,
            });
        }
    }
    let tape = Tape::new();
    let b = Bound::bind(&tape, store);
    let fwd = classifier_forward(&tape, &b, cfg, tracklets, appearance);
    let probs = tape.value_clone(fwd.probabilities);
    Ok(fwd
        .edges
        .iter()
        .enumerate()
        .map(|(j, &(s, o))| ClassifiedQuery {
            subject: s,
            object: o,
            probabilities: probs.row(j).to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_diff_grads, max_rel_error};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            m: 3,
            d_e: 8,
            d_q: 8,
            d_w: 4,
            hidden: 6,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            entity_categories: 4,
            predicate_categories: 3,
            feature: FeatureConfig { d_a: 5, d_e: 8, hidden: 6, pool_len: 2 },
            seed: 11,
        }
    }

    fn tracklet(id: usize, category: usize, start: usize, boxes: usize) -> Tracklet {
        Tracklet {
            id,
            category,
            start_frame: start,
            frame_count: 16,
            boxes: (0..boxes)
                .map(|k| {
                    let t = 0.05 * (k as f64 + id as f64);
                    [t, t, t + 0.3, t + 0.2]
                })
                .collect(),
        }
    }

    fn scene(cfg: &ClassifierConfig, n: usize) -> (Vec<Tracklet>, Vec<Tensor>) {
        let tracklets: Vec<Tracklet> =
            (0..n).map(|i| tracklet(i, i % cfg.entity_categories, i, 3 + i)).collect();
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let appearance = tracklets
            .iter()
            .map(|t| {
                Tensor::new(
                    vec![t.len(), cfg.feature.d_a],
                    (0..t.len() * cfg.feature.d_a).map(|_| next()).collect(),
                )
            })
            .collect();
        (tracklets, appearance)
    }

    #[test]
    fn worked_attention_example() {
        let a1 = Tensor::new(vec![1, 2], vec![2.0, 0.0]);
        let a2 = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let att = AttentionTensor::from_logits(&a1, &a2);
        assert_abs_diff_eq!(att.values[0].at2(0, 0), 0.7758, epsilon = 1e-3);
        assert_abs_diff_eq!(att.values[0].at2(0, 1), 0.0596, epsilon = 1e-3);
        assert_abs_diff_eq!(att.values[1].at2(0, 0), 0.0596, epsilon = 1e-3);
        assert_abs_diff_eq!(att.values[1].at2(0, 1), 0.25, epsilon = 1e-3);
        assert!(att.normalization_error() < 1e-12);
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let mut store = ParamStore::new();
        for name in ["q1", "q2", "k1", "k2"] {
            store.insert(format!("raca.{name}"), Tensor::zeros(vec![4, 4]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        nn::init_mlp(&mut store, "raca.fs", 4, 5, 4, &mut rng);
        nn::init_mlp(&mut store, "raca.fo", 4, 5, 4, &mut rng);
        let q = xavier(&mut rng, 2, 4);
        let h = xavier(&mut rng, 3, 4);
        let (_, att) = raca_forward(&store, "raca", &q, &h).unwrap();
        for r in 0..2 {
            for &v in att.values[r].data() {
                assert_abs_diff_eq!(v, 1.0 / 6.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_entity_reduces_to_role_softmax() {
        let a1 = Tensor::new(vec![2, 1], vec![1.5, -0.25]);
        let a2 = Tensor::new(vec![2, 1], vec![0.5, 0.5]);
        let att = AttentionTensor::from_logits(&a1, &a2);
        for j in 0..2 {
            assert_abs_diff_eq!(att.entity_factor[0].at2(j, 0), 1.0, epsilon = 1e-15);
            let diff = a1.at2(j, 0) - a2.at2(j, 0);
            let sig = 1.0 / (1.0 + (-diff).exp());
            assert_abs_diff_eq!(att.values[0].at2(j, 0), sig, epsilon = 1e-12);
            assert_abs_diff_eq!(att.values[1].at2(j, 0), 1.0 - sig, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalization_invariants_on_random_logits() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 30) as f64) - 2.0
        };
        for trial in 0..50 {
            let m = 1 + trial % 5;
            let n = 1 + (trial / 5) % 6;
            let a1 = Tensor::new(vec![m, n], (0..m * n).map(|_| 4.0 * next()).collect());
            let a2 = Tensor::new(vec![m, n], (0..m * n).map(|_| 4.0 * next()).collect());
            let att = AttentionTensor::from_logits(&a1, &a2);
            assert!(att.normalization_error() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn edge_selection_argmax_and_ties() {
        let att = AttentionTensor::from_logits(
            &Tensor::new(vec![1, 2], vec![0.0, 1.0]),
            &Tensor::new(vec![1, 2], vec![1.0, 0.0]),
        );
        assert_eq!(select_edges(&att), vec![(1, 0)]);
        let tie = AttentionTensor::from_logits(
            &Tensor::new(vec![1, 2], vec![0.3, 0.3]),
            &Tensor::new(vec![1, 2], vec![0.3, 0.3]),
        );
        assert_eq!(select_edges(&tie), vec![(0, 0)]);
    }

    // Scaling every logit by a positive constant does NOT in general preserve
    // the argmax of the normalized product: the entity factor responds to the
    // within-row order while the role factor responds to the cross-channel
    // difference, and scaling reweights the two. (Counterexample: row logits
    // a1 = [1.0, 0.8], a2 = [1.0, -2.2]; the channel-1 argmax flips from
    // entity 1 to entity 0 when both channels are scaled by 5.) The laws that
    // do hold: a per-row additive shift applied to both channels leaves the
    // normalized attention unchanged, and the entity factor alone is
    // order-preserved under any monotone logit transform.
    #[test]
    fn row_shifts_leave_attention_unchanged() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 30) as f64) - 2.0
        };
        for _ in 0..20 {
            let (m, n) = (4, 5);
            let a1 = Tensor::new(vec![m, n], (0..m * n).map(|_| next()).collect());
            let a2 = Tensor::new(vec![m, n], (0..m * n).map(|_| next()).collect());
            let shifts: Vec<f64> = (0..m).map(|_| next()).collect();
            let shifted = |a: &Tensor| {
                let mut out = a.clone();
                for j in 0..m {
                    for v in out.row_mut(j) {
                        *v += shifts[j];
                    }
                }
                out
            };
            let base = AttentionTensor::from_logits(&a1, &a2);
            let moved = AttentionTensor::from_logits(&shifted(&a1), &shifted(&a2));
            for r in 0..2 {
                for (x, y) in base.values[r].data().iter().zip(moved.values[r].data()) {
                    assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
                }
            }
            assert_eq!(select_edges(&base), select_edges(&moved));
        }
    }

    #[test]
    fn entity_factor_order_survives_positive_scaling() {
        let a1 = Tensor::new(vec![1, 2], vec![1.0, 0.8]);
        let a2 = Tensor::new(vec![1, 2], vec![1.0, -2.2]);
        let base = AttentionTensor::from_logits(&a1, &a2);
        let scaled =
            AttentionTensor::from_logits(&a1.map(|v| 5.0 * v), &a2.map(|v| 5.0 * v));
        for att in [&base, &scaled] {
            assert!(att.entity_factor[0].at2(0, 0) > att.entity_factor[0].at2(0, 1));
        }
        // And the documented product flip really happens.
        assert_eq!(select_edges(&base)[0].0, 1);
        assert_eq!(select_edges(&scaled)[0].0, 0);
    }

    fn zero_cls_store(d_q: usize, d_e: usize, d_w: usize, cats: usize, out: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let f_in = d_q + 2 * d_e + 2 * d_w;
        store.insert("cls.l1.w", Tensor::zeros(vec![f_in, 4]));
        store.insert("cls.l1.b", Tensor::zeros(vec![4]));
        store.insert("cls.l2.w", Tensor::zeros(vec![4, out]));
        store.insert("cls.l2.b", Tensor::zeros(vec![out]));
        store.insert_buffer("embed.entity", seeded_unit_rows(1, cats, d_w));
        store
    }

    #[test]
    fn prior_passes_through_zeroed_head() {
        let store = zero_cls_store(3, 2, 2, 3, 3);
        let q = Tensor::zeros(vec![1, 3]);
        let h = Tensor::zeros(vec![1, 2]);
        let prior = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        let p = predicate_logits(&store, &q, &h, &h, 0, 1, &prior).unwrap();
        assert_abs_diff_eq!(p[0], 0.7, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(p[2], 0.1, epsilon = 1e-9);

        let store4 = zero_cls_store(3, 2, 2, 3, 4);
        let p4 = predicate_logits(&store4, &q, &h, &h, 2, 0, &[0.0; 4]).unwrap();
        for v in p4 {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn predicate_distribution_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        nn::init_mlp(&mut store, "cls", 3 + 2 * 2 + 2 * 2, 5, 4, &mut rng);
        store.insert_buffer("embed.entity", seeded_unit_rows(2, 3, 2));
        let q = xavier(&mut rng, 1, 3);
        let h_s = xavier(&mut rng, 1, 2);
        let h_o = xavier(&mut rng, 1, 2);
        let p = predicate_logits(&store, &q, &h_s, &h_o, 0, 2, &[0.1, -0.3, 0.0, 0.2]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0));
        assert!(matches!(
            predicate_logits(&store, &q, &h_s, &h_o, 5, 0, &[0.0; 4]),
            Err(ClassifierError::CategoryRange { .. })
        ));
        assert!(matches!(
            predicate_logits(&store, &q, &h_s, &h_o, 0, 1, &[0.0; 3]),
            Err(ClassifierError::WidthMismatch { .. })
        ));
    }

    fn graph_with_counts() -> TemporalBipartiteGraph {
        use crate::graph::{PredicateNode, TimeSlot};
        let slot = TimeSlot::new(0.0, 0.5).unwrap();
        let entities = vec![tracklet(0, 0, 0, 4), tracklet(1, 1, 0, 4)];
        let node = |category| PredicateNode {
            category,
            subject_idx: 0,
            object_idx: 1,
            time_slots: vec![slot],
            score: 1.0,
        };
        TemporalBipartiteGraph {
            entities,
            predicates: vec![node(0), node(0), node(0), node(1)],
        }
    }

    #[test]
    fn prior_matches_direct_arithmetic() {
        let prior = build_prior(&[graph_with_counts()], 2, 2);
        assert_abs_diff_eq!(prior.at3(0, 1, 0), (4.0f64 / 6.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(prior.at3(0, 1, 1), (2.0f64 / 6.0).ln(), epsilon = 1e-12);
        // Unseen pair: uniform row.
        assert_abs_diff_eq!(prior.at3(1, 0, 0), prior.at3(1, 0, 1), epsilon = 1e-15);
        // The observed predicate dominates its pair's row.
        assert!(prior.at3(0, 1, 0) > prior.at3(0, 1, 1));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let cfg = tiny_cfg();
        let store = cfg.init();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = xavier(&mut rng, 4, cfg.d_e);
        let out = encoder_forward(&store, &cfg, &h).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>());
        let out_p = encoder_forward(&store, &cfg, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..cfg.d_e {
                assert_abs_diff_eq!(out_p.at2(k, c), out.at2(i, c), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let store = cfg.init();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = xavier(&mut rng, 3, cfg.d_e);

        let loss = |s: &ParamStore| {
            let tape = Tape::new();
            let b = Bound::bind(&tape, s);
            let dec = decoder_forward_vars(&tape, &b, &cfg, tape.constant(h.clone()));
            let both = tape.concat_cols(&[dec.attention.values[0], dec.attention.values[1]]);
            let l = tape.add(tape.mean(dec.queries), tape.mean(both));
            tape.item(l)
        };

        let tape = Tape::new();
        let b = Bound::bind(&tape, &store);
        let dec = decoder_forward_vars(&tape, &b, &cfg, tape.constant(h.clone()));
        let both = tape.concat_cols(&[dec.attention.values[0], dec.attention.values[1]]);
        let l = tape.add(tape.mean(dec.queries), tape.mean(both));
        let grads = tape.backward(l);
        let analytic = b.collect_grads(&grads, &store);
        let numeric = central_diff_grads(&store, 1e-5, loss);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn full_stage_is_permutation_equivariant() {
        let cfg = tiny_cfg();
        let store = cfg.init();
        let (tracklets, appearance) = scene(&cfg, 4);
        let base = classify_scene(&store, &cfg, &tracklets, &appearance).unwrap();

        let perm = [3usize, 1, 0, 2];
        let tr_p: Vec<Tracklet> = perm.iter().map(|&i| tracklets[i].clone()).collect();
        let ap_p: Vec<Tensor> = perm.iter().map(|&i| appearance[i].clone()).collect();
        let permuted = classify_scene(&store, &cfg, &tr_p, &ap_p).unwrap();

        // new index -> old index is `perm`; invert it to map old to new.
        let mut inverse = [0usize; 4];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        for (b, p) in base.iter().zip(&permuted) {
            assert_eq!(inverse[b.subject], p.subject);
            assert_eq!(inverse[b.object], p.object);
            for (x, y) in b.probabilities.iter().zip(&p.probabilities) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn scene_validation_rejects_bad_input() {
        let cfg = tiny_cfg();
        let store = cfg.init();
        let (tracklets, mut appearance) = scene(&cfg, 2);
        assert!(matches!(
            classify_scene(&store, &cfg, &[], &[]),
            Err(ClassifierError::EmptyScene)
        ));
        assert!(matches!(
            classify_scene(&store, &cfg, &tracklets, &appearance[..1]),
            Err(ClassifierError::AppearanceCount { .. })
        ));
        appearance[0].data_mut()[0] = f64::NAN;
        assert!(matches!(
            classify_scene(&store, &cfg, &tracklets, &appearance),
            Err(ClassifierError::NonFinite)
        ));
        let (tracklets, appearance) = scene(&cfg, 2);
        let narrow: Vec<Tensor> =
            appearance.iter().map(|a| Tensor::zeros(vec![a.rows(), 3])).collect();
        assert!(matches!(
            classify_scene(&store, &cfg, &tracklets, &narrow),
            Err(ClassifierError::WidthMismatch { .. })
        ));
        let mut probs_ok = classify_scene(&store, &cfg, &tracklets, &appearance).unwrap();
        let q = probs_ok.pop().unwrap();
        assert_eq!(q.probabilities.len(), cfg.predicate_categories + 1);
        assert!((q.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
