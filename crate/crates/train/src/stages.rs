//! Epoch drivers for the two stages: deterministic shuffling, per-batch
//! gradient accumulation, adaptive-moment updates under a milestone
//! learning-rate schedule, and per-epoch hooks for logging and checkpoints.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use vidsgg_core::autodiff::{Tape, Tensor};
use vidsgg_core::classifier::{build_prior, classifier_forward, ClassifierConfig};
use vidsgg_core::graph::{GraphError, TimeSlot};
use vidsgg_core::grounding::{assign_bins, grounding_forward_vars, grounding_loss, GroundingConfig, GroundingQuery};
use vidsgg_core::matching::{gt_assignment, stage_loss, GtAssignment, MatchingError};
use vidsgg_core::nn::{Bound, ParamStore};
use vidsgg_data::SceneRecord;

use crate::optim::{Adam, LrSchedule};

/// Errors raised by an epoch hook; training aborts and surfaces them.
pub type HookError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training scenes")]
    EmptyCorpus,
    #[error("no relation queries: every scene's subject-object pairs are temporally disjoint")]
    NoQueries,
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("scene {video}: precomputed features are missing")]
    MissingFeatures { video: String },
    #[error("scene {video}: feature width {got} does not match the configured {expected}")]
    FeatureWidth { video: String, got: usize, expected: usize },
    #[error("scene {video}: {nodes} ground-truth predicate nodes exceed the {queries} queries")]
    TooManyNodes { video: String, nodes: usize, queries: usize },
    #[error("scene {video}: category {index} out of range (count {count})")]
    CategoryRange { video: String, index: usize, count: usize },
    #[error("non-finite loss at epoch {epoch} on scene {video}")]
    NonFinite { epoch: usize, video: String },
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("epoch hook failed: {0}")]
    Hook(#[source] HookError),
}

/// Loop hyper-parameters shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Adjacency loss factor in the classification matching cost and loss.
    pub lambda: f64,
    /// Seed of the per-epoch shuffling only; parameter initialization is
    /// owned by the model configs.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 8,
            schedule: LrSchedule::constant(1e-4),
            lambda: 30.0,
            seed: 0,
        }
    }
}

/// One epoch's summary, in the order epochs ran.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss per scene (classification) or per query (grounding).
    pub loss: f64,
}

fn shuffled(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    order
}

fn accumulate(total: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match total.get_mut(&name) {
            Some(t) => t.add_assign(&g),
            None => {
                total.insert(name, g);
            }
        }
    }
}

fn mean_grads(total: &mut BTreeMap<String, Tensor>, count: usize) {
    let inv = 1.0 / count.max(1) as f64;
    for t in total.values_mut() {
        *t = t.map(|v| v * inv);
    }
}

/// Trains the classification stage in place. The pairwise category prior is
/// rebuilt from the training split before the first step, scenes are
/// shuffled per epoch with a seed-derived stream, gradients are averaged per
/// batch, and `on_epoch` runs after every epoch (checkpoints, CSV rows).
pub fn train_classifier(
    store: &mut ParamStore,
    cfg: &ClassifierConfig,
    scenes: &[SceneRecord],
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ParamStore) -> Result<(), HookError>,
) -> Result<Vec<EpochStats>, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if tcfg.batch_size == 0 {
        return Err(TrainError::BatchSize);
    }
    let graphs: Vec<_> = scenes.iter().map(|s| s.graph()).collect();
    for (scene, graph) in scenes.iter().zip(&graphs) {
        if scene.appearance.len() != scene.tracklets.len() {
            return Err(TrainError::MissingFeatures { video: scene.video_id.clone() });
        }
        for a in &scene.appearance {
            if a.cols() != cfg.feature.d_a {
                return Err(TrainError::FeatureWidth {
                    video: scene.video_id.clone(),
                    got: a.cols(),
                    expected: cfg.feature.d_a,
                });
            }
        }
        for t in &scene.tracklets {
            if t.category >= cfg.entity_categories {
                return Err(TrainError::CategoryRange {
                    video: scene.video_id.clone(),
                    index: t.category,
                    count: cfg.entity_categories,
                });
            }
        }
        if graph.predicates.len() > cfg.m {
            return Err(TrainError::TooManyNodes {
                video: scene.video_id.clone(),
                nodes: graph.predicates.len(),
                queries: cfg.m,
            });
        }
    }
    *store.get_mut("prior") =
        build_prior(&graphs, cfg.entity_categories, cfg.predicate_categories);
    let assignments: Vec<GtAssignment> = scenes
        .iter()
        .zip(&graphs)
        .map(|(s, g)| gt_assignment(&s.tracklets, g))
        .collect();

    let mut adam = Adam::new();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.schedule.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for batch in shuffled(scenes.len(), tcfg.seed, epoch).chunks(tcfg.batch_size) {
            let mut total = BTreeMap::new();
            for &i in batch {
                let scene = &scenes[i];
                let tape = Tape::new();
                let b = Bound::bind(&tape, store);
                let fwd = classifier_forward(&tape, &b, cfg, &scene.tracklets, &scene.appearance);
                let sl =
                    stage_loss(&tape, fwd.probabilities, fwd.attention.values, &assignments[i], tcfg.lambda)?;
                let value = tape.value(sl.loss).item();
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { epoch, video: scene.video_id.clone() });
                }
                epoch_loss += value;
                let grads = tape.backward(sl.loss);
                accumulate(&mut total, b.collect_grads(&grads, store));
            }
            mean_grads(&mut total, batch.len());
            adam.step(store, &total, lr);
        }
        let stats = EpochStats { epoch, lr, loss: epoch_loss / scenes.len() as f64 };
        on_epoch(&stats, store).map_err(TrainError::Hook)?;
        history.push(stats);
    }
    Ok(history)
}

/// One grounding training example: a scene's frame features drive one query
/// per ground-truth predicate node with temporally overlapping tracklets.
struct QueryItem {
    query: GroundingQuery,
    targets: Vec<Option<TimeSlot>>,
}

fn scene_queries(
    scene: &SceneRecord,
    cfg: &GroundingConfig,
) -> Result<Vec<QueryItem>, TrainError> {
    let graph = scene.graph();
    let mut items = Vec::new();
    for node in &graph.predicates {
        let subject = &graph.entities[node.subject_idx];
        let object = &graph.entities[node.object_idx];
        for (cat, count) in [
            (subject.category, cfg.entity_categories),
            (object.category, cfg.entity_categories),
            (node.category, cfg.predicate_categories),
        ] {
            if cat >= count {
                return Err(TrainError::CategoryRange {
                    video: scene.video_id.clone(),
                    index: cat,
                    count,
                });
            }
        }
        let overlap = match subject.time_slot()?.overlap(&object.time_slot()?) {
            Some(o) => o,
            // Queries exist only for temporally overlapping pairs.
            None => continue,
        };
        items.push(QueryItem {
            query: GroundingQuery {
                subject: subject.category,
                predicate: node.category,
                object: object.category,
                overlap,
            },
            targets: assign_bins(&node.time_slots, cfg.bins),
        });
    }
    Ok(items)
}

/// Trains the grounding stage in place on ground-truth triplet categories.
/// A batch is `batch_size` scenes; gradients are averaged over the queries
/// those scenes contribute.
pub fn train_grounding(
    store: &mut ParamStore,
    cfg: &GroundingConfig,
    scenes: &[SceneRecord],
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ParamStore) -> Result<(), HookError>,
) -> Result<Vec<EpochStats>, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if tcfg.batch_size == 0 {
        return Err(TrainError::BatchSize);
    }
    let mut frames = Vec::with_capacity(scenes.len());
    let mut queries = Vec::with_capacity(scenes.len());
    let mut query_count = 0usize;
    for scene in scenes {
        let f = scene
            .frames
            .as_ref()
            .ok_or_else(|| TrainError::MissingFeatures { video: scene.video_id.clone() })?;
        if f.cols() != cfg.d_v {
            return Err(TrainError::FeatureWidth {
                video: scene.video_id.clone(),
                got: f.cols(),
                expected: cfg.d_v,
            });
        }
        let items = scene_queries(scene, cfg)?;
        query_count += items.len();
        frames.push(f);
        queries.push(items);
    }
    if query_count == 0 {
        return Err(TrainError::NoQueries);
    }

    let mut adam = Adam::new();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.schedule.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for batch in shuffled(scenes.len(), tcfg.seed, epoch).chunks(tcfg.batch_size) {
            let mut total = BTreeMap::new();
            let mut batch_queries = 0usize;
            for &i in batch {
                for item in &queries[i] {
                    let tape = Tape::new();
                    let b = Bound::bind(&tape, store);
                    let f = tape.constant(frames[i].clone());
                    let head = grounding_forward_vars(&tape, &b, cfg, f, &item.query);
                    let loss = grounding_loss(&tape, &head, &item.targets);
                    let value = tape.value(loss).item();
                    if !value.is_finite() {
                        return Err(TrainError::NonFinite {
                            epoch,
                            video: scenes[i].video_id.clone(),
                        });
                    }
                    epoch_loss += value;
                    let grads = tape.backward(loss);
                    accumulate(&mut total, b.collect_grads(&grads, store));
                    batch_queries += 1;
                }
            }
            if batch_queries == 0 {
                continue;
            }
            mean_grads(&mut total, batch_queries);
            adam.step(store, &total, lr);
        }
        let stats = EpochStats { epoch, lr, loss: epoch_loss / query_count as f64 };
        on_epoch(&stats, store).map_err(TrainError::Hook)?;
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vidsgg_core::features::FeatureConfig;
    use vidsgg_data::{generate_scene, SynthConfig};

    fn tiny_scenes(count: usize) -> Vec<SceneRecord> {
        let base = SynthConfig {
            frames: 16,
            entity_range: (3, 4),
            relation_range: (2, 3),
            ..SynthConfig::default()
        };
        (0..count)
            .map(|i| generate_scene(&SynthConfig { seed: 100 + i as u64, ..base }))
            .collect()
    }

    fn tiny_classifier() -> ClassifierConfig {
        ClassifierConfig {
            m: 8,
            d_e: 16,
            d_q: 16,
            d_w: 8,
            hidden: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            entity_categories: 10,
            predicate_categories: 8,
            feature: FeatureConfig { d_a: 32, d_e: 16, hidden: 16, pool_len: 4 },
            seed: 7,
        }
    }

    fn tiny_grounding() -> GroundingConfig {
        GroundingConfig {
            d_v: 32,
            d_w: 8,
            d: 16,
            hidden: 16,
            bins: 4,
            heads: 2,
            use_frame_positions: true,
            entity_categories: 10,
            predicate_categories: 8,
            seed: 7,
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            schedule: LrSchedule::constant(1e-3),
            lambda: 30.0,
            seed: 3,
        }
    }

    #[test]
    fn classifier_loss_drops_and_reruns_identically() {
        let scenes = tiny_scenes(3);
        let cfg = tiny_classifier();
        let run = || {
            let mut store = cfg.init();
            train_classifier(&mut store, &cfg, &scenes, &quick(6), |_, _| Ok(())).unwrap()
        };
        let history = run();
        assert_eq!(history.len(), 6);
        assert!(
            history.last().unwrap().loss < history[0].loss,
            "loss failed to drop: {history:?}"
        );
        assert_eq!(run(), history);
    }

    #[test]
    fn classifier_installs_the_corpus_prior() {
        let scenes = tiny_scenes(2);
        let cfg = tiny_classifier();
        let mut store = cfg.init();
        let before = store.get("prior").clone();
        train_classifier(&mut store, &cfg, &scenes, &quick(1), |_, _| Ok(())).unwrap();
        let graphs: Vec<_> = scenes.iter().map(|s| s.graph()).collect();
        let expected = build_prior(&graphs, cfg.entity_categories, cfg.predicate_categories);
        assert_ne!(&before, store.get("prior"));
        assert_eq!(store.get("prior"), &expected);
    }

    #[test]
    fn grounding_loss_drops_and_reruns_identically() {
        let scenes = tiny_scenes(3);
        let cfg = tiny_grounding();
        let run = || {
            let mut store = cfg.init();
            train_grounding(&mut store, &cfg, &scenes, &quick(6), |_, _| Ok(())).unwrap()
        };
        let history = run();
        assert_eq!(history.len(), 6);
        assert!(
            history.last().unwrap().loss < history[0].loss,
            "loss failed to drop: {history:?}"
        );
        assert_eq!(run(), history);
    }

    #[test]
    fn epoch_hook_sees_every_epoch_and_can_abort() {
        let scenes = tiny_scenes(2);
        let cfg = tiny_grounding();
        let mut store = cfg.init();
        let mut seen = Vec::new();
        train_grounding(&mut store, &cfg, &scenes, &quick(3), |stats, _| {
            seen.push(stats.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);

        let mut store = cfg.init();
        let err = train_grounding(&mut store, &cfg, &scenes, &quick(3), |stats, _| {
            if stats.epoch == 1 {
                Err("disk full".into())
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, TrainError::Hook(_)), "{err}");
    }

    #[test]
    fn schedule_is_recorded_in_the_history() {
        let scenes = tiny_scenes(2);
        let cfg = tiny_grounding();
        let mut store = cfg.init();
        let tcfg = TrainConfig {
            epochs: 3,
            schedule: LrSchedule::with_milestones(1e-3, vec![(2, 1e-4)]),
            ..quick(3)
        };
        let history = train_grounding(&mut store, &cfg, &scenes, &tcfg, |_, _| Ok(())).unwrap();
        assert_eq!(history.iter().map(|e| e.lr).collect::<Vec<_>>(), vec![1e-3, 1e-3, 1e-4]);
    }

    #[test]
    fn invalid_inputs_are_rejected_up_front() {
        let cfg = tiny_classifier();
        let mut store = cfg.init();
        let err = train_classifier(&mut store, &cfg, &[], &quick(1), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::EmptyCorpus));

        let scenes = tiny_scenes(1);
        let err = train_classifier(
            &mut store,
            &cfg,
            &scenes,
            &TrainConfig { batch_size: 0, ..quick(1) },
            |_, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::BatchSize));

        // More ground-truth nodes than queries must be refused.
        let narrow = ClassifierConfig { m: 1, ..cfg };
        let mut store = narrow.init();
        let err =
            train_classifier(&mut store, &narrow, &scenes, &quick(1), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::TooManyNodes { .. }), "{err}");

        // Scenes loaded without features cannot train either stage.
        let mut stripped = scenes.clone();
        stripped[0].appearance.clear();
        stripped[0].frames = None;
        let cfg = tiny_classifier();
        let mut store = cfg.init();
        let err =
            train_classifier(&mut store, &cfg, &stripped, &quick(1), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::MissingFeatures { .. }));
        let gcfg = tiny_grounding();
        let mut store = gcfg.init();
        let err =
            train_grounding(&mut store, &gcfg, &stripped, &quick(1), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::MissingFeatures { .. }));
    }
}
