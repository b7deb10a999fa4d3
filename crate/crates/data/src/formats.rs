//! On-disk formats: annotation JSON (entities, per-frame trajectories,
//! relation instances), prediction JSON keyed by video, raw little-endian
//! 32-bit feature blobs with JSON sidecars, and the train/val manifest.
//! Loaders validate structure and report the offending file and JSON path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use vidsgg_core::autodiff::Tensor;
use vidsgg_core::graph::{RelationTriplet, TimeSlot, Tracklet};

use crate::synth::{RelationInstance, SceneRecord};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {at}: {message}")]
    Schema { path: PathBuf, at: String, message: String },
}

impl FormatError {
    fn schema(path: &Path, at: impl Into<String>, message: impl Into<String>) -> Self {
        FormatError::Schema { path: path.to_path_buf(), at: at.into(), message: message.into() }
    }
}

fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    fs::write(path, text).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, FormatError> {
    serde_json::from_str(text).map_err(|source| FormatError::Json { path: path.to_path_buf(), source })
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

// ────────────────────────────── annotations ─────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Bbox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

#[derive(Serialize, Deserialize)]
struct AnnEntity {
    tid: usize,
    category: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnBox {
    tid: usize,
    bbox: Bbox,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    video_id: String,
    fps: u32,
    frame_count: usize,
    #[serde(rename = "subject/objects")]
    entities: Vec<AnnEntity>,
    trajectories: Vec<Vec<AnnBox>>,
    relation_instances: Vec<RelationInstance>,
}

/// Writes one scene's annotations (no features).
pub fn save_annotations(scene: &SceneRecord, path: &Path) -> Result<(), FormatError> {
    let entities = scene
        .tracklets
        .iter()
        .map(|t| AnnEntity { tid: t.id, category: t.category })
        .collect();
    let trajectories = (0..scene.frame_count)
        .map(|f| {
            scene
                .tracklets
                .iter()
                .filter_map(|t| {
                    t.box_at_frame(f).map(|b| AnnBox {
                        tid: t.id,
                        bbox: Bbox { xmin: b[0], ymin: b[1], xmax: b[2], ymax: b[3] },
                    })
                })
                .collect()
        })
        .collect();
    let file = AnnotationFile {
        video_id: scene.video_id.clone(),
        fps: scene.fps,
        frame_count: scene.frame_count,
        entities,
        trajectories,
        relation_instances: scene.relations.clone(),
    };
    write_text(path, &to_pretty(&file))
}

/// Reads one scene's annotations; the record comes back without features.
pub fn load_annotations(path: &Path) -> Result<SceneRecord, FormatError> {
    let file: AnnotationFile = parse_json(path, &read_text(path)?)?;
    if file.frame_count == 0 {
        return Err(FormatError::schema(path, "frame_count", "must be positive"));
    }
    if file.trajectories.len() != file.frame_count {
        return Err(FormatError::schema(
            path,
            "trajectories",
            format!("expected {} per-frame entries, got {}", file.frame_count, file.trajectories.len()),
        ));
    }
    let mut categories = BTreeMap::new();
    for (i, e) in file.entities.iter().enumerate() {
        if categories.insert(e.tid, e.category).is_some() {
            return Err(FormatError::schema(
                path,
                format!("subject/objects[{i}]"),
                format!("duplicate tid {}", e.tid),
            ));
        }
    }
    // Collect each tracklet's frames, demanding one contiguous span.
    let mut boxes: BTreeMap<usize, Vec<(usize, [f64; 4])>> = BTreeMap::new();
    for (f, frame) in file.trajectories.iter().enumerate() {
        let mut seen = std::collections::BTreeSet::new();
        for (k, item) in frame.iter().enumerate() {
            let at = format!("trajectories[{f}][{k}]");
            if !categories.contains_key(&item.tid) {
                return Err(FormatError::schema(path, at, format!("unknown tid {}", item.tid)));
            }
            if !seen.insert(item.tid) {
                return Err(FormatError::schema(path, at, format!("tid {} twice in one frame", item.tid)));
            }
            let b = &item.bbox;
            boxes.entry(item.tid).or_default().push((f, [b.xmin, b.ymin, b.xmax, b.ymax]));
        }
    }
    let mut tracklets = Vec::new();
    for (&tid, &category) in &categories {
        let frames = boxes.remove(&tid).unwrap_or_default();
        if frames.is_empty() {
            return Err(FormatError::schema(
                path,
                "trajectories",
                format!("tid {tid} never appears in any frame"),
            ));
        }
        let start_frame = frames[0].0;
        for (offset, (f, _)) in frames.iter().enumerate() {
            if *f != start_frame + offset {
                return Err(FormatError::schema(
                    path,
                    "trajectories",
                    format!("tid {tid} is absent between frames {start_frame} and {f}"),
                ));
            }
        }
        tracklets.push(Tracklet {
            id: tid,
            category,
            start_frame,
            frame_count: file.frame_count,
            boxes: frames.into_iter().map(|(_, b)| b).collect(),
        });
    }
    for (i, r) in file.relation_instances.iter().enumerate() {
        for (field, tid) in [("subject_tid", r.subject_tid), ("object_tid", r.object_tid)] {
            if !categories.contains_key(&tid) {
                return Err(FormatError::schema(
                    path,
                    format!("relation_instances[{i}].{field}"),
                    format!("unknown tid {tid}"),
                ));
            }
        }
        if r.begin_fid >= r.end_fid || r.end_fid > file.frame_count {
            return Err(FormatError::schema(
                path,
                format!("relation_instances[{i}]"),
                format!(
                    "frame range {}..{} outside 0..{}",
                    r.begin_fid, r.end_fid, file.frame_count
                ),
            ));
        }
    }
    Ok(SceneRecord {
        video_id: file.video_id,
        frame_count: file.frame_count,
        fps: file.fps,
        tracklets,
        relations: file.relation_instances,
        appearance: Vec::new(),
        frames: None,
    })
}

// ────────────────────────────── predictions ─────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PredictionEntry {
    /// Subject category, predicate, object category.
    triplet: [usize; 3],
    score: f64,
    /// Frame range, end exclusive.
    duration: [usize; 2],
    sub_traj: Vec<[f64; 4]>,
    obj_traj: Vec<[f64; 4]>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Writes ranked predictions per video; scores keep six decimal places.
pub fn save_predictions(
    predictions: &BTreeMap<String, Vec<RelationTriplet>>,
    path: &Path,
) -> Result<(), FormatError> {
    let mut out: BTreeMap<&str, Vec<PredictionEntry>> = BTreeMap::new();
    for (video, triplets) in predictions {
        let mut entries = Vec::with_capacity(triplets.len());
        for (i, t) in triplets.iter().enumerate() {
            let at = format!("{video}[{i}]");
            let begin = t.subject.start_frame;
            let end = t.subject.end_frame();
            if t.object.start_frame != begin || t.object.end_frame() != end {
                return Err(FormatError::schema(
                    path,
                    at,
                    "subject and object trajectories cover different frame spans",
                ));
            }
            entries.push(PredictionEntry {
                triplet: [t.subject.category, t.predicate, t.object.category],
                score: round6(t.score),
                duration: [begin, end],
                sub_traj: t.subject.boxes.clone(),
                obj_traj: t.object.boxes.clone(),
            });
        }
        out.insert(video, entries);
    }
    write_text(path, &to_pretty(&out))
}

/// Reads predictions back; `frame_counts` supplies each video's length so
/// frame ranges can be validated and time slots rebuilt.
pub fn load_predictions(
    path: &Path,
    frame_counts: &BTreeMap<String, usize>,
) -> Result<BTreeMap<String, Vec<RelationTriplet>>, FormatError> {
    let raw: BTreeMap<String, Vec<PredictionEntry>> = parse_json(path, &read_text(path)?)?;
    let mut out = BTreeMap::new();
    for (video, entries) in raw {
        let Some(&frame_count) = frame_counts.get(&video) else {
            return Err(FormatError::schema(path, &video, "unknown video id"));
        };
        let mut triplets = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let at = format!("{video}[{i}]");
            let [begin, end] = e.duration;
            if begin >= end || end > frame_count {
                return Err(FormatError::schema(
                    path,
                    at,
                    format!("duration {begin}..{end} outside 0..{frame_count}"),
                ));
            }
            let len = end - begin;
            if e.sub_traj.len() != len || e.obj_traj.len() != len {
                return Err(FormatError::schema(
                    path,
                    at,
                    format!(
                        "trajectory lengths {}/{} do not cover {len} frames",
                        e.sub_traj.len(),
                        e.obj_traj.len()
                    ),
                ));
            }
            let make = |id: usize, category: usize, boxes: Vec<[f64; 4]>| Tracklet {
                id,
                category,
                start_frame: begin,
                frame_count,
                boxes,
            };
            triplets.push(RelationTriplet {
                subject: make(2 * i, e.triplet[0], e.sub_traj),
                predicate: e.triplet[1],
                object: make(2 * i + 1, e.triplet[2], e.obj_traj),
                time_slot: TimeSlot::from_frames(begin, end, frame_count)
                    .expect("validated frame range"),
                score: e.score,
            });
        }
        out.insert(video, triplets);
    }
    Ok(out)
}

// ──────────────────────────────── features ──────────────────────────────────

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct FeatureSidecar {
    video_id: String,
    frame_count: usize,
    fps: u32,
    d_v: usize,
    d_a: usize,
    /// Per-tracklet frame counts, in tracklet order.
    tracklet_frames: Vec<usize>,
}

fn tensor_to_f32_bytes(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes the frame features followed by each tracklet's appearance matrix
/// as raw little-endian 32-bit floats, plus a JSON sidecar with the layout.
pub fn save_features(scene: &SceneRecord, bin_path: &Path, sidecar_path: &Path) -> Result<(), FormatError> {
    let Some(frames) = &scene.frames else {
        return Err(FormatError::schema(bin_path, "frames", "scene carries no frame features"));
    };
    if scene.appearance.len() != scene.tracklets.len() {
        return Err(FormatError::schema(
            bin_path,
            "appearance",
            "one appearance matrix per tracklet required",
        ));
    }
    let d_a = scene.appearance.first().map_or(0, Tensor::cols);
    let sidecar = FeatureSidecar {
        video_id: scene.video_id.clone(),
        frame_count: scene.frame_count,
        fps: scene.fps,
        d_v: frames.cols(),
        d_a,
        tracklet_frames: scene.tracklets.iter().map(Tracklet::len).collect(),
    };
    let mut bytes = Vec::new();
    tensor_to_f32_bytes(&mut bytes, frames);
    for a in &scene.appearance {
        tensor_to_f32_bytes(&mut bytes, a);
    }
    fs::write(bin_path, bytes)
        .map_err(|source| FormatError::Io { path: bin_path.to_path_buf(), source })?;
    write_text(sidecar_path, &to_pretty(&sidecar))
}

/// Fills a loaded scene's feature fields from the binary blob + sidecar.
pub fn load_features(
    scene: &mut SceneRecord,
    bin_path: &Path,
    sidecar_path: &Path,
) -> Result<(), FormatError> {
    let sidecar: FeatureSidecar = parse_json(sidecar_path, &read_text(sidecar_path)?)?;
    if sidecar.video_id != scene.video_id {
        return Err(FormatError::schema(
            sidecar_path,
            "video_id",
            format!("sidecar is for {}, scene is {}", sidecar.video_id, scene.video_id),
        ));
    }
    if sidecar.frame_count != scene.frame_count {
        return Err(FormatError::schema(sidecar_path, "frame_count", "does not match annotations"));
    }
    let lens: Vec<usize> = scene.tracklets.iter().map(Tracklet::len).collect();
    if sidecar.tracklet_frames != lens {
        return Err(FormatError::schema(
            sidecar_path,
            "tracklet_frames",
            "does not match annotated trajectories",
        ));
    }
    let bytes = fs::read(bin_path)
        .map_err(|source| FormatError::Io { path: bin_path.to_path_buf(), source })?;
    let expected =
        4 * (sidecar.frame_count * sidecar.d_v + lens.iter().sum::<usize>() * sidecar.d_a);
    if bytes.len() != expected {
        return Err(FormatError::schema(
            bin_path,
            "payload",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |rows: usize, cols: usize| {
        Tensor::new(vec![rows, cols], values.by_ref().take(rows * cols).collect())
    };
    scene.frames = Some(take(sidecar.frame_count, sidecar.d_v));
    scene.appearance = lens.iter().map(|&l| take(l, sidecar.d_a)).collect();
    Ok(())
}

// ─────────────────────────── scene bundles, manifest ────────────────────────

/// Annotation, feature-blob, and feature-sidecar paths for a scene stem.
pub fn scene_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.ann.json")),
        dir.join(format!("{stem}.feat.bin")),
        dir.join(format!("{stem}.feat.json")),
    )
}

/// Writes annotations plus features under `dir/stem.*`.
pub fn save_scene(dir: &Path, stem: &str, scene: &SceneRecord) -> Result<(), FormatError> {
    let (ann, bin, side) = scene_paths(dir, stem);
    save_annotations(scene, &ann)?;
    save_features(scene, &bin, &side)
}

/// Reads a scene bundle back; features are skipped when not requested.
pub fn load_scene(dir: &Path, stem: &str, with_features: bool) -> Result<SceneRecord, FormatError> {
    let (ann, bin, side) = scene_paths(dir, stem);
    let mut scene = load_annotations(&ann)?;
    if with_features {
        load_features(&mut scene, &bin, &side)?;
    }
    Ok(scene)
}

/// Train/val split: scene stems relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), FormatError> {
    write_text(path, &to_pretty(manifest))
}

pub fn load_manifest(path: &Path) -> Result<Manifest, FormatError> {
    parse_json(path, &read_text(path)?)
}

/// Loads every scene named in one split.
pub fn load_split(
    dir: &Path,
    stems: &[String],
    with_features: bool,
) -> Result<Vec<SceneRecord>, FormatError> {
    stems.iter().map(|s| load_scene(dir, s, with_features)).collect()
}
