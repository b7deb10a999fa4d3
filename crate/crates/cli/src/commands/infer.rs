//! `infer`: classification over every scene in a split, optional grounding,
//! and a predictions file.

use std::collections::BTreeMap;

use vidsgg_core::classifier::{classify_scene, ClassifierConfig};
use vidsgg_core::graph::RelationTriplet;
use vidsgg_core::grounding::{ground_query, infer_pipeline, vidvrd_mode, GroundingConfig, InferParams};
use vidsgg_core::nn::ParamStore;
use vidsgg_data::checkpoint::load_checkpoint;
use vidsgg_data::formats::save_predictions;
use vidsgg_data::SceneRecord;

use super::{ensure_parent, load_corpus};
use crate::args::{InferArgs, Mode};
use crate::error::CliError;
use crate::parallel::ordered_map;

fn infer_scene(
    scene: &SceneRecord,
    cls: &(ParamStore, ClassifierConfig),
    grd: Option<&(ParamStore, GroundingConfig)>,
    params: &InferParams,
) -> Result<Vec<RelationTriplet>, CliError> {
    let queries = classify_scene(&cls.0, &cls.1, &scene.tracklets, &scene.appearance)?;
    if queries.iter().any(|q| q.probabilities.iter().any(|p| !p.is_finite())) {
        return Err(CliError::Numeric(format!(
            "scene {}: classification produced non-finite probabilities",
            scene.video_id
        )));
    }
    let Some((store, cfg)) = grd else {
        return Ok(vidvrd_mode(&scene.tracklets, &queries, params));
    };
    let frames = scene.frames.as_ref().ok_or_else(|| {
        CliError::data(format!("scene {}: frame features are required in big mode", scene.video_id))
    })?;
    let mut failure: Option<CliError> = None;
    let triplets = infer_pipeline(
        &scene.tracklets,
        &queries,
        |query| match ground_query(store, cfg, frames, query) {
            Ok(head) if head.cls.is_finite() && head.reg.is_finite() && head.conf.is_finite() => {
                Some(head)
            }
            Ok(_) => {
                failure = Some(CliError::Numeric(format!(
                    "scene {}: grounding produced non-finite head outputs",
                    scene.video_id
                )));
                None
            }
            Err(e) => {
                failure = Some(CliError::from(e));
                None
            }
        },
        params,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(triplets),
    }
}

pub fn run(args: &InferArgs, threads: usize) -> Result<(), CliError> {
    let scenes = load_corpus(&args.data, args.split, true)?;
    let cls: (ParamStore, ClassifierConfig) = load_checkpoint(&args.cls)?;
    let grd: Option<(ParamStore, GroundingConfig)> = match args.mode {
        Mode::Big => {
            let path = args
                .grd
                .as_ref()
                .ok_or_else(|| CliError::usage("--grd is required in big mode"))?;
            let loaded: (ParamStore, GroundingConfig) = load_checkpoint(path)?;
            if let Some(bins) = args.bins {
                if bins != loaded.1.bins {
                    return Err(CliError::usage(format!(
                        "--bins {bins} does not match the checkpoint's {} bins",
                        loaded.1.bins
                    )));
                }
            }
            Some(loaded)
        }
        Mode::Vidvrd => None,
    };
    let params = InferParams {
        top_categories: args.top_k,
        score_floor: args.score_floor,
        nms_threshold: args.nms,
    };

    let results = ordered_map(&scenes, threads, |scene| {
        infer_scene(scene, &cls, grd.as_ref(), &params)
    });
    let mut predictions = BTreeMap::new();
    let mut total = 0usize;
    for (scene, result) in scenes.iter().zip(results) {
        let triplets = result?;
        total += triplets.len();
        if predictions.insert(scene.video_id.clone(), triplets).is_some() {
            return Err(CliError::data(format!(
                "duplicate video id {} in the split",
                scene.video_id
            )));
        }
    }
    ensure_parent(&args.out)?;
    save_predictions(&predictions, &args.out)?;
    println!(
        "wrote {total} predictions for {} videos to {}",
        predictions.len(),
        args.out.display()
    );
    Ok(())
}
