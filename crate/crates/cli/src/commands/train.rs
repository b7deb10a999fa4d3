//! `train-cls` and `train-grd`: epoch loops with CSV loss logs and a
//! checkpoint rewritten after every epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use vidsgg_core::classifier::ClassifierConfig;
use vidsgg_core::features::FeatureConfig;
use vidsgg_core::grounding::GroundingConfig;
use vidsgg_core::nn::ParamStore;
use vidsgg_data::checkpoint::save_checkpoint;
use vidsgg_train::{train_classifier, train_grounding, EpochStats, LrSchedule, TrainConfig};

use super::{ensure_parent, load_corpus};
use crate::args::{TrainClsArgs, TrainGrdArgs};
use crate::error::{io_at, CliError};

/// Opens the loss log with its header; rows follow one per epoch.
fn open_log(out: &Path, log: &Option<PathBuf>) -> Result<(PathBuf, BufWriter<File>), CliError> {
    let path = log.clone().unwrap_or_else(|| out.with_extension("csv"));
    ensure_parent(&path)?;
    let mut w = BufWriter::new(File::create(&path).map_err(|e| io_at(&path, e))?);
    writeln!(w, "epoch,lr,loss").map_err(|e| io_at(&path, e))?;
    Ok((path, w))
}

/// Per-epoch hook: append the CSV row, rewrite the checkpoint, narrate.
fn epoch_hook<'a, C: Serialize>(
    out: &'a Path,
    cfg: &'a C,
    log_path: &'a Path,
    log: &'a mut BufWriter<File>,
) -> impl FnMut(&EpochStats, &ParamStore) -> Result<(), vidsgg_train::HookError> + 'a {
    move |stats, store| {
        writeln!(log, "{},{},{}", stats.epoch, stats.lr, stats.loss)
            .and_then(|()| log.flush())
            .map_err(|e| format!("{}: {e}", log_path.display()))?;
        save_checkpoint(out, store, cfg)?;
        println!("epoch {:>3} lr {} loss {:.6}", stats.epoch, stats.lr, stats.loss);
        Ok(())
    }
}

pub fn run_cls(args: &TrainClsArgs) -> Result<(), CliError> {
    let scenes = load_corpus(&args.data, args.split, true)?;
    let d_a = match args.d_a {
        Some(d) => d,
        None => scenes
            .iter()
            .find_map(|s| s.appearance.first().map(|a| a.cols()))
            .ok_or_else(|| {
                CliError::data("cannot infer the appearance width: no scene has features (pass --d-a)")
            })?,
    };
    let cfg = ClassifierConfig {
        m: args.queries,
        d_e: args.d_e,
        d_q: args.d_q,
        d_w: args.d_w,
        hidden: args.hidden,
        encoder_layers: args.encoder_layers,
        decoder_layers: args.decoder_layers,
        heads: args.heads,
        entity_categories: args.entity_categories,
        predicate_categories: args.predicate_categories,
        feature: FeatureConfig { d_a, d_e: args.d_e, hidden: args.hidden, pool_len: args.pool_len },
        seed: args.seed,
    };
    let tcfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        schedule: LrSchedule::with_milestones(args.lr, args.lr_milestones.0.clone()),
        lambda: args.lambda,
        seed: args.seed,
    };
    ensure_parent(&args.out)?;
    let (log_path, mut log) = open_log(&args.out, &args.log)?;
    let mut store = cfg.init();
    train_classifier(
        &mut store,
        &cfg,
        &scenes,
        &tcfg,
        epoch_hook(&args.out, &cfg, &log_path, &mut log),
    )?;
    println!("checkpoint {}  loss log {}", args.out.display(), log_path.display());
    Ok(())
}

pub fn run_grd(args: &TrainGrdArgs) -> Result<(), CliError> {
    let scenes = load_corpus(&args.data, args.split, true)?;
    let d_v = match args.d_v {
        Some(d) => d,
        None => scenes
            .iter()
            .find_map(|s| s.frames.as_ref().map(|f| f.cols()))
            .ok_or_else(|| {
                CliError::data("cannot infer the frame width: no scene has features (pass --d-v)")
            })?,
    };
    let cfg = GroundingConfig {
        d_v,
        d_w: args.d_w,
        d: args.d,
        hidden: args.hidden,
        bins: args.bins,
        heads: args.heads,
        use_frame_positions: !args.no_frame_positions,
        entity_categories: args.entity_categories,
        predicate_categories: args.predicate_categories,
        seed: args.seed,
    };
    let tcfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        schedule: LrSchedule::with_milestones(args.lr, args.lr_milestones.0.clone()),
        lambda: 0.0,
        seed: args.seed,
    };
    ensure_parent(&args.out)?;
    let (log_path, mut log) = open_log(&args.out, &args.log)?;
    let mut store = cfg.init();
    train_grounding(
        &mut store,
        &cfg,
        &scenes,
        &tcfg,
        epoch_hook(&args.out, &cfg, &log_path, &mut log),
    )?;
    println!("checkpoint {}  loss log {}", args.out.display(), log_path.display());
    Ok(())
}
