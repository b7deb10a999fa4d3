//! `eval`: scores a predictions file against a split's ground truth and
//! writes a JSON report, a text table, and an optional per-video CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use vidsgg_core::eval::{evaluate, VideoPair};
use vidsgg_data::formats::load_predictions;

use super::{ensure_parent, load_corpus, write_json};
use crate::args::EvalArgs;
use crate::error::{io_at, CliError};
use crate::parallel::ordered_map;

fn per_video_csv(path: &Path, ids: &[&str], pairs: &[VideoPair], threads: usize) -> Result<(), CliError> {
    let rows = ordered_map(pairs, threads, |pair| {
        let r = evaluate(std::slice::from_ref(pair));
        format!(
            "{},{},{},{},{},{},{},{},{}",
            r.gt_count,
            r.pred_count,
            r.hit_count,
            r.map,
            r.recall[&50],
            r.recall[&100],
            r.precision[&1],
            r.precision[&5],
            r.precision[&10],
        )
    });
    ensure_parent(path)?;
    let mut out = String::from("video,gt,preds,hits,ap,r50,r100,p1,p5,p10\n");
    for (id, row) in ids.iter().zip(rows) {
        out.push_str(id);
        out.push(',');
        out.push_str(&row);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_at(path, e))
}

pub fn run(args: &EvalArgs, threads: usize) -> Result<(), CliError> {
    let mut scenes = load_corpus(&args.data, args.split, false)?;
    scenes.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut frame_counts = BTreeMap::new();
    for s in &scenes {
        if frame_counts.insert(s.video_id.clone(), s.frame_count).is_some() {
            return Err(CliError::data(format!("duplicate video id {} in the split", s.video_id)));
        }
    }
    let mut predictions = load_predictions(&args.predictions, &frame_counts)?;
    let ids: Vec<&str> = scenes.iter().map(|s| s.video_id.as_str()).collect();
    let pairs: Vec<VideoPair> = scenes
        .iter()
        .map(|s| (predictions.remove(&s.video_id).unwrap_or_default(), s.gt_triplets()))
        .collect();

    let report = evaluate(&pairs);
    write_json(&args.out, &report)?;
    if let Some(path) = &args.per_video {
        per_video_csv(path, &ids, &pairs, threads)?;
    }
    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{report}").map_err(CliError::from)?;
    writeln!(stdout, "report written to {}", args.out.display()).map_err(CliError::from)?;
    Ok(())
}
