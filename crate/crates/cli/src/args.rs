//! Flag definitions for every subcommand. Overridable defaults follow the
//! reference configuration; paths may also come from environment variables.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "vidsgg",
    version,
    about = "Video scene-graph pipeline: classify relations over whole tracklets, then ground each one in time"
)]
pub struct Cli {
    /// Worker threads for inference and evaluation (training always runs
    /// single-threaded so runs are reproducible)
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene corpus plus a train/val manifest
    Synth(SynthArgs),
    /// Train the relation classification stage
    TrainCls(TrainClsArgs),
    /// Train the temporal grounding stage
    TrainGrd(TrainGrdArgs),
    /// Classify scenes, ground the survivors, and write predictions
    Infer(InferArgs),
    /// Score a predictions file against ground truth
    Eval(EvalArgs),
    /// Report instance-count and bin-occupancy statistics
    Stats(StatsArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Full pipeline: grounded time slots plus the overlap slot
    Big,
    /// Classification only: one overlap slot per kept pair
    Vidvrd,
}

/// Learning-rate milestones: comma-separated `epoch:rate` pairs; from each
/// epoch onward its rate applies.
#[derive(Clone, Debug, PartialEq)]
pub struct Milestones(pub Vec<(usize, f64)>);

impl FromStr for Milestones {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (epoch, rate) = part
                .split_once(':')
                .ok_or_else(|| format!("expected epoch:rate, got {part:?}"))?;
            let epoch = epoch.trim().parse::<usize>().map_err(|e| format!("epoch {epoch:?}: {e}"))?;
            let rate = rate.trim().parse::<f64>().map_err(|e| format!("rate {rate:?}: {e}"))?;
            if !rate.is_finite() || rate <= 0.0 {
                return Err(format!("rate must be positive, got {rate}"));
            }
            out.push((epoch, rate));
        }
        Ok(Milestones(out))
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for scene files and manifest.json
    #[arg(long, env = "VIDSGG_DATA")]
    pub out: PathBuf,
    /// Scenes in the train split
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    /// Extra held-out scenes in the val split
    #[arg(long, default_value_t = 0)]
    pub val_scenes: usize,
    /// Base seed; scene i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames per video
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    /// Fewest entities per scene
    #[arg(long, default_value_t = 3)]
    pub entities_min: usize,
    /// Most entities per scene
    #[arg(long, default_value_t = 6)]
    pub entities_max: usize,
    #[arg(long, default_value_t = 10)]
    pub entity_categories: usize,
    #[arg(long, default_value_t = 8)]
    pub predicate_categories: usize,
    /// Fewest relations per scene
    #[arg(long, default_value_t = 2)]
    pub relations_min: usize,
    /// Most relations per scene
    #[arg(long, default_value_t = 6)]
    pub relations_max: usize,
    /// Probability that a relation receives 2-3 disjoint instances
    #[arg(long, default_value_t = 0.35)]
    pub multi_instance_prob: f64,
    /// Gaussian feature noise
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 16)]
    pub fps: u32,
    /// Appearance feature width
    #[arg(long, default_value_t = 32)]
    pub d_a: usize,
    /// Frame feature width
    #[arg(long, default_value_t = 32)]
    pub d_v: usize,
}

#[derive(Args, Debug)]
pub struct TrainClsArgs {
    /// Dataset directory containing manifest.json
    #[arg(long, env = "VIDSGG_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Checkpoint path, rewritten after every epoch
    #[arg(long, env = "VIDSGG_CLS_CKPT")]
    pub out: PathBuf,
    /// Per-epoch loss log; defaults to the checkpoint path with a .csv extension
    #[arg(long, env = "VIDSGG_LOG")]
    pub log: Option<PathBuf>,
    /// Relation queries (the maximum predicate nodes per scene)
    #[arg(long, default_value_t = 192)]
    pub queries: usize,
    /// Entity feature width
    #[arg(long, default_value_t = 512)]
    pub d_e: usize,
    /// Query width
    #[arg(long, default_value_t = 512)]
    pub d_q: usize,
    /// Category embedding width
    #[arg(long, default_value_t = 300)]
    pub d_w: usize,
    /// Hidden width of every MLP
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub encoder_layers: usize,
    #[arg(long, default_value_t = 3)]
    pub decoder_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Mean-pooled chunks per tracklet
    #[arg(long, default_value_t = 4)]
    pub pool_len: usize,
    /// Appearance feature width; defaults to the dataset's width
    #[arg(long)]
    pub d_a: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub entity_categories: usize,
    #[arg(long, default_value_t = 8)]
    pub predicate_categories: usize,
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    /// Scenes per optimizer step
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Base learning rate
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Learning-rate milestones as epoch:rate pairs, e.g. "50:1e-5"
    #[arg(long, default_value = "")]
    pub lr_milestones: Milestones,
    /// Adjacency loss factor in the matching cost and stage loss
    #[arg(long, default_value_t = 30.0)]
    pub lambda: f64,
    /// Parameter initialization and epoch shuffling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainGrdArgs {
    /// Dataset directory containing manifest.json
    #[arg(long, env = "VIDSGG_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Checkpoint path, rewritten after every epoch
    #[arg(long, env = "VIDSGG_GRD_CKPT")]
    pub out: PathBuf,
    /// Per-epoch loss log; defaults to the checkpoint path with a .csv extension
    #[arg(long, env = "VIDSGG_LOG")]
    pub log: Option<PathBuf>,
    /// Grounding bins (K)
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Frame feature width; defaults to the dataset's width
    #[arg(long)]
    pub d_v: Option<usize>,
    /// Category embedding width
    #[arg(long, default_value_t = 300)]
    pub d_w: usize,
    /// Fused multimodal width
    #[arg(long, default_value_t = 256)]
    pub d: usize,
    /// Hidden width of MLPs and convolution branches
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Drop the sinusoidal positions added to the frame stream
    #[arg(long)]
    pub no_frame_positions: bool,
    #[arg(long, default_value_t = 10)]
    pub entity_categories: usize,
    #[arg(long, default_value_t = 8)]
    pub predicate_categories: usize,
    #[arg(long, default_value_t = 70)]
    pub epochs: usize,
    /// Scenes per optimizer step
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Base learning rate
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    /// Learning-rate milestones as epoch:rate pairs
    #[arg(long, default_value = "40:1e-5,60:2e-6")]
    pub lr_milestones: Milestones,
    /// Parameter initialization and epoch shuffling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Dataset directory containing manifest.json
    #[arg(long, env = "VIDSGG_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Classification checkpoint
    #[arg(long, env = "VIDSGG_CLS_CKPT")]
    pub cls: PathBuf,
    /// Grounding checkpoint (required in big mode)
    #[arg(long, env = "VIDSGG_GRD_CKPT")]
    pub grd: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Big)]
    pub mode: Mode,
    /// Expected grounding bin count; must match the checkpoint when given
    #[arg(long)]
    pub bins: Option<usize>,
    /// Predicate categories kept per query
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Queries whose best grounded-slot score falls below this keep only the
    /// overlap slot
    #[arg(long, default_value_t = 0.2)]
    pub score_floor: f64,
    /// Temporal NMS threshold over each query's candidate slots
    #[arg(long, default_value_t = 0.8)]
    pub nms: f64,
    /// Predictions file to write
    #[arg(long, env = "VIDSGG_PREDICTIONS")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions file produced by infer
    #[arg(long, env = "VIDSGG_PREDICTIONS")]
    pub predictions: PathBuf,
    /// Dataset directory containing manifest.json
    #[arg(long, env = "VIDSGG_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// JSON report to write
    #[arg(long, env = "VIDSGG_REPORT")]
    pub out: PathBuf,
    /// Optional per-video CSV breakdown
    #[arg(long)]
    pub per_video: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Dataset directory containing manifest.json
    #[arg(long, env = "VIDSGG_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Bin count for the collision share
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Optional JSON output path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_parse_and_reject() {
        assert_eq!(
            "40:1e-5,60:2e-6".parse::<Milestones>().unwrap(),
            Milestones(vec![(40, 1e-5), (60, 2e-6)])
        );
        assert_eq!("".parse::<Milestones>().unwrap(), Milestones(Vec::new()));
        assert!("40".parse::<Milestones>().is_err());
        assert!("x:1e-5".parse::<Milestones>().is_err());
        assert!("40:-1".parse::<Milestones>().is_err());
    }

    #[test]
    fn command_line_round_trips() {
        use clap::Parser;
        let cli = Cli::try_parse_from([
            "vidsgg", "synth", "--out", "/tmp/x", "--scenes", "3", "--seed", "9",
        ])
        .unwrap();
        match cli.command {
            Command::Synth(a) => {
                assert_eq!(a.scenes, 3);
                assert_eq!(a.seed, 9);
                assert_eq!(a.val_scenes, 0);
            }
            other => panic!("wrong command {other:?}"),
        }
        assert!(Cli::try_parse_from(["vidsgg", "bogus"]).is_err());
    }
}
