//! `stats`: instance-count distribution and bin-occupancy report.

use vidsgg_data::multi_instance_stats;

use super::{load_corpus, write_json};
use crate::args::StatsArgs;
use crate::error::CliError;

pub fn run(args: &StatsArgs) -> Result<(), CliError> {
    let scenes = load_corpus(&args.data, args.split, false)?;
    let graphs: Vec<_> = scenes.iter().map(|s| s.graph()).collect();
    let stats = multi_instance_stats(&graphs, args.bins);
    println!("samples          {}", stats.samples);
    println!("single-instance  {:.4}", stats.single_share);
    println!("two-instance     {:.4}", stats.double_share);
    println!("three-plus       {:.4}", stats.many_share);
    println!("multi-instance   {:.4}", stats.multi_share);
    println!("occupied bins    {} (K = {})", stats.occupied_bins, args.bins);
    println!("bin collisions   {:.4}", stats.collision_share);
    if let Some(path) = &args.out {
        write_json(path, &stats)?;
        println!("stats written to {}", path.display());
    }
    Ok(())
}
