//! Instance-distribution statistics over ground-truth graphs: how many
//! predicate nodes carry one, two, or more instances, and how often two
//! instance centers of one node land in the same grounding bin.

use serde::{Deserialize, Serialize};
use vidsgg_core::graph::TemporalBipartiteGraph;

/// Shares are fractions of all predicate nodes (samples); the collision
/// share is a fraction of all occupied bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub samples: usize,
    pub single_share: f64,
    pub double_share: f64,
    pub many_share: f64,
    /// `double_share + many_share`.
    pub multi_share: f64,
    pub occupied_bins: usize,
    /// Share of occupied bins holding at least two instance centers.
    pub collision_share: f64,
}

/// Tallies instance counts per predicate node and center collisions under
/// the K-bin assignment rule (`⌊center·K⌋`, last bin closed).
pub fn multi_instance_stats(graphs: &[TemporalBipartiteGraph], bins: usize) -> InstanceStats {
    assert!(bins >= 1, "at least one bin");
    let mut samples = 0usize;
    let mut by_count = [0usize; 3]; // 1, 2, ≥3 instances
    let mut occupied = 0usize;
    let mut collided = 0usize;
    for g in graphs {
        for node in &g.predicates {
            samples += 1;
            let k = node.time_slots.len();
            by_count[k.clamp(1, 3) - 1] += 1;
            let mut centers = vec![0usize; bins];
            for slot in &node.time_slots {
                let bin = ((slot.center() * bins as f64).floor() as usize).min(bins - 1);
                centers[bin] += 1;
            }
            occupied += centers.iter().filter(|&&c| c >= 1).count();
            collided += centers.iter().filter(|&&c| c >= 2).count();
        }
    }
    let share = |c: usize| if samples == 0 { 0.0 } else { c as f64 / samples as f64 };
    InstanceStats {
        samples,
        single_share: share(by_count[0]),
        double_share: share(by_count[1]),
        many_share: share(by_count[2]),
        multi_share: share(by_count[1] + by_count[2]),
        occupied_bins: occupied,
        collision_share: if occupied == 0 { 0.0 } else { collided as f64 / occupied as f64 },
    }
}
