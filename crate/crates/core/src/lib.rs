//! Video scene-graph pipeline over temporal bipartite graphs.
//!
//! The library covers the whole desk-scale workflow: synthetic scene
//! generation, relation classification with role-aware cross-attention,
//! multi-instance temporal grounding, set-matched training losses, the
//! standard relation detection / tagging metrics, and the file formats the
//! CLI speaks.

pub mod autodiff;
pub mod classifier;
pub mod eval;
pub mod features;
pub mod graph;
pub mod grounding;
pub mod matching;
pub mod nn;

pub use autodiff::{Tape, Tensor, Var};
pub use graph::{
    from_triplets, to_triplets, validate_graph, GraphError, PredicateNode, RelationTriplet,
    TemporalBipartiteGraph, TimeSlot, Tracklet, Violation,
};
