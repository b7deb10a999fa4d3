//! Data plumbing around the model crates: a deterministic synthetic scene
//! generator whose relations carry planted, learnable feature codes, the
//! annotation / prediction / feature file formats with their manifests,
//! instance-distribution statistics, and checkpoint persistence.

pub mod checkpoint;
pub mod formats;
pub mod stats;
pub mod synth;

pub use formats::{load_annotations, load_predictions, save_predictions, Manifest};
pub use stats::{multi_instance_stats, InstanceStats};
pub use synth::{generate_scene, RelationInstance, SceneRecord, SynthConfig};
