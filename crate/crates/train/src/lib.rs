//! Training loops for the two-stage relation pipeline: a bias-corrected
//! adaptive-moment optimizer, milestone learning-rate schedules, and the
//! per-stage epoch drivers with deterministic shuffling and epoch hooks.

pub mod optim;
pub mod stages;

pub use optim::{Adam, LrSchedule};
pub use stages::{train_classifier, train_grounding, EpochStats, HookError, TrainConfig, TrainError};
