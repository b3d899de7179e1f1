//! Configuration, training loop, ablation runner and visualisation.

pub mod ablation;
pub mod config;
pub mod optim;
pub mod schedule;
pub mod train;
pub mod visualize;

pub use ablation::{run_ablation, AblationRow, Variant};
pub use config::{Config, EpisodeShape, TrainConfig};
pub use schedule::LrSchedule;
pub use train::{evaluate_model, train, RunArtifacts, StepRecord, TrainProgress};
