//! Training orchestration, evaluation, generation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod generate;
pub mod train;

pub use checkpoint::{ArtifactKind, Checkpoint, RngState};
pub use config::{beta_schedule, TrainConfig};
pub use eval::{evaluate, perplexity, prior_row_nll, to_grids, MetricsRecord};
pub use generate::{generate, sample_logits, GeneratedSentence};
pub use train::{train_dvam, train_gvam, train_prior, EpochLog, PriorEpoch, PriorOutcome, TrainOptions, TrainOutcome};
