//! Training, sliding-window reconstruction, evaluation, configuration and
//! checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod reconstruct;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{learning_rate_at, Stage, TrainConfig};
pub use eval::{evaluate, psnr_mu, EvalReport, PSNR_CAP_DB};
pub use reconstruct::{reconstruct_video, ReconstructOptions, ReconstructedFrame};
pub use train::{load_pairs, train_stage, TrainOutcome};
