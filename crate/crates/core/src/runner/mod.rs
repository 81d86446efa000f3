//! Training, evaluation, checkpointing and sweeps.

pub mod checkpoint;
pub mod evaluate;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use evaluate::{evaluate, predict_maps};
pub use sweep::{apply_row, find_row, run_sweep, AblationRow, ABLATION_ROWS};
pub use train::{StepLog, Trainer};
