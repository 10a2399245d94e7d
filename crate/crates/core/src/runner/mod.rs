//! Model assembly, training, evaluation, checkpoints, attention export, and
//! the attention cost model.

mod adam;
mod attention;
pub mod checkpoint;
mod config;
pub mod cost;
mod evaluate;
mod gradcheck;
mod model;
mod train;

pub use adam::Adam;
pub use attention::{export_attention, final_block_attention, HeatMap};
pub use checkpoint::Checkpoint;
pub use config::{ClipSource, TrainConfig};
pub use cost::{cost_model, CostComparison, CostReport, Geometry, PassGroup, Schedule};
pub use evaluate::{cluster_probabilities, evaluate, predict};
pub use gradcheck::check_model_gradients;
pub use model::{Forward, Model};
pub use train::{apply_mask, prepared_dataset, resolve_features, train, train_with, EpochLog, TrainOutcome};
