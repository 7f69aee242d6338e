//! Minimal neural-network engine and the confidence classifiers built on it.

pub mod adamw;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use gradcheck::backprop_check;
pub use layers::{LayerSpec, Matrix, Network};
pub use model::{ConfidenceModel, Standardizer};
pub use train::{contrastive_pretrain, joint_finetune, train, LossCurve, TrainConfig, TrainOutcome, TrainingSet};
