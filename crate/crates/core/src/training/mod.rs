pub mod lagrange;
pub mod optim;

pub use lagrange::{objective, LagrangeState, TaskLambda};
pub use optim::{warmup_cosine, AdamHyper, AdamW};
pub mod pretrain;

pub use pretrain::{labelled_cross_entropy, pretrain_backbone, PretrainLog, PretrainReport};
pub mod router_train;

pub use router_train::{target_for, train_run, train_step, MetricsRecord, TrainState};
pub mod penalty;

pub use penalty::{pure_penalty_run, PenaltyConfig, PenaltyReport};
