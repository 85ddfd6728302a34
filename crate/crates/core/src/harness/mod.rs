//! Experiment orchestration: configuration, training loops, evaluation
//! runs and reporting.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod optim;
pub mod pipeline;
pub mod record;
pub mod report;
pub mod train;

pub use config::{DataConfig, RunConfig, SCHEMA_VERSION, TrainConfig, TrainMode, lr_schedule};
pub use evaluate::{EvalMode, Scenario, evaluate};
pub use optim::{Adam, clip_grad_norm};
pub use record::{ExperimentRecord, ReportRef, SweepPoint};
pub use report::write_report;
pub use train::{Batcher, LossEntry, TrainItem, TrainOutcome, Trainer, finetune, pretrain, pretrain_from};

#[cfg(test)]
mod tests;
