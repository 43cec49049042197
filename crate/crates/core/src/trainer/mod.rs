//! Two-phase training: labeled-only burn-in, then teacher-student
//! semi-supervised training with the ablatable components.

pub mod config;
pub mod eval;
pub mod log;
pub mod optim;
pub mod run;
pub mod step;

pub use config::{ablation_ladder, Component, TrainConfig};
pub use eval::{evaluate, evaluate_params, EvalReport, SampleScore};
pub use log::{read_log, LogRecord, MetricsLog};
pub use optim::{lr_schedule, optimizer_step, AdamState};
pub use run::{
    burnin, train, train_with, Schedule, TrainOptions, TrainOutcome, BEST_CHECKPOINT,
    BURNIN_CHECKPOINT, FINAL_CHECKPOINT, METRICS_LOG,
};
pub use step::{burnin_step, ssl_step, Phase, StepReport, TrainContext, TrainState};
