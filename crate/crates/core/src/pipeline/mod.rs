//! Streaming inference, scheduling, evaluation and training.

mod aggregate;
mod metrics;
mod scheduler;
mod stream;
mod train;

pub use aggregate::{aggregate, aggregate_graph, blend, AggregationMode};
pub use metrics::{evaluate_miou, ConfusionCounts, MiouReport};
pub use scheduler::{simulate, validate_gammas, Role, ScheduleStep, SchedulerState, DEFAULT_GAMMA1, DEFAULT_GAMMA2};
pub use stream::{pearson, run_stream, CachedState, FrameRecord, FrameResult, Policy, StreamOptions, StreamResult, StreamSummary};
pub use train::{poly_lr, train, Phase, StepLog, TargetPooling, TrainConfig, TrainSummary};
