//! Online continual adaptation.

pub mod loss;
pub mod optim;
pub mod runtime;

pub use loss::{entropy, entropy_loss, entropy_threshold, feature_l1, softmax, EntropyLoss};
pub use optim::{Adam, AdamConfig};
pub use runtime::{
    adapt_stream, read_log, write_log, AdaptationRun, AdaptationState, DomainResult, LogRow, RegTarget,
    RunOptions, RunSummary, Strategy, StrategyMode,
};
