//! Online test-time adaptation, baseline adapters and stream metrics.

mod adapt;
mod export;
mod metrics;

pub use adapt::{adapt_stream, AdaptConfig, AdaptMode, PredictOrder};
pub use export::{read_result, write_result, ResultSummary};
pub use metrics::{aggregate_runs, stream_accuracy, DomainAccuracy, StepRecord, StreamResult};
