//! A small in-process durable execution engine.
//!
//! Workflows are ordinary functions that orchestrate activities through a
//! [`WorkflowContext`]. Every step is recorded in an append-only
//! [`WorkflowHistory`]; activities are delivered through named FIFO task
//! queues to [workers](Engine::run_worker) and retried according to a
//! [`RetryPolicy`]. Long workflows keep their histories bounded by
//! continuing as new runs.
//!
//! ```
//! use chunkwise_durable::{ActivityOptions, Engine, EngineConfig, Payload, WorkerConfig, WorkflowOutcome};
//!
//! let engine = Engine::new(EngineConfig::new(["main"])).unwrap();
//! engine.register_activity("double", |_, input| {
//!     let n: i64 = input.decode().map_err(|e| chunkwise_durable::ActivityError::non_retryable("decode", e.to_string()))?;
//!     Ok(Payload::json(&(2 * n)).unwrap())
//! });
//! engine.register_workflow("twice", |ctx, input| {
//!     let once = ctx.execute_activity("double", input, &ActivityOptions::on("main"))?;
//!     Ok(WorkflowOutcome::Complete(ctx.execute_activity("double", once, &ActivityOptions::on("main"))?))
//! });
//! let worker = engine
//!     .run_worker(WorkerConfig::new("w", "main").activity("double").workflow("twice"))
//!     .unwrap();
//! let out = engine.execute_workflow("twice", Payload::json(&5).unwrap(), "main").unwrap();
//! assert_eq!(out.decode::<i64>().unwrap(), 20);
//! worker.shutdown();
//! ```

mod clock;
mod config;
mod context;
mod engine;
mod history;
mod payload;
mod retry;
mod worker;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use config::{EngineConfig, WorkerConfig};
pub use context::{ActivityContext, ActivityHandle, ActivityOptions, ChildFailure, WorkflowContext, WorkflowError, WorkflowOutcome};
pub use engine::{Engine, LedgerEntry, LedgerOutcome, WorkflowStatus};
pub use history::{AppendError, EventKind, HistoryEvent, WorkflowHistory};
pub use payload::{Payload, JSON, MAX_HISTORY_BYTES, MAX_PAYLOAD_BYTES, OCTETS};
pub use retry::{ActivityError, ActivityFailure, FailureReason, RetryPolicy};
pub use worker::WorkerHandle;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("payload of {size} bytes exceeds the {limit} byte limit")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("payload encoding: {0}")]
    Codec(String),
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("unknown task queue {0:?}")]
    UnknownQueue(String),
    #[error("no workflow registered as {0:?}")]
    UnknownWorkflow(String),
    #[error("no activity registered as {0:?}")]
    UnknownActivity(String),
    #[error("workflow {0:?} not found")]
    NotFound(String),
    #[error("workflow {id:?} has no run {run}")]
    RunNotFound { id: String, run: u32 },
    #[error("workflow id {0:?} already exists")]
    AlreadyExists(String),
    #[error("worker id {0:?} is already registered")]
    DuplicateWorker(String),
    #[error("workflow {id} failed in run {run}: {message}")]
    WorkflowFailed { id: String, run: u32, message: String },
    #[error("timed out waiting for workflow {0}")]
    Timeout(String),
    #[error("engine is shut down")]
    Shutdown,
}
