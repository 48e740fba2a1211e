use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::Engine;
use crate::payload::Payload;
use crate::retry::{ActivityFailure, RetryPolicy};
use crate::EngineError;

/// What a workflow run returns.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkflowOutcome {
    Complete(Payload),
    /// Ends this run and starts the next one, under the same workflow id,
    /// with a fresh history and this input.
    ContinueAsNew(Payload),
}

/// Terminal failure of a workflow run.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct WorkflowError {
    pub message: String,
}

impl WorkflowError {
    pub fn new(message: impl Into<String>) -> Self {
        WorkflowError { message: message.into() }
    }
}

impl From<ActivityFailure> for WorkflowError {
    fn from(f: ActivityFailure) -> Self {
        WorkflowError::new(f.to_string())
    }
}

impl From<ChildFailure> for WorkflowError {
    fn from(f: ChildFailure) -> Self {
        WorkflowError::new(f.to_string())
    }
}

impl From<EngineError> for WorkflowError {
    fn from(e: EngineError) -> Self {
        WorkflowError::new(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("child workflow {child_id} failed: {message}")]
pub struct ChildFailure {
    pub child_id: String,
    pub message: String,
    /// The engine refused to start or record the child.
    pub rejected: bool,
}

impl ChildFailure {
    pub(crate) fn rejected(child_id: &str, message: String) -> Self {
        ChildFailure { child_id: child_id.to_string(), message, rejected: true }
    }
}

/// Where and how an activity runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityOptions {
    pub queue: String,
    /// Falls back to the engine's default policy.
    pub retry: Option<RetryPolicy>,
}

impl ActivityOptions {
    pub fn on(queue: impl Into<String>) -> Self {
        ActivityOptions { queue: queue.into(), retry: None }
    }

    pub fn retry(mut self, policy: RetryPolicy) -> Self {
        self.retry = Some(policy);
        self
    }
}

/// A scheduled activity whose result has not been collected yet.
#[derive(Debug)]
pub struct ActivityHandle {
    pub(crate) id: u64,
    pub(crate) name: String,
}

/// Passed to activity implementations.
#[derive(Debug, Clone)]
pub struct ActivityContext {
    pub activity: String,
    pub workflow_id: String,
    pub worker: String,
    /// Starts at 1.
    pub attempt: u32,
}

/// The only door from workflow code to the outside world. Randomness and
/// time come from here so that a run's decisions depend only on its inputs.
pub struct WorkflowContext {
    pub(crate) engine: Engine,
    pub(crate) workflow_id: String,
    pub(crate) workflow_type: String,
    pub(crate) run: u32,
    pub(crate) worker: String,
    /// Set when the engine refused to record something; the run fails
    /// whatever the workflow returns.
    pub(crate) poisoned: Option<String>,
}

impl WorkflowContext {
    pub fn workflow_id(&self) -> &str {
        &self.workflow_id
    }

    pub fn workflow_type(&self) -> &str {
        &self.workflow_type
    }

    pub fn run_id(&self) -> u32 {
        self.run
    }

    pub fn worker(&self) -> &str {
        &self.worker
    }

    /// Engine time in milliseconds.
    pub fn now_ms(&self) -> u64 {
        self.engine.inner.now_ms()
    }

    /// Random stream fixed by workflow id and run.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.workflow_id.bytes().chain(self.run.to_le_bytes()) {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    pub fn schedule_activity(
        &mut self,
        name: &str,
        input: Payload,
        options: &ActivityOptions,
    ) -> Result<ActivityHandle, ActivityFailure> {
        self.guard(name)?;
        let r = self.engine.inner.schedule_activity(&self.workflow_id, self.run, name, input, options);
        self.note(r)
    }

    /// Blocks until the activity completes or its failure is final.
    pub fn wait(&mut self, handle: ActivityHandle) -> Result<Payload, ActivityFailure> {
        let r = self.engine.inner.wait_activity(&handle);
        self.note(r)
    }

    pub fn execute_activity(
        &mut self,
        name: &str,
        input: Payload,
        options: &ActivityOptions,
    ) -> Result<Payload, ActivityFailure> {
        let handle = self.schedule_activity(name, input, options)?;
        self.wait(handle)
    }

    /// Runs a child workflow and waits for the last run of its chain.
    pub fn execute_child_workflow(&mut self, name: &str, input: Payload, queue: &str) -> Result<Payload, ChildFailure> {
        if let Some(msg) = &self.poisoned {
            return Err(ChildFailure::rejected(name, msg.clone()));
        }
        let r = self.engine.inner.run_child(&self.workflow_id, self.run, name, input, queue);
        if let Err(f) = &r {
            if f.rejected {
                self.poisoned.get_or_insert_with(|| f.to_string());
            }
        }
        r
    }

    fn guard(&self, name: &str) -> Result<(), ActivityFailure> {
        match &self.poisoned {
            Some(msg) => Err(crate::engine::rejected(name, msg.clone())),
            None => Ok(()),
        }
    }

    fn note<T>(&mut self, r: Result<T, ActivityFailure>) -> Result<T, ActivityFailure> {
        if let Err(f) = &r {
            if f.reason == crate::retry::FailureReason::Rejected {
                self.poisoned.get_or_insert_with(|| f.to_string());
            }
        }
        r
    }
}
