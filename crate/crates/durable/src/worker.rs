use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::config::WorkerConfig;
use crate::context::{ActivityContext, WorkflowContext, WorkflowError};
use crate::engine::{Claim, Engine, TaskKind};
use crate::retry::ActivityError;

/// A running worker. Dropping the handle shuts it down gracefully.
pub struct WorkerHandle {
    engine: Engine,
    id: String,
    threads: Vec<JoinHandle<()>>,
    stopped: Arc<AtomicBool>,
}

impl WorkerHandle {
    pub(crate) fn spawn(engine: Engine, config: WorkerConfig) -> Self {
        let mut threads = Vec::new();
        let stopped = Arc::new(AtomicBool::new(false));
        let slots = |n: usize, enabled: bool| if enabled { n } else { 0 };
        for i in 0..slots(config.max_concurrent_activities, !config.activities.is_empty()) {
            let (e, id) = (engine.clone(), config.id.clone());
            threads.push(spawn_named(format!("{id}-act{i}"), move || activity_loop(&e, &id)));
        }
        for i in 0..slots(config.max_concurrent_workflows, !config.workflows.is_empty()) {
            let (e, id) = (engine.clone(), config.id.clone());
            threads.push(spawn_named(format!("{id}-wf{i}"), move || workflow_loop(&e, &id)));
        }
        let (e, id, interval) = (engine.clone(), config.id.clone(), config.heartbeat_interval);
        threads.push(spawn_named(format!("{id}-hb"), move || {
            while e.inner.heartbeat(&id) {
                std::thread::sleep(interval);
            }
        }));
        WorkerHandle { engine, id: config.id, threads, stopped }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Stops polling and hands in-flight activity attempts back to the queue
    /// as retryable failures. Workflow runs in progress finish normally.
    pub fn shutdown(mut self) {
        self.stop(true);
    }

    /// Simulates a crash: heartbeats stop and in-flight results are thrown
    /// away, so the engine only retries once the heartbeat timeout expires.
    pub fn kill(mut self) {
        self.stop(false);
    }

    fn stop(&mut self, graceful: bool) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        log::debug!("worker {} stopping (graceful: {graceful})", self.id);
        self.engine.inner.stop_worker(&self.id, graceful);
        // Threads still inside user code finish in the background.
        self.threads.clear();
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.stop(true);
    }
}

fn spawn_named<F: FnOnce() + Send + 'static>(name: String, f: F) -> JoinHandle<()> {
    std::thread::Builder::new().name(name).spawn(f).expect("spawn worker thread")
}

fn activity_loop(engine: &Engine, worker: &str) {
    while let Some(claim) = engine.inner.poll(worker, TaskKind::Activity) {
        let Claim::Activity { id, attempt, name, input, workflow_id, injected, ledger } = claim else {
            unreachable!("activity poll returned a workflow task")
        };
        let result = match injected {
            Some(err) => Err(err),
            None => match engine.inner.activity_fn(&name) {
                Some(f) => {
                    let ctx = ActivityContext { activity: name.clone(), workflow_id, worker: worker.to_string(), attempt };
                    catch_unwind(AssertUnwindSafe(|| f(&ctx, input)))
                        .unwrap_or_else(|p| Err(ActivityError::retryable("panic", panic_message(p))))
                }
                None => Err(ActivityError::non_retryable("unregistered", format!("no activity {name}"))),
            },
        };
        engine.inner.finish_activity(worker, id, attempt, ledger, result);
    }
}

fn workflow_loop(engine: &Engine, worker: &str) {
    while let Some(claim) = engine.inner.poll(worker, TaskKind::Workflow) {
        let Claim::Workflow { id, run, workflow_type, input } = claim else {
            unreachable!("workflow poll returned an activity task")
        };
        let mut ctx = WorkflowContext {
            engine: engine.clone(),
            workflow_id: id.clone(),
            workflow_type: workflow_type.clone(),
            run,
            worker: worker.to_string(),
            poisoned: None,
        };
        let result = match engine.inner.workflow_fn(&workflow_type) {
            Some(f) => catch_unwind(AssertUnwindSafe(|| f(&mut ctx, input)))
                .unwrap_or_else(|p| Err(WorkflowError::new(format!("panic: {}", panic_message(p))))),
            None => Err(WorkflowError::new(format!("no workflow {workflow_type}"))),
        };
        let result = match ctx.poisoned.take() {
            Some(msg) => Err(WorkflowError::new(msg)),
            None => result,
        };
        engine.inner.finish_workflow(&id, run, result);
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}
