use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::config::{EngineConfig, WorkerConfig};
use crate::context::{
    ActivityContext, ActivityHandle, ActivityOptions, ChildFailure, WorkflowContext, WorkflowError, WorkflowOutcome,
};
use crate::history::{AppendError, EventKind, ExportedEvent, HistoryEvent, WorkflowHistory};
use crate::payload::Payload;
use crate::retry::{ActivityError, ActivityFailure, FailureReason, RetryPolicy};
use crate::worker::WorkerHandle;
use crate::EngineError;

pub(crate) type ActivityFn = Arc<dyn Fn(&ActivityContext, Payload) -> Result<Payload, ActivityError> + Send + Sync>;
pub(crate) type WorkflowFn =
    Arc<dyn Fn(&mut WorkflowContext, Payload) -> Result<WorkflowOutcome, WorkflowError> + Send + Sync>;

/// Longest a poller sleeps before re-checking liveness and visibility.
const IDLE_POLL: Duration = Duration::from_millis(50);
const MONITOR_PERIOD: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkflowStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerOutcome {
    Running,
    Completed,
    Failed,
    /// The attempt finished after it had already been timed out, requeued
    /// or its worker killed; the result was discarded.
    Abandoned,
}

/// One delivery of an activity attempt to a worker. Ticks come from a single
/// counter advanced under the engine lock, so intervals compare exactly.
#[derive(Debug, Clone)]
pub struct LedgerEntry {
    pub activity_id: u64,
    pub activity: String,
    pub workflow_id: String,
    pub attempt: u32,
    pub worker: String,
    pub start_tick: u64,
    pub end_tick: Option<u64>,
    pub outcome: LedgerOutcome,
}

impl LedgerEntry {
    pub fn overlaps(&self, other: &LedgerEntry) -> bool {
        let a_end = self.end_tick.unwrap_or(u64::MAX);
        let b_end = other.end_tick.unwrap_or(u64::MAX);
        self.start_tick < b_end && other.start_tick < a_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TaskKind {
    Activity,
    Workflow,
}

#[derive(Debug, Clone)]
pub(crate) enum Task {
    Activity { id: u64, attempt: u32, visible_at: u64 },
    Workflow { id: String, run: u32, visible_at: u64 },
}

impl Task {
    fn visible_at(&self) -> u64 {
        match self {
            Task::Activity { visible_at, .. } | Task::Workflow { visible_at, .. } => *visible_at,
        }
    }
}

pub(crate) enum Claim {
    Activity {
        id: u64,
        attempt: u32,
        name: String,
        input: Payload,
        workflow_id: String,
        injected: Option<ActivityError>,
        ledger: usize,
    },
    Workflow {
        id: String,
        run: u32,
        workflow_type: String,
        input: Payload,
    },
}

enum RunEnd {
    Completed(Payload),
    ContinueAsNew(Payload),
    Failed(String),
}

struct WorkflowRecord {
    workflow_type: String,
    queue: String,
    runs: Vec<WorkflowHistory>,
    input: Payload,
    status: WorkflowStatus,
    result: Option<Result<Payload, String>>,
    children: u64,
}

struct ActivityRecord {
    workflow_id: String,
    run: u32,
    scheduled: u64,
    name: String,
    queue: String,
    policy: RetryPolicy,
    input: Payload,
    attempt: u32,
    /// Worker and ledger slot of the attempt currently executing.
    running: Option<(String, usize)>,
    outcome: Option<Result<Payload, ActivityFailure>>,
}

pub(crate) struct WorkerState {
    pub queue: String,
    pub activities: HashSet<String>,
    pub workflows: HashSet<String>,
    pub alive: bool,
    pub last_heartbeat: Instant,
    pub timeout: Duration,
}

#[derive(Default)]
struct FaultPlan {
    failures: HashMap<String, VecDeque<ActivityError>>,
    delays: HashMap<String, Duration>,
}

#[derive(Default)]
pub(crate) struct State {
    queues: BTreeMap<String, VecDeque<Task>>,
    workflows: BTreeMap<String, WorkflowRecord>,
    activities: HashMap<u64, ActivityRecord>,
    pub(crate) workers: BTreeMap<String, WorkerState>,
    ledger: Vec<LedgerEntry>,
    faults: FaultPlan,
    next_activity: u64,
    next_workflow: u64,
    tick: u64,
    /// Threads currently executing workflow or activity code. A virtual
    /// clock only jumps ahead while this is zero.
    busy: usize,
    pub(crate) shutdown: bool,
}

pub(crate) struct Inner {
    pub(crate) state: Mutex<State>,
    pub(crate) cond: Condvar,
    clock: Arc<dyn Clock>,
    config: EngineConfig,
    activities: RwLock<HashMap<String, ActivityFn>>,
    workflows: RwLock<HashMap<String, WorkflowFn>>,
}

/// Handle to an engine; clones share the same state and are usable from any
/// thread.
#[derive(Clone)]
pub struct Engine {
    pub(crate) inner: Arc<Inner>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        Self::with_clock(config, Arc::new(SystemClock::new()))
    }

    pub fn with_clock(config: EngineConfig, clock: Arc<dyn Clock>) -> Result<Self, EngineError> {
        config.validate()?;
        if let Some(dir) = &config.journal_dir {
            std::fs::create_dir_all(dir).map_err(|e| EngineError::Config(format!("{}: {e}", dir.display())))?;
        }
        let state = State {
            queues: config.queues.iter().map(|q| (q.clone(), VecDeque::new())).collect(),
            ..State::default()
        };
        let inner = Arc::new(Inner {
            state: Mutex::new(state),
            cond: Condvar::new(),
            clock,
            config,
            activities: RwLock::new(HashMap::new()),
            workflows: RwLock::new(HashMap::new()),
        });
        let weak = Arc::downgrade(&inner);
        std::thread::Builder::new()
            .name("durable-monitor".into())
            .spawn(move || monitor(weak))
            .map_err(|e| EngineError::Config(format!("cannot spawn monitor: {e}")))?;
        Ok(Engine { inner })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    pub fn clock(&self) -> &dyn Clock {
        self.inner.clock.as_ref()
    }

    pub fn register_activity<F>(&self, name: &str, f: F)
    where
        F: Fn(&ActivityContext, Payload) -> Result<Payload, ActivityError> + Send + Sync + 'static,
    {
        self.inner.activities.write().insert(name.to_string(), Arc::new(f));
    }

    pub fn register_workflow<F>(&self, name: &str, f: F)
    where
        F: Fn(&mut WorkflowContext, Payload) -> Result<WorkflowOutcome, WorkflowError> + Send + Sync + 'static,
    {
        self.inner.workflows.write().insert(name.to_string(), Arc::new(f));
    }

    /// Starts polling with the given definition. Fails if the queue is not
    /// configured or a name has no registered implementation.
    pub fn run_worker(&self, config: WorkerConfig) -> Result<WorkerHandle, EngineError> {
        config.validate()?;
        self.inner.check_queue(&config.queue)?;
        for a in &config.activities {
            if !self.inner.activities.read().contains_key(a) {
                return Err(EngineError::UnknownActivity(a.clone()));
            }
        }
        for w in &config.workflows {
            if !self.inner.workflows.read().contains_key(w) {
                return Err(EngineError::UnknownWorkflow(w.clone()));
            }
        }
        {
            let mut st = self.inner.state.lock();
            if st.shutdown {
                return Err(EngineError::Shutdown);
            }
            if st.workers.contains_key(&config.id) {
                return Err(EngineError::DuplicateWorker(config.id.clone()));
            }
            st.workers.insert(
                config.id.clone(),
                WorkerState {
                    queue: config.queue.clone(),
                    activities: config.activities.iter().cloned().collect(),
                    workflows: config.workflows.iter().cloned().collect(),
                    alive: true,
                    last_heartbeat: Instant::now(),
                    timeout: config.heartbeat_timeout,
                },
            );
        }
        log::debug!("worker {} polling {}", config.id, config.queue);
        Ok(WorkerHandle::spawn(self.clone(), config))
    }

    /// Runs the worker of that id from the engine configuration.
    pub fn run_configured_worker(&self, id: &str) -> Result<WorkerHandle, EngineError> {
        let cfg = self
            .inner
            .config
            .worker(id)
            .cloned()
            .ok_or_else(|| EngineError::Config(format!("no worker {id:?} in configuration")))?;
        self.run_worker(cfg)
    }

    /// Enqueues a workflow and returns its id without waiting.
    pub fn start_workflow(&self, name: &str, input: Payload, queue: &str) -> Result<String, EngineError> {
        self.inner.check_workflow(name, queue)?;
        let mut st = self.inner.state.lock();
        st.next_workflow += 1;
        let id = format!("{name}-{}", st.next_workflow);
        self.inner.create_workflow(&mut st, &id, name, queue, input)?;
        Ok(id)
    }

    pub fn start_workflow_with_id(
        &self,
        id: &str,
        name: &str,
        input: Payload,
        queue: &str,
    ) -> Result<(), EngineError> {
        self.inner.check_workflow(name, queue)?;
        let mut st = self.inner.state.lock();
        self.inner.create_workflow(&mut st, id, name, queue, input)
    }

    /// Starts a workflow and blocks until its final run ends.
    pub fn execute_workflow(&self, name: &str, input: Payload, queue: &str) -> Result<Payload, EngineError> {
        let id = self.start_workflow(name, input, queue)?;
        self.wait_result(&id)
    }

    pub fn wait_result(&self, id: &str) -> Result<Payload, EngineError> {
        self.wait_inner(id, None)
    }

    pub fn wait_result_timeout(&self, id: &str, timeout: Duration) -> Result<Payload, EngineError> {
        self.wait_inner(id, Some(Instant::now() + timeout))
    }

    fn wait_inner(&self, id: &str, deadline: Option<Instant>) -> Result<Payload, EngineError> {
        let mut st = self.inner.state.lock();
        loop {
            let rec = st.workflows.get(id).ok_or_else(|| EngineError::NotFound(id.to_string()))?;
            match &rec.result {
                Some(Ok(p)) => return Ok(p.clone()),
                Some(Err(message)) => {
                    return Err(EngineError::WorkflowFailed {
                        id: id.to_string(),
                        run: rec.runs.len() as u32,
                        message: message.clone(),
                    })
                }
                None if st.shutdown => return Err(EngineError::Shutdown),
                None => match deadline {
                    Some(d) => {
                        if self.inner.cond.wait_until(&mut st, d).timed_out() && Instant::now() >= d {
                            return Err(EngineError::Timeout(id.to_string()));
                        }
                    }
                    None => self.inner.cond.wait(&mut st),
                },
            }
        }
    }

    pub fn status(&self, id: &str) -> Result<WorkflowStatus, EngineError> {
        let st = self.inner.state.lock();
        st.workflows.get(id).map(|r| r.status).ok_or_else(|| EngineError::NotFound(id.to_string()))
    }

    pub fn workflow_ids(&self) -> Vec<String> {
        self.inner.state.lock().workflows.keys().cloned().collect()
    }

    /// One run's history; the latest run when `run` is `None`.
    pub fn history(&self, id: &str, run: Option<u32>) -> Result<WorkflowHistory, EngineError> {
        let st = self.inner.state.lock();
        let rec = st.workflows.get(id).ok_or_else(|| EngineError::NotFound(id.to_string()))?;
        let run = run.unwrap_or(rec.runs.len() as u32);
        run.checked_sub(1)
            .and_then(|i| rec.runs.get(i as usize))
            .cloned()
            .ok_or_else(|| EngineError::RunNotFound { id: id.to_string(), run })
    }

    /// Every run of a workflow, oldest first.
    pub fn histories(&self, id: &str) -> Result<Vec<WorkflowHistory>, EngineError> {
        let st = self.inner.state.lock();
        st.workflows.get(id).map(|r| r.runs.clone()).ok_or_else(|| EngineError::NotFound(id.to_string()))
    }

    /// Writes every run of `id` as JSONL, one event per line.
    pub fn export_history<W: Write>(&self, id: &str, mut out: W) -> Result<(), EngineError> {
        for h in self.histories(id)? {
            h.write_jsonl(&mut out).map_err(|e| EngineError::Codec(e.to_string()))?;
        }
        Ok(())
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.inner.state.lock().ledger.clone()
    }

    pub fn pending_tasks(&self, queue: &str) -> usize {
        self.inner.state.lock().queues.get(queue).map_or(0, VecDeque::len)
    }

    /// Makes the next attempts of `activity` fail with these errors, in
    /// order, without running the implementation.
    pub fn inject_failures<I: IntoIterator<Item = ActivityError>>(&self, activity: &str, errors: I) {
        let mut st = self.inner.state.lock();
        st.faults.failures.entry(activity.to_string()).or_default().extend(errors);
    }

    /// Holds back every task of `activity` enqueued from now on.
    pub fn delay_delivery(&self, activity: &str, delay: Duration) {
        self.inner.state.lock().faults.delays.insert(activity.to_string(), delay);
    }

    pub fn clear_faults(&self) {
        self.inner.state.lock().faults = FaultPlan::default();
    }

    /// Stops every worker and wakes all waiters; pending workflows are left
    /// unfinished.
    pub fn shutdown(&self) {
        let mut st = self.inner.state.lock();
        st.shutdown = true;
        for w in st.workers.values_mut() {
            w.alive = false;
        }
        self.inner.cond.notify_all();
    }
}

impl Inner {
    pub(crate) fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn check_queue(&self, queue: &str) -> Result<(), EngineError> {
        if self.config.queues.iter().any(|q| q == queue) {
            Ok(())
        } else {
            Err(EngineError::UnknownQueue(queue.to_string()))
        }
    }

    fn check_workflow(&self, name: &str, queue: &str) -> Result<(), EngineError> {
        if !self.workflows.read().contains_key(name) {
            return Err(EngineError::UnknownWorkflow(name.to_string()));
        }
        self.check_queue(queue)
    }

    fn create_workflow(
        &self,
        st: &mut State,
        id: &str,
        workflow_type: &str,
        queue: &str,
        input: Payload,
    ) -> Result<(), EngineError> {
        if st.shutdown {
            return Err(EngineError::Shutdown);
        }
        if st.workflows.contains_key(id) {
            return Err(EngineError::AlreadyExists(id.to_string()));
        }
        st.workflows.insert(
            id.to_string(),
            WorkflowRecord {
                workflow_type: workflow_type.to_string(),
                queue: queue.to_string(),
                runs: vec![WorkflowHistory::new(id, workflow_type, 1)],
                input: input.clone(),
                status: WorkflowStatus::Running,
                result: None,
                children: 0,
            },
        );
        let started = HistoryEvent::new(EventKind::WorkflowStarted).name(workflow_type).queue(queue).payload(input);
        self.append(st, id, 1, started).expect("fresh history accepts its first event");
        let visible_at = self.now_ms();
        st.queues.get_mut(queue).expect("checked queue").push_back(Task::Workflow {
            id: id.to_string(),
            run: 1,
            visible_at,
        });
        self.cond.notify_all();
        Ok(())
    }

    fn append(&self, st: &mut State, id: &str, run: u32, event: HistoryEvent) -> Result<u64, AppendError> {
        let now = self.clock.now_ms();
        let rec = st.workflows.get_mut(id).expect("history of a known workflow");
        let history = &mut rec.runs[run as usize - 1];
        let seq = history.append(event, now)?;
        if let Some(dir) = &self.config.journal_dir {
            journal(dir, history);
        }
        Ok(seq)
    }

    fn enqueue_activity(&self, st: &mut State, id: u64, delay: Duration) {
        let rec = &st.activities[&id];
        let extra = st.faults.delays.get(&rec.name).copied().unwrap_or_default();
        let visible_at = self.now_ms() + (delay + extra).as_millis() as u64;
        let task = Task::Activity { id, attempt: rec.attempt, visible_at };
        let queue = rec.queue.clone();
        st.queues.get_mut(&queue).expect("checked queue").push_back(task);
        self.cond.notify_all();
    }

    pub(crate) fn schedule_activity(
        &self,
        workflow_id: &str,
        run: u32,
        name: &str,
        input: Payload,
        options: &ActivityOptions,
    ) -> Result<ActivityHandle, ActivityFailure> {
        let reject = |msg: String| rejected(name, msg);
        if !self.activities.read().contains_key(name) {
            return Err(reject(EngineError::UnknownActivity(name.to_string()).to_string()));
        }
        self.check_queue(&options.queue).map_err(|e| reject(e.to_string()))?;
        let policy = options.retry.clone().unwrap_or_else(|| self.config.retry.clone());
        policy.validate().map_err(|e| reject(e.to_string()))?;

        let mut st = self.state.lock();
        if st.shutdown {
            return Err(reject(EngineError::Shutdown.to_string()));
        }
        let event = HistoryEvent::new(EventKind::ActivityScheduled)
            .name(name)
            .queue(&options.queue)
            .payload(input.clone());
        let scheduled = self.append(&mut st, workflow_id, run, event).map_err(|e| reject(e.to_string()))?;
        st.next_activity += 1;
        let id = st.next_activity;
        st.activities.insert(
            id,
            ActivityRecord {
                workflow_id: workflow_id.to_string(),
                run,
                scheduled,
                name: name.to_string(),
                queue: options.queue.clone(),
                policy,
                input,
                attempt: 1,
                running: None,
                outcome: None,
            },
        );
        self.enqueue_activity(&mut st, id, Duration::ZERO);
        Ok(ActivityHandle { id, name: name.to_string() })
    }

    pub(crate) fn wait_activity(&self, handle: &ActivityHandle) -> Result<Payload, ActivityFailure> {
        let mut st = self.state.lock();
        st.busy -= 1;
        let out = loop {
            match st.activities.get(&handle.id) {
                Some(rec) if rec.outcome.is_some() => {
                    break st.activities.remove(&handle.id).and_then(|r| r.outcome).expect("checked");
                }
                Some(_) if !st.shutdown => self.cond.wait(&mut st),
                Some(_) => break Err(rejected(&handle.name, EngineError::Shutdown.to_string())),
                None => break Err(rejected(&handle.name, "activity handle already consumed".into())),
            }
        };
        st.busy += 1;
        out
    }

    pub(crate) fn run_child(
        &self,
        parent: &str,
        parent_run: u32,
        name: &str,
        input: Payload,
        queue: &str,
    ) -> Result<Payload, ChildFailure> {
        self.check_workflow(name, queue).map_err(|e| ChildFailure::rejected(name, e.to_string()))?;
        let mut st = self.state.lock();
        let rec = st.workflows.get_mut(parent).expect("parent exists");
        rec.children += 1;
        let child_id = format!("{parent}/{name}-{}", rec.children);
        let event = HistoryEvent::new(EventKind::ChildWorkflowStarted)
            .name(name)
            .queue(queue)
            .child_id(&child_id)
            .payload(input.clone());
        let scheduled = self
            .append(&mut st, parent, parent_run, event)
            .map_err(|e| ChildFailure::rejected(&child_id, e.to_string()))?;
        self.create_workflow(&mut st, &child_id, name, queue, input)
            .map_err(|e| ChildFailure::rejected(&child_id, e.to_string()))?;

        st.busy -= 1;
        let result = loop {
            if let Some(r) = st.workflows.get(&child_id).and_then(|r| r.result.clone()) {
                break r;
            }
            if st.shutdown {
                st.busy += 1;
                return Err(ChildFailure::rejected(&child_id, EngineError::Shutdown.to_string()));
            }
            self.cond.wait(&mut st);
        };
        st.busy += 1;

        let base = HistoryEvent::new(match result {
            Ok(_) => EventKind::ChildWorkflowCompleted,
            Err(_) => EventKind::ChildWorkflowFailed,
        })
        .name(name)
        .child_id(&child_id)
        .scheduled(scheduled);
        let event = match &result {
            Ok(p) => base.payload(p.clone()),
            Err(msg) => base.error(ActivityError::non_retryable("child-failed", msg.clone())),
        };
        self.append(&mut st, parent, parent_run, event)
            .map_err(|e| ChildFailure::rejected(&child_id, e.to_string()))?;
        result.map_err(|message| ChildFailure { child_id, message, rejected: false })
    }

    pub(crate) fn poll(&self, worker: &str, kind: TaskKind) -> Option<Claim> {
        let mut st = self.state.lock();
        loop {
            if st.shutdown {
                return None;
            }
            let w = st.workers.get(worker)?;
            if !w.alive {
                return None;
            }
            let queue = w.queue.clone();
            let now = self.now_ms();
            let q = &st.queues[&queue];
            let found = q.iter().position(|t| t.visible_at() <= now && eligible(&st, w, t, kind));
            if let Some(pos) = found {
                let task = st.queues.get_mut(&queue).expect("exists").remove(pos).expect("in range");
                if let Some(claim) = self.claim(&mut st, worker, task) {
                    return Some(claim);
                }
                continue;
            }
            let next = q.iter().filter(|t| eligible(&st, w, t, kind)).map(Task::visible_at).min();
            if self.clock.is_virtual() {
                let all = st.queues.values().flatten();
                let earliest = all.map(Task::visible_at).min();
                if let Some(t) = earliest.filter(|&t| t > now && st.busy == 0) {
                    self.clock.advance_to(t);
                    self.cond.notify_all();
                    continue;
                }
                self.cond.wait_for(&mut st, IDLE_POLL);
            } else {
                let wait = next.map_or(IDLE_POLL, |t| Duration::from_millis(t.saturating_sub(now)).min(IDLE_POLL));
                self.cond.wait_for(&mut st, wait.max(Duration::from_millis(1)));
            }
        }
    }

    fn claim(&self, st: &mut State, worker: &str, task: Task) -> Option<Claim> {
        match task {
            Task::Workflow { id, run, .. } => {
                let rec = st.workflows.get(&id)?;
                if rec.status != WorkflowStatus::Running || rec.runs.len() as u32 != run {
                    return None;
                }
                let claim = Claim::Workflow {
                    id: id.clone(),
                    run,
                    workflow_type: rec.workflow_type.clone(),
                    input: rec.input.clone(),
                };
                st.busy += 1;
                Some(claim)
            }
            Task::Activity { id, attempt, .. } => {
                let rec = st.activities.get(&id)?;
                if rec.attempt != attempt || rec.outcome.is_some() || rec.running.is_some() {
                    return None;
                }
                let (workflow_id, run, name) = (rec.workflow_id.clone(), rec.run, rec.name.clone());
                let event = HistoryEvent::new(EventKind::ActivityStarted)
                    .name(&name)
                    .queue(&rec.queue)
                    .worker(worker)
                    .attempt(attempt)
                    .scheduled(rec.scheduled);
                let input = rec.input.clone();
                if let Err(e) = self.append(st, &workflow_id, run, event) {
                    let rec = st.activities.get_mut(&id).expect("exists");
                    rec.outcome = Some(Err(rejected(&name, e.to_string())));
                    self.cond.notify_all();
                    return None;
                }
                let injected = st.faults.failures.get_mut(&name).and_then(VecDeque::pop_front);
                st.tick += 1;
                st.ledger.push(LedgerEntry {
                    activity_id: id,
                    activity: name.clone(),
                    workflow_id: workflow_id.clone(),
                    attempt,
                    worker: worker.to_string(),
                    start_tick: st.tick,
                    end_tick: None,
                    outcome: LedgerOutcome::Running,
                });
                let ledger = st.ledger.len() - 1;
                st.activities.get_mut(&id).expect("exists").running = Some((worker.to_string(), ledger));
                st.busy += 1;
                Some(Claim::Activity { id, attempt, name, input, workflow_id, injected, ledger })
            }
        }
    }

    pub(crate) fn activity_fn(&self, name: &str) -> Option<ActivityFn> {
        self.activities.read().get(name).cloned()
    }

    pub(crate) fn workflow_fn(&self, name: &str) -> Option<WorkflowFn> {
        self.workflows.read().get(name).cloned()
    }

    pub(crate) fn finish_activity(
        &self,
        worker: &str,
        id: u64,
        attempt: u32,
        ledger: usize,
        result: Result<Payload, ActivityError>,
    ) {
        let mut st = self.state.lock();
        st.busy -= 1;
        st.tick += 1;
        let tick = st.tick;
        st.ledger[ledger].end_tick = Some(tick);
        let alive = st.workers.get(worker).is_some_and(|w| w.alive);
        let current = st.activities.get(&id).is_some_and(|r| {
            r.attempt == attempt && r.outcome.is_none() && r.running.as_ref().is_some_and(|(w, _)| w == worker)
        });
        if !alive || !current {
            st.ledger[ledger].outcome = LedgerOutcome::Abandoned;
            self.cond.notify_all();
            return;
        }
        match result {
            Ok(payload) => {
                st.ledger[ledger].outcome = LedgerOutcome::Completed;
                let rec = st.activities.get_mut(&id).expect("current");
                rec.running = None;
                let (wid, run, name) = (rec.workflow_id.clone(), rec.run, rec.name.clone());
                let event = HistoryEvent::new(EventKind::ActivityCompleted)
                    .name(&name)
                    .worker(worker)
                    .attempt(attempt)
                    .scheduled(rec.scheduled)
                    .payload(payload.clone());
                let outcome = match self.append(&mut st, &wid, run, event) {
                    Ok(_) => Ok(payload),
                    Err(e) => Err(rejected(&name, e.to_string())),
                };
                st.activities.get_mut(&id).expect("current").outcome = Some(outcome);
            }
            Err(error) => {
                st.ledger[ledger].outcome = LedgerOutcome::Failed;
                self.fail_attempt(&mut st, id, error, Some(worker));
            }
        }
        self.cond.notify_all();
    }

    /// Records a failed attempt and either schedules the next one or hands
    /// the failure to the waiting workflow.
    fn fail_attempt(&self, st: &mut State, id: u64, error: ActivityError, worker: Option<&str>) {
        let Some(rec) = st.activities.get_mut(&id) else { return };
        rec.running = None;
        let attempt = rec.attempt;
        let retry = rec.policy.is_retryable(&error) && attempt < rec.policy.max_attempts;
        let backoff = rec.policy.backoff(attempt);
        let (wid, run, name, scheduled) = (rec.workflow_id.clone(), rec.run, rec.name.clone(), rec.scheduled);

        let mut event = HistoryEvent::new(EventKind::ActivityFailed)
            .name(&name)
            .attempt(attempt)
            .scheduled(scheduled)
            .error(error.clone());
        if let Some(w) = worker {
            event = event.worker(w);
        }
        log::debug!("{name} attempt {attempt} of {wid} failed: {error}");
        let mut appended = self.append(st, &wid, run, event);
        if retry && appended.is_ok() {
            let event = HistoryEvent::new(EventKind::ActivityRetryScheduled)
                .name(&name)
                .attempt(attempt + 1)
                .scheduled(scheduled)
                .backoff_ms(backoff.as_millis() as u64);
            appended = self.append(st, &wid, run, event);
            if appended.is_ok() {
                st.activities.get_mut(&id).expect("exists").attempt += 1;
                self.enqueue_activity(st, id, backoff);
                return;
            }
        }
        let rec = st.activities.get_mut(&id).expect("exists");
        rec.outcome = Some(Err(match appended {
            Err(e) => rejected(&name, e.to_string()),
            Ok(_) => ActivityFailure {
                activity: name,
                attempts: attempt,
                reason: if error.retryable && !rec.policy.non_retryable_error_kinds.contains(&error.kind) {
                    FailureReason::RetryableExhausted
                } else {
                    FailureReason::NonRetryable
                },
                error,
            },
        }));
        self.cond.notify_all();
    }

    pub(crate) fn finish_workflow(
        &self,
        id: &str,
        run: u32,
        result: Result<WorkflowOutcome, WorkflowError>,
    ) {
        let end = match result {
            Ok(WorkflowOutcome::Complete(p)) => RunEnd::Completed(p),
            Ok(WorkflowOutcome::ContinueAsNew(p)) => RunEnd::ContinueAsNew(p),
            Err(e) => RunEnd::Failed(e.message),
        };
        let mut st = self.state.lock();
        st.busy -= 1;
        self.close_run(&mut st, id, run, end);
        self.cond.notify_all();
    }

    fn close_run(&self, st: &mut State, id: &str, run: u32, end: RunEnd) {
        let failed = |msg: &str| {
            HistoryEvent::new(EventKind::WorkflowFailed).error(ActivityError::non_retryable("workflow-failed", msg))
        };
        let end = match end {
            RunEnd::Completed(p) => {
                match self.append(st, id, run, HistoryEvent::new(EventKind::WorkflowCompleted).payload(p.clone())) {
                    Ok(_) => {
                        let rec = st.workflows.get_mut(id).expect("exists");
                        rec.status = WorkflowStatus::Completed;
                        rec.result = Some(Ok(p));
                        return;
                    }
                    Err(e) => e.to_string(),
                }
            }
            RunEnd::ContinueAsNew(p) => {
                let closing = HistoryEvent::new(EventKind::WorkflowContinuedAsNew).payload(p.clone());
                match self.append(st, id, run, closing) {
                    Ok(_) => {
                        let rec = st.workflows.get_mut(id).expect("exists");
                        let next = run + 1;
                        rec.runs.push(WorkflowHistory::new(id, &rec.workflow_type, next));
                        rec.input = p.clone();
                        let (wtype, queue) = (rec.workflow_type.clone(), rec.queue.clone());
                        let started =
                            HistoryEvent::new(EventKind::WorkflowStarted).name(&wtype).queue(&queue).payload(p);
                        self.append(st, id, next, started).expect("fresh history accepts its first event");
                        let visible_at = self.now_ms();
                        st.queues.get_mut(&queue).expect("checked queue").push_back(Task::Workflow {
                            id: id.to_string(),
                            run: next,
                            visible_at,
                        });
                        return;
                    }
                    Err(e) => e.to_string(),
                }
            }
            RunEnd::Failed(msg) => msg,
        };
        log::warn!("workflow {id} run {run} failed: {end}");
        if let Err(e) = self.append(st, id, run, failed(&end)) {
            log::error!("cannot record failure of {id}: {e}");
        }
        let rec = st.workflows.get_mut(id).expect("exists");
        rec.status = WorkflowStatus::Failed;
        rec.result = Some(Err(end));
    }

    /// Graceful stop: in-flight attempts are failed as retryable so other
    /// workers pick them up at once.
    pub(crate) fn stop_worker(&self, worker: &str, requeue: bool) {
        let mut st = self.state.lock();
        let Some(w) = st.workers.get_mut(worker) else { return };
        w.alive = false;
        if requeue {
            let mut inflight: Vec<u64> = st
                .activities
                .iter()
                .filter(|(_, r)| r.running.as_ref().is_some_and(|(w, _)| w == worker))
                .map(|(&id, _)| id)
                .collect();
            inflight.sort_unstable();
            for id in inflight {
                let err = ActivityError::retryable("worker-shutdown", format!("worker {worker} shut down"));
                self.fail_attempt(&mut st, id, err, Some(worker));
            }
        }
        self.cond.notify_all();
    }

    pub(crate) fn heartbeat(&self, worker: &str) -> bool {
        let mut st = self.state.lock();
        let shutdown = st.shutdown;
        match st.workers.get_mut(worker) {
            Some(w) if w.alive && !shutdown => {
                w.last_heartbeat = Instant::now();
                true
            }
            _ => false,
        }
    }

    fn check_heartbeats(&self) {
        let mut st = self.state.lock();
        let mut expired: Vec<(u64, String)> = st
            .activities
            .iter()
            .filter_map(|(&id, r)| {
                let (w, _) = r.running.as_ref()?;
                let ws = st.workers.get(w)?;
                (ws.last_heartbeat.elapsed() > ws.timeout).then(|| (id, w.clone()))
            })
            .collect();
        expired.sort();
        for (id, w) in expired {
            let err = ActivityError::retryable("heartbeat-timeout", format!("worker {w} stopped heartbeating"));
            self.fail_attempt(&mut st, id, err, Some(&w));
        }
    }
}

fn eligible(st: &State, w: &WorkerState, task: &Task, kind: TaskKind) -> bool {
    match (task, kind) {
        (Task::Activity { id, .. }, TaskKind::Activity) => {
            st.activities.get(id).is_none_or(|r| w.activities.contains(&r.name))
        }
        (Task::Workflow { id, .. }, TaskKind::Workflow) => {
            st.workflows.get(id).is_none_or(|r| w.workflows.contains(&r.workflow_type))
        }
        _ => false,
    }
}

pub(crate) fn rejected(activity: &str, message: String) -> ActivityFailure {
    ActivityFailure {
        activity: activity.to_string(),
        attempts: 0,
        reason: FailureReason::Rejected,
        error: ActivityError::non_retryable("rejected", message),
    }
}

fn journal(dir: &Path, history: &WorkflowHistory) {
    let name: String = history
        .workflow_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let path = dir.join(format!("{name}.jsonl"));
    let event = history.events.last().expect("just appended");
    let line = ExportedEvent { workflow_id: &history.workflow_id, run_id: history.run_id, event };
    let written = std::fs::OpenOptions::new().create(true).append(true).open(&path).and_then(|mut f| {
        let mut text = serde_json::to_vec(&line).map_err(std::io::Error::other)?;
        text.push(b'\n');
        f.write_all(&text)
    });
    if let Err(e) = written {
        log::warn!("journal {}: {e}", path.display());
    }
}

fn monitor(inner: Weak<Inner>) {
    loop {
        std::thread::sleep(MONITOR_PERIOD);
        let Some(inner) = inner.upgrade() else { return };
        if inner.state.lock().shutdown {
            return;
        }
        inner.check_heartbeats();
    }
}
