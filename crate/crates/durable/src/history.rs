use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::payload::{Payload, MAX_HISTORY_BYTES};
use crate::retry::ActivityError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    WorkflowStarted,
    ActivityScheduled,
    ActivityStarted,
    ActivityCompleted,
    ActivityFailed,
    ActivityRetryScheduled,
    ChildWorkflowStarted,
    ChildWorkflowCompleted,
    ChildWorkflowFailed,
    WorkflowContinuedAsNew,
    WorkflowCompleted,
    WorkflowFailed,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            EventKind::WorkflowCompleted | EventKind::WorkflowFailed | EventKind::WorkflowContinuedAsNew
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    /// Activity type, or workflow type for child workflow events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<String>,
    /// Sequence number of the `ActivityScheduled` or `ChildWorkflowStarted`
    /// event this one belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduled: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backoff_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ActivityError>,
}

impl HistoryEvent {
    pub fn new(kind: EventKind) -> Self {
        HistoryEvent {
            seq: 0,
            kind,
            timestamp_ms: 0,
            worker: None,
            attempt: None,
            name: None,
            queue: None,
            scheduled: None,
            child_id: None,
            backoff_ms: None,
            payload: None,
            error: None,
        }
    }

    pub fn worker(mut self, worker: &str) -> Self {
        self.worker = Some(worker.to_string());
        self
    }

    pub fn attempt(mut self, attempt: u32) -> Self {
        self.attempt = Some(attempt);
        self
    }

    pub fn name(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn queue(mut self, queue: &str) -> Self {
        self.queue = Some(queue.to_string());
        self
    }

    pub fn scheduled(mut self, seq: u64) -> Self {
        self.scheduled = Some(seq);
        self
    }

    pub fn child_id(mut self, id: &str) -> Self {
        self.child_id = Some(id.to_string());
        self
    }

    pub fn backoff_ms(mut self, ms: u64) -> Self {
        self.backoff_ms = Some(ms);
        self
    }

    pub fn payload(mut self, payload: Payload) -> Self {
        self.payload = Some(payload);
        self
    }

    pub fn error(mut self, error: ActivityError) -> Self {
        self.error = Some(error);
        self
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload.as_ref().map_or(0, Payload::size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppendError {
    #[error("history of run {run} is closed")]
    Closed { run: u32 },
    #[error("history would hold {bytes} payload bytes, limit {limit}")]
    TooLarge { bytes: usize, limit: usize },
}

/// Append-only event log of one run of a workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowHistory {
    pub workflow_id: String,
    pub workflow_type: String,
    /// Runs are numbered from 1; continue-as-new starts the next number.
    pub run_id: u32,
    pub events: Vec<HistoryEvent>,
    pub payload_bytes: usize,
}

impl WorkflowHistory {
    pub fn new(workflow_id: &str, workflow_type: &str, run_id: u32) -> Self {
        WorkflowHistory {
            workflow_id: workflow_id.to_string(),
            workflow_type: workflow_type.to_string(),
            run_id,
            events: Vec::new(),
            payload_bytes: 0,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.events.last().is_some_and(|e| e.kind.is_terminal())
    }

    pub fn terminal(&self) -> Option<&HistoryEvent> {
        self.events.last().filter(|e| e.kind.is_terminal())
    }

    /// Assigns the next sequence number and timestamp; rejects events after a
    /// terminal one and events that would overflow the byte budget.
    pub fn append(&mut self, mut event: HistoryEvent, timestamp_ms: u64) -> Result<u64, AppendError> {
        if self.is_closed() {
            return Err(AppendError::Closed { run: self.run_id });
        }
        let bytes = self.payload_bytes + event.payload_bytes();
        if bytes > MAX_HISTORY_BYTES {
            return Err(AppendError::TooLarge { bytes, limit: MAX_HISTORY_BYTES });
        }
        event.seq = self.events.len() as u64 + 1;
        event.timestamp_ms = timestamp_ms;
        self.payload_bytes = bytes;
        self.events.push(event);
        Ok(self.events.len() as u64)
    }

    pub fn kinds(&self) -> Vec<EventKind> {
        self.events.iter().map(|e| e.kind).collect()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &HistoryEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Structural invariants every history satisfies; returns the first
    /// violation found.
    pub fn check(&self) -> Result<(), String> {
        let mut scheduled = BTreeSet::new();
        let mut last_ts = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.seq != i as u64 + 1 {
                return Err(format!("event {i} has seq {}", e.seq));
            }
            if e.timestamp_ms < last_ts {
                return Err(format!("timestamp decreases at seq {}", e.seq));
            }
            last_ts = e.timestamp_ms;
            if i == 0 && e.kind != EventKind::WorkflowStarted {
                return Err("history does not begin with WorkflowStarted".into());
            }
            if e.kind.is_terminal() && i + 1 != self.events.len() {
                return Err(format!("events after terminal seq {}", e.seq));
            }
            match e.kind {
                EventKind::ActivityScheduled | EventKind::ChildWorkflowStarted => {
                    scheduled.insert(e.seq);
                }
                EventKind::ActivityStarted
                | EventKind::ActivityCompleted
                | EventKind::ActivityFailed
                | EventKind::ActivityRetryScheduled
                | EventKind::ChildWorkflowCompleted
                | EventKind::ChildWorkflowFailed => match e.scheduled {
                    Some(s) if scheduled.contains(&s) => {}
                    _ => return Err(format!("seq {} has no matching schedule event", e.seq)),
                },
                _ => {}
            }
        }
        let payload: usize = self.events.iter().map(HistoryEvent::payload_bytes).sum();
        if payload != self.payload_bytes || payload > MAX_HISTORY_BYTES {
            return Err(format!("payload accounting {} vs {}", payload, self.payload_bytes));
        }
        Ok(())
    }

    /// One JSON object per event.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, &ExportedEvent { workflow_id: &self.workflow_id, run_id: self.run_id, event: e })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
pub(crate) struct ExportedEvent<'a> {
    pub workflow_id: &'a str,
    pub run_id: u32,
    #[serde(flatten)]
    pub event: &'a HistoryEvent,
}
