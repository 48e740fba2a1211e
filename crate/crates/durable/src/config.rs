use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::retry::{millis, RetryPolicy};
use crate::EngineError;

/// A deployment unit: which queue it listens on and what it can run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerConfig {
    pub id: String,
    pub queue: String,
    #[serde(default)]
    pub activities: Vec<String>,
    #[serde(default)]
    pub workflows: Vec<String>,
    /// Activity attempts executed at the same time.
    #[serde(default = "one")]
    pub max_concurrent_activities: usize,
    /// Workflow runs hosted at the same time. A parent waiting on a child
    /// occupies a slot, so chains of children need one slot per level.
    #[serde(default = "four")]
    pub max_concurrent_workflows: usize,
    #[serde(default = "default_interval", with = "millis", rename = "heartbeat_interval_ms")]
    pub heartbeat_interval: Duration,
    #[serde(default = "default_timeout", with = "millis", rename = "heartbeat_timeout_ms")]
    pub heartbeat_timeout: Duration,
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

fn default_interval() -> Duration {
    Duration::from_millis(100)
}

fn default_timeout() -> Duration {
    Duration::from_millis(1000)
}

impl WorkerConfig {
    pub fn new(id: impl Into<String>, queue: impl Into<String>) -> Self {
        WorkerConfig {
            id: id.into(),
            queue: queue.into(),
            activities: Vec::new(),
            workflows: Vec::new(),
            max_concurrent_activities: one(),
            max_concurrent_workflows: four(),
            heartbeat_interval: default_interval(),
            heartbeat_timeout: default_timeout(),
        }
    }

    pub fn activity(mut self, name: impl Into<String>) -> Self {
        self.activities.push(name.into());
        self
    }

    pub fn workflow(mut self, name: impl Into<String>) -> Self {
        self.workflows.push(name.into());
        self
    }

    pub fn max_concurrent_activities(mut self, n: usize) -> Self {
        self.max_concurrent_activities = n;
        self
    }

    pub fn max_concurrent_workflows(mut self, n: usize) -> Self {
        self.max_concurrent_workflows = n;
        self
    }

    pub fn heartbeat(mut self, interval: Duration, timeout: Duration) -> Self {
        self.heartbeat_interval = interval;
        self.heartbeat_timeout = timeout;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.id.is_empty() {
            return Err(EngineError::Config("worker id must not be empty".into()));
        }
        if self.max_concurrent_activities < 1 || self.max_concurrent_workflows < 1 {
            return Err(EngineError::Config(format!("worker {}: concurrency limits must be at least 1", self.id)));
        }
        if self.activities.is_empty() && self.workflows.is_empty() {
            return Err(EngineError::Config(format!("worker {} registers nothing", self.id)));
        }
        if self.heartbeat_interval.is_zero() || self.heartbeat_timeout <= self.heartbeat_interval {
            return Err(EngineError::Config(format!(
                "worker {}: heartbeat timeout must exceed a non-zero interval",
                self.id
            )));
        }
        Ok(())
    }
}

/// Queues, retry defaults and worker definitions, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub queues: Vec<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub workers: Vec<WorkerConfig>,
    /// When set, every history event is also appended to
    /// `<dir>/<workflow id>.jsonl`.
    #[serde(default)]
    pub journal_dir: Option<PathBuf>,
}

impl EngineConfig {
    pub fn new<I, S>(queues: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        EngineConfig {
            queues: queues.into_iter().map(Into::into).collect(),
            retry: RetryPolicy::default(),
            workers: Vec::new(),
            journal_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let mut seen = BTreeSet::new();
        for q in &self.queues {
            if q.is_empty() || !seen.insert(q.as_str()) {
                return Err(EngineError::Config(format!("queue name {q:?} is empty or repeated")));
            }
        }
        self.retry.validate()?;
        let mut ids = BTreeSet::new();
        for w in &self.workers {
            w.validate()?;
            if !seen.contains(w.queue.as_str()) {
                return Err(EngineError::UnknownQueue(w.queue.clone()));
            }
            if !ids.insert(w.id.as_str()) {
                return Err(EngineError::Config(format!("worker id {} is repeated", w.id)));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EngineError> {
        let cfg: EngineConfig = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self, EngineError> {
        let cfg: EngineConfig = serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Chooses the format from the extension; anything but `.json` is TOML.
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerConfig> {
        self.workers.iter().find(|w| w.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
queues = ["io", "classify"]

[retry]
max_attempts = 3
initial_backoff_ms = 100
backoff_multiplier = 2.0
non_retryable_error_kinds = ["not-found"]

[[workers]]
id = "w1"
queue = "io"
activities = ["read"]
workflows = ["main"]

[[workers]]
id = "w2"
queue = "classify"
activities = ["classify"]
max_concurrent_activities = 2
heartbeat_timeout_ms = 300
"#;

    #[test]
    fn toml_and_json_agree() {
        let a = EngineConfig::from_toml_str(TOML).unwrap();
        assert_eq!(a.workers[1].max_concurrent_activities, 2);
        assert_eq!(a.workers[1].heartbeat_timeout, Duration::from_millis(300));
        assert_eq!(a.workers[0].heartbeat_interval, Duration::from_millis(100));
        assert!(a.retry.non_retryable_error_kinds.contains("not-found"));
        let b = EngineConfig::from_json_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn worker_on_unknown_queue_is_rejected() {
        let text = TOML.replace("queue = \"classify\"", "queue = \"gpu\"");
        assert_eq!(EngineConfig::from_toml_str(&text), Err(EngineError::UnknownQueue("gpu".into())));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(EngineConfig::from_toml_str("queues = [\"a\"]\nbogus = 1\n").is_err());
    }
}
