use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::EngineError;

/// How failed activity attempts are retried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis", rename = "initial_backoff_ms")]
    pub initial_backoff: Duration,
    pub backoff_multiplier: f64,
    /// Error kinds that consume their attempt and are never retried.
    pub non_retryable_error_kinds: BTreeSet<String>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(100),
            backoff_multiplier: 2.0,
            non_retryable_error_kinds: BTreeSet::new(),
        }
    }
}

impl RetryPolicy {
    pub fn with_max_attempts(mut self, n: u32) -> Self {
        self.max_attempts = n;
        self
    }

    pub fn with_initial_backoff(mut self, backoff: Duration) -> Self {
        self.initial_backoff = backoff;
        self
    }

    pub fn non_retryable(mut self, kind: impl Into<String>) -> Self {
        self.non_retryable_error_kinds.insert(kind.into());
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_attempts < 1 {
            return Err(EngineError::Config("max_attempts must be at least 1".into()));
        }
        if !(self.backoff_multiplier >= 1.0 && self.backoff_multiplier.is_finite()) {
            return Err(EngineError::Config(format!(
                "backoff_multiplier must be a finite value >= 1, got {}",
                self.backoff_multiplier
            )));
        }
        Ok(())
    }

    /// Delay before attempt `failed_attempt + 1`; attempts count from 1.
    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        let exp = failed_attempt.saturating_sub(1).min(63) as i32;
        let ms = self.initial_backoff.as_secs_f64() * 1e3 * self.backoff_multiplier.powi(exp);
        Duration::from_millis(ms.min(u64::MAX as f64 / 2.0).round() as u64)
    }

    pub fn is_retryable(&self, error: &ActivityError) -> bool {
        error.retryable && !self.non_retryable_error_kinds.contains(&error.kind)
    }
}

/// Failure returned by one activity attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct ActivityError {
    pub kind: String,
    pub message: String,
    pub retryable: bool,
}

impl ActivityError {
    pub fn retryable(kind: impl Into<String>, message: impl Into<String>) -> Self {
        ActivityError { kind: kind.into(), message: message.into(), retryable: true }
    }

    pub fn non_retryable(kind: impl Into<String>, message: impl Into<String>) -> Self {
        ActivityError { kind: kind.into(), message: message.into(), retryable: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    NonRetryable,
    RetryableExhausted,
    /// The engine refused the call: unknown name or queue, a full history,
    /// or shutdown. No attempt ran.
    Rejected,
}

/// What a workflow sees when an activity does not produce a result.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("activity {activity} failed after {attempts} attempt(s) ({reason:?}): {error}")]
pub struct ActivityFailure {
    pub activity: String,
    pub attempts: u32,
    pub reason: FailureReason,
    pub error: ActivityError,
}

pub(crate) mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}
