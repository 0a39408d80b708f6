use std::thread;
use std::time::Duration;

use super::{ChatTurn, ClientError, ModelClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles on every further retry.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff: Duration::from_millis(250),
        }
    }
}

/// Runs `op` until it succeeds, fails with a non-transient error, or has been
/// attempted `1 + max_retries` times.
pub fn with_retries<T>(
    policy: RetryPolicy,
    mut op: impl FnMut() -> Result<T, ClientError>,
) -> Result<T, ClientError> {
    let mut attempt = 0u32;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() && attempt < policy.max_retries => {
                let delay = policy.base_backoff.saturating_mul(1 << attempt.min(16));
                log::debug!(
                    "transient backend failure ({e}); retry {} in {delay:?}",
                    attempt + 1
                );
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Wraps any client with the retry policy.
pub struct Retrying<C> {
    pub inner: C,
    pub policy: RetryPolicy,
}

impl<C: ModelClient> ModelClient for Retrying<C> {
    fn respond(&self, turns: &[ChatTurn], stop: &[String]) -> Result<String, ClientError> {
        with_retries(self.policy, || self.inner.respond(turns, stop))
    }
}
