use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::*;

/// Bounded retries with exponential backoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 250,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Same attempt budget, no sleeping, no jitter.
    pub fn immediate() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 0,
            jitter: false,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
        let ms = if self.jitter && base > 0 {
            rand::rng().random_range(base / 2..=base)
        } else {
            base
        };
        Duration::from_millis(ms)
    }

    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent. Failures always report the attempt count.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < max => {
                    let d = self.delay(attempt - 1);
                    if !d.is_zero() {
                        thread::sleep(d);
                    }
                }
                Err(e) => {
                    return Err(BackendError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
            }
        }
    }
}

/// Any backend wrapped in a [`RetryPolicy`].
#[derive(Debug, Clone)]
pub struct Retrying<B> {
    pub inner: B,
    pub policy: RetryPolicy,
}

impl<B> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<B: EmbedBackend> EmbedBackend for Retrying<B> {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        self.policy.run(|| self.inner.embed(req))
    }
}

impl<B: ChatBackend> ChatBackend for Retrying<B> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.policy.run(|| self.inner.chat(req))
    }
}

impl<B: CaptionBackend> CaptionBackend for Retrying<B> {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
        self.policy.run(|| self.inner.caption(req))
    }
}

impl<B: VqaBackend> VqaBackend for Retrying<B> {
    fn vqa(&self, req: &VqaRequest) -> Result<VqaResponse, BackendError> {
        self.policy.run(|| self.inner.vqa(req))
    }
}

impl<B: ScoreBackend> ScoreBackend for Retrying<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.policy.run(|| self.inner.score(req))
    }
}
