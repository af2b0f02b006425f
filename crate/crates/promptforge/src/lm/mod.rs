//! Uniform text-in/text-out LM access: a scripted backend for tests, an
//! HTTP client for OpenAI-style completion APIs, a content-addressed
//! response cache, and a call-ceiling guard used by optimizer budgets.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

mod cache;
mod http;
mod scripted;

pub use cache::{cache_key, with_cache, CacheEntry, CacheError, CacheStore, CachedLm, JsonlCache, MemoryCache};
pub use http::{HttpConfig, HttpLm};
pub use scripted::{CallbackLm, RuleMatcher, ScriptedLm, ScriptedRule};

/// One completion request. Every field participates in the cache key, seed
/// included, so distinct optimizer trials stay distinguishable in replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum LmError {
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { message: String, attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("bad response: {message}")]
    BadResponse { message: String },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("LM call ceiling reached")]
    BudgetExhausted,
}

/// Text-in/text-out completion backend.
pub trait LmBackend: Send + Sync {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError>;
    fn model_id(&self) -> &str;
}

impl<T: LmBackend + ?Sized> LmBackend for &T {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        (**self).complete(request)
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

impl<T: LmBackend + ?Sized> LmBackend for Box<T> {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        (**self).complete(request)
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

impl<T: LmBackend + ?Sized> LmBackend for Arc<T> {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        (**self).complete(request)
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

/// Truncates at the first stop sequence, then at `max_tokens` whitespace
/// tokens (original spacing preserved).
pub fn truncate_completion(text: &str, stop_sequences: &[String], max_tokens: u32) -> String {
    let mut cut = text.len();
    for stop in stop_sequences {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            cut = cut.min(pos);
        }
    }
    let text = &text[..cut];
    if max_tokens > 0 {
        let mut tokens = 0u32;
        let mut in_token = false;
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                in_token = false;
            } else if !in_token {
                in_token = true;
                tokens += 1;
                if tokens > max_tokens {
                    return text[..i].trim_end().to_string();
                }
            }
        }
    }
    text.to_string()
}

/// Append-only, internally synchronized request log shared between backends,
/// used by tests to assert call budgets.
#[derive(Clone, Default)]
pub struct CallLog(Arc<Mutex<Vec<LmRequest>>>);

impl CallLog {
    pub fn new() -> Self {
        CallLog::default()
    }

    pub(crate) fn push(&self, request: &LmRequest) {
        self.0.lock().expect("call log poisoned").push(request.clone());
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<LmRequest> {
        self.0.lock().expect("call log poisoned").clone()
    }
}

/// Backend that always fails. Together with a populated cache this gives an
/// offline replay backend: every request must hit the cache.
pub struct FailingLm {
    model: String,
}

impl FailingLm {
    pub fn new(model: impl Into<String>) -> Self {
        FailingLm { model: model.into() }
    }
}

impl LmBackend for FailingLm {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        Err(LmError::Network {
            message: format!(
                "offline backend cannot serve request of {} bytes",
                request.prompt.len()
            ),
            attempts: 0,
        })
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

/// Shared counter for a call ceiling across several backends.
#[derive(Clone, Default)]
pub struct CallCounter(Arc<AtomicUsize>);

impl CallCounter {
    pub fn new() -> Self {
        CallCounter::default()
    }

    pub fn used(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
}

/// Enforces a hard ceiling on the number of completions; once `ceiling`
/// calls have been admitted every further call fails with
/// [`LmError::BudgetExhausted`] before reaching the inner backend.
pub struct BudgetedLm<B> {
    inner: B,
    counter: CallCounter,
    ceiling: usize,
}

impl<B: LmBackend> BudgetedLm<B> {
    pub fn new(inner: B, counter: CallCounter, ceiling: usize) -> Self {
        BudgetedLm {
            inner,
            counter,
            ceiling,
        }
    }
}

impl<B: LmBackend> LmBackend for BudgetedLm<B> {
    fn complete(&self, request: &LmRequest) -> Result<String, LmError> {
        let admitted = self
            .counter
            .0
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |used| {
                (used < self.ceiling).then_some(used + 1)
            })
            .is_ok();
        if !admitted {
            return Err(LmError::BudgetExhausted);
        }
        self.inner.complete(request)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

#[cfg(test)]
pub(crate) fn request(prompt: &str) -> LmRequest {
    LmRequest {
        model_id: "scripted".to_string(),
        prompt: prompt.to_string(),
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: 256,
        stop_sequences: vec![],
        seed: 0,
    }
}
