//! Model backends: a live chat-completions HTTP client and a deterministic
//! scripted mock, plus order-preserving bounded-parallel batch dispatch.

mod http;
mod mock;

pub use http::{HttpBackend, RetryPolicy, API_KEY_ENV};
pub use mock::{CorruptionRule, MockBackend, MockEntry, MockScript};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::prompt::{RenderedPrompt, Strategy};

/// One prompt dispatch to a model.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: RenderedPrompt,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
    /// Document the prompt queries; keys mock scripts and archives.
    pub doc_id: String,
    pub strategy: Strategy,
}

impl ChatRequest {
    pub fn new(
        model: impl Into<String>,
        prompt: RenderedPrompt,
        doc_id: impl Into<String>,
        strategy: Strategy,
    ) -> Self {
        ChatRequest {
            model: model.into(),
            prompt,
            temperature: 0.0,
            max_tokens: 256,
            timeout: Duration::from_secs(60),
            doc_id: doc_id.into(),
            strategy,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature < 0.0 {
            return Err(BackendError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Config("max_tokens must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// A model reply; `text` is recorded verbatim for audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
    pub attempt_count: u32,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimitExhausted { attempts: u32 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned status {status} after {attempts} attempt(s)")]
    Server { status: u16, attempts: u32 },
    #[error("unexpected response shape: {message}")]
    BadResponse { message: String },
    #[error("no scripted response for doc `{doc_id}`, strategy {strategy}, fields [{fields}]")]
    MissingMockEntry {
        doc_id: String,
        strategy: Strategy,
        fields: String,
    },
    #[error("image `{path}` unusable: {message}")]
    Image { path: String, message: String },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Errors that should never be retried.
    pub fn is_permanent(&self) -> bool {
        matches!(
            self,
            BackendError::Auth { .. }
                | BackendError::MissingMockEntry { .. }
                | BackendError::Config(_)
                | BackendError::Image { .. }
        )
    }
}

/// Sends a rendered prompt plus images to a model and returns raw text.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Dispatches requests with at most `parallelism` in flight, returning
/// responses in request order regardless of completion order. Per-request
/// failures are reported positionally without aborting the batch.
pub fn send_batch(
    backend: &dyn Backend,
    requests: &[ChatRequest],
    parallelism: usize,
) -> Result<Vec<Result<ChatResponse, BackendError>>, BackendError> {
    if parallelism == 0 {
        return Err(BackendError::Config("parallelism must be >= 1".to_string()));
    }
    let slots: Mutex<Vec<Option<Result<ChatResponse, BackendError>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = parallelism.min(requests.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= requests.len() {
                    break;
                }
                let result = backend.send(&requests[idx]);
                slots.lock().expect("worker panicked")[idx] = Some(result);
            });
        }
    });
    let results = slots.into_inner().expect("worker panicked");
    Ok(results
        .into_iter()
        .map(|slot| slot.expect("every slot filled"))
        .collect())
}
