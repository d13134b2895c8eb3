//! Chat-completions HTTP backend with exponential-backoff retries.
//!
//! Wire shape: `POST {base_url}/chat/completions` with message content parts
//! of type `text` and `image_url` (base64 data URIs); the reply text is read
//! from `choices[0].message.content`. The API key comes from the
//! `FIELDVQA_API_KEY` environment variable and is sent as a bearer token.

use std::fs;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendError, ChatRequest, ChatResponse};
use crate::dataset::ImageRef;

/// Environment variable holding the API key for live backends.
pub const API_KEY_ENV: &str = "FIELDVQA_API_KEY";

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Additional attempts after the first.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub backoff_factor: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            backoff_factor: 2.0,
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let millis =
            self.initial_backoff.as_millis() as f64 * self.backoff_factor.powi(attempt as i32);
        Duration::from_millis(millis as u64).min(self.max_backoff)
    }
}

pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    id: String,
}

impl HttpBackend {
    /// Builds a backend against `base_url`, reading the API key from
    /// [`API_KEY_ENV`] if present.
    pub fn new(base_url: impl Into<String>) -> Result<Self, BackendError> {
        let base_url = base_url.into();
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let id = format!("http:{base_url}");
        Ok(HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            retry: RetryPolicy::default(),
            client,
            id,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn body(&self, request: &ChatRequest) -> Result<Value, BackendError> {
        let mut content = vec![json!({"type": "text", "text": request.prompt.text})];
        for image in &request.prompt.images {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": image_data_uri(image)?},
            }));
        }
        Ok(json!({
            "model": request.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [{"role": "user", "content": content}],
        }))
    }
}

fn image_data_uri(image: &ImageRef) -> Result<String, BackendError> {
    match image {
        ImageRef::Inline { .. } => Ok(image.to_uri()),
        ImageRef::Path(path) => {
            let bytes = fs::read(path).map_err(|e| BackendError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let mime = match path.rsplit('.').next().map(str::to_ascii_lowercase) {
                Some(ext) if ext == "jpg" || ext == "jpeg" => "image/jpeg",
                Some(ext) if ext == "webp" => "image/webp",
                Some(ext) if ext == "gif" => "image/gif",
                _ => "image/png",
            };
            Ok(format!(
                "data:{mime};base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            ))
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = self.body(request)?;
        let url = format!("{}/chat/completions", self.base_url);
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut builder = self.client.post(&url).timeout(request.timeout).json(&body);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let outcome = builder.send();
            let retryable: BackendError = match outcome {
                Ok(response) => {
                    let status = response.status().as_u16();
                    match status {
                        200..=299 => {
                            let value: Value =
                                response.json().map_err(|e| BackendError::BadResponse {
                                    message: e.to_string(),
                                })?;
                            let text = value
                                .pointer("/choices/0/message/content")
                                .and_then(Value::as_str)
                                .ok_or_else(|| BackendError::BadResponse {
                                    message: "choices[0].message.content missing".to_string(),
                                })?;
                            return Ok(ChatResponse {
                                text: text.to_string(),
                                latency: started.elapsed(),
                                backend_id: self.id.clone(),
                                attempt_count: attempt,
                            });
                        }
                        // Auth failures are permanent: fail without retrying.
                        401 | 403 => return Err(BackendError::Auth { status }),
                        429 => BackendError::RateLimitExhausted { attempts: attempt },
                        500..=599 => BackendError::Server {
                            status,
                            attempts: attempt,
                        },
                        _ => {
                            return Err(BackendError::Server {
                                status,
                                attempts: attempt,
                            })
                        }
                    }
                }
                Err(e) if e.is_timeout() => BackendError::Timeout { attempts: attempt },
                Err(e) => BackendError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if attempt > self.retry.max_retries {
                return Err(retryable);
            }
            std::thread::sleep(self.retry.backoff(attempt - 1));
        }
    }
}
