//! Blocking chat-completions client with bounded concurrency and
//! exponential backoff on transient failures.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::RETRY_AFTER;
use reqwest::StatusCode;
use serde_json::{json, Value};
use thiserror::Error;

use super::InferenceRequest;

pub const API_KEY_ENV: &str = "COT4DET_API_KEY";
pub const ENDPOINT_ENV: &str = "COT4DET_ENDPOINT";
pub const DEFAULT_CONCURRENCY: usize = 8;
pub const DEFAULT_RETRIES: u32 = 5;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected credentials (HTTP {status})")]
    Auth { status: u16 },
    #[error("endpoint refused request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("response has no assistant message content: {0}")]
    ResponseShape(String),
    #[error("cannot build HTTP client: {0}")]
    Setup(String),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Retries after the first attempt.
    pub retries: u32,
    pub concurrency: usize,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub timeout: Duration,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ClientConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retries: DEFAULT_RETRIES,
            concurrency: DEFAULT_CONCURRENCY,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            timeout: Duration::from_secs(300),
        }
    }

    /// Delay before retry number `retry` (0-based), before any server hint.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(30));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore; permits are returned on drop.
struct Semaphore {
    free: Mutex<usize>,
    ready: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n.max(1)),
            ready: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.ready.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.ready.notify_one();
    }
}

/// One sleep taken between attempts.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryEvent {
    pub attempt: u32,
    pub reason: String,
    pub delay: Duration,
}

pub struct ChatClient {
    http: Client,
    config: ClientConfig,
    permits: Semaphore,
}

enum Attempt {
    Done(String),
    Retry { reason: String, hint: Option<Duration> },
    Fatal(ClientError),
}

/// Local paths become `file://` URLs; anything with a scheme passes through.
fn image_url(image: &str) -> String {
    if image.contains("://") || image.starts_with("data:") {
        return image.to_string();
    }
    let path = std::path::Path::new(image);
    let abs = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(path)).unwrap_or_else(|_| path.to_path_buf())
    };
    format!("file://{}", abs.display())
}

/// The `<image>` placeholder is dropped from the text part; the image
/// travels as its own content part.
fn text_part(prompt: &str) -> &str {
    prompt.strip_prefix("<image>").map(str::trim_start).unwrap_or(prompt)
}

pub fn request_body(model: &str, req: &InferenceRequest) -> Value {
    json!({
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "image_url", "image_url": {"url": image_url(&req.image)}},
                {"type": "text", "text": text_part(&req.prompt)},
            ],
        }],
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    })
}

pub fn assistant_text(body: &Value) -> Option<&str> {
    body.get("choices")?.get(0)?.get("message")?.get("content")?.as_str()
}

impl ChatClient {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let http = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::Setup(e.to_string()))?;
        Ok(ChatClient {
            http,
            permits: Semaphore::new(config.concurrency),
            config,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn complete(&self, req: &InferenceRequest) -> Result<String, ClientError> {
        self.complete_with_trace(req).map(|(text, _)| text)
    }

    /// Like [`complete`](Self::complete), also returning every backoff taken.
    pub fn complete_with_trace(&self, req: &InferenceRequest) -> Result<(String, Vec<RetryEvent>), ClientError> {
        let body = request_body(&self.config.model, req);
        let mut trace = Vec::new();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.permits.acquire();
                self.attempt(&body)
            };
            match outcome {
                Attempt::Done(text) => return Ok((text, trace)),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry { reason, hint } => {
                    if attempt > self.config.retries {
                        return Err(ClientError::Transport {
                            attempts: attempt,
                            message: reason,
                        });
                    }
                    let mut delay = self.config.backoff(attempt - 1);
                    if let Some(h) = hint {
                        delay = delay.max(h.min(self.config.max_delay));
                    }
                    log::warn!("attempt {attempt} failed ({reason}); retrying in {delay:?}");
                    trace.push(RetryEvent { attempt, reason, delay });
                    std::thread::sleep(delay);
                }
            }
        }
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut rb = self.http.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = match rb.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    reason: e.to_string(),
                    hint: None,
                }
            }
        };
        let status = resp.status();
        let hint = resp
            .headers()
            .get(RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Attempt::Fatal(ClientError::Auth { status: status.as_u16() });
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Attempt::Retry {
                reason: format!("HTTP {}", status.as_u16()),
                hint,
            };
        }
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry {
                    reason: e.to_string(),
                    hint: None,
                }
            }
        };
        if !status.is_success() {
            return Attempt::Fatal(ClientError::Rejected {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(ClientError::ResponseShape(format!("invalid JSON: {e}"))),
        };
        match assistant_text(&value) {
            Some(s) => Attempt::Done(s.to_string()),
            None => Attempt::Fatal(ClientError::ResponseShape(truncate(&text, 200))),
        }
    }
}

fn truncate(s: &str, n: usize) -> String {
    match s.char_indices().nth(n) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}
