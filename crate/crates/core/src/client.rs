//! Chat-completion client used for the teacher, the judge and evaluation.
//!
//! The wire format is the common `/chat/completions` shape. [`HttpChatClient`]
//! talks to a real endpoint; [`MockChatClient`] replays scripted replies keyed
//! by request hash and counts calls so tests can observe routing.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>, temperature: f64) -> Self {
        ChatRequest { model: model.into(), messages, temperature, max_tokens: None, seed: None }
    }

    /// SHA-256 of the serialized request body; stable across runs.
    pub fn key(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("request serializes"))
    }
}

#[derive(Debug, Clone, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Clone, Deserialize)]
struct WireChoice {
    message: ChatMessage,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("no scripted reply for request {0}")]
    Unscripted(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ClientError> },
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status(code) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub trait ChatClient: Send + Sync {
    /// Returns the content of the first choice.
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for Arc<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy { max_retries, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    /// Delay before retry number `attempt` (0-based): `base · 2^attempt`, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Calls `client`, retrying retryable failures with exponential backoff.
pub fn complete_with_retry(
    client: &dyn ChatClient,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<String, ClientError> {
    let mut attempt = 0;
    loop {
        match client.complete(request) {
            Ok(reply) => return Ok(reply),
            Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(e) if e.is_retryable() => {
                return Err(ClientError::Exhausted { attempts: attempt + 1, last: Box::new(e) })
            }
            Err(e) => return Err(e),
        }
    }
}

/// Endpoint settings read from `<PREFIX>_URL`, `<PREFIX>_MODEL`, `<PREFIX>_KEY`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
}

impl EndpointConfig {
    pub fn from_env(prefix: &str) -> Option<Self> {
        let base_url = std::env::var(format!("{prefix}_URL")).ok()?;
        let model = std::env::var(format!("{prefix}_MODEL")).unwrap_or_else(|_| "default".into());
        let api_key = std::env::var(format!("{prefix}_KEY")).ok();
        Some(EndpointConfig { base_url, model, api_key })
    }

    fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

pub struct HttpChatClient {
    endpoint: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(endpoint: EndpointConfig, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpChatClient { endpoint, agent }
    }

    pub fn model(&self) -> &str {
        &self.endpoint.model
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let mut req = self.agent.post(&self.endpoint.completions_url());
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| match e {
            ureq::Error::StatusCode(code) => ClientError::Status(code),
            other => ClientError::Transport(other.to_string()),
        })?;
        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Decode(e.to_string()))?;
        wire.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ClientError::Decode("empty choices array".into()))
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync;

/// Deterministic scripted client.
///
/// Lookup order: exact reply keyed by [`ChatRequest::key`], then the next
/// queued reply, then the fallback responder.
#[derive(Default)]
pub struct MockChatClient {
    by_key: HashMap<String, String>,
    queue: Mutex<VecDeque<Result<String, ClientError>>>,
    fallback: Option<Box<Responder>>,
    calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockChatClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_reply(mut self, key: impl Into<String>, reply: impl Into<String>) -> Self {
        self.by_key.insert(key.into(), reply.into());
        self
    }

    pub fn with_sequence<I, S>(self, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.queue.lock().unwrap().extend(replies.into_iter().map(|s| Ok(s.into())));
        self
    }

    pub fn with_error(self, err: ClientError) -> Self {
        self.queue.lock().unwrap().push_back(Err(err));
        self
    }

    pub fn with_fallback<F>(mut self, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        self.fallback = Some(Box::new(f));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        let key = request.key();
        if let Some(r) = self.by_key.get(&key) {
            return Ok(r.clone());
        }
        if let Some(r) = self.queue.lock().unwrap().pop_front() {
            return r;
        }
        match &self.fallback {
            Some(f) => f(request),
            None => Err(ClientError::Unscripted(key)),
        }
    }
}

/// Caps the number of requests in flight across all threads sharing it.
pub struct BoundedClient<C> {
    inner: C,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

impl<C: ChatClient> BoundedClient<C> {
    pub const DEFAULT_LIMIT: usize = 8;

    pub fn new(inner: C, limit: usize) -> Self {
        BoundedClient {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    /// Highest number of simultaneous requests observed.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: ChatClient> ChatClient for BoundedClient<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
            self.peak.fetch_max(*n, Ordering::SeqCst);
        }
        let out = self.inner.complete(request);
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::user(text)], 0.0)
    }

    #[test]
    fn wire_shape_omits_unset_options() {
        let v = serde_json::to_value(req("hi")).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"model": "m", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0})
        );
    }

    #[test]
    fn key_is_stable_and_distinguishes() {
        assert_eq!(req("a").key(), req("a").key());
        assert_ne!(req("a").key(), req("b").key());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(400));
        assert_eq!(p.delay(3), Duration::from_millis(500));
        assert_eq!(p.delay(40), Duration::from_millis(500));
    }

    #[test]
    fn retry_recovers_from_transient_errors() {
        let mock = MockChatClient::new()
            .with_error(ClientError::Status(503))
            .with_error(ClientError::Transport("reset".into()))
            .with_sequence(["ok"]);
        let out = complete_with_retry(&mock, &req("x"), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(out, "ok");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn retry_gives_up_at_cap() {
        let mock = MockChatClient::new()
            .with_fallback(|_| Err(ClientError::Transport("down".into())));
        let err = complete_with_retry(&mock, &req("x"), &RetryPolicy::immediate(2)).unwrap_err();
        assert!(matches!(err, ClientError::Exhausted { attempts: 3, .. }));
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn non_retryable_fails_fast() {
        let mock = MockChatClient::new().with_error(ClientError::Status(401));
        let err = complete_with_retry(&mock, &req("x"), &RetryPolicy::immediate(5)).unwrap_err();
        assert_eq!(err, ClientError::Status(401));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn keyed_replies_take_priority() {
        let r = req("q");
        let mock = MockChatClient::new().with_reply(r.key(), "keyed").with_sequence(["queued"]);
        assert_eq!(mock.complete(&r).unwrap(), "keyed");
        assert_eq!(mock.complete(&req("other")).unwrap(), "queued");
        assert!(matches!(mock.complete(&req("other")), Err(ClientError::Unscripted(_))));
    }

    #[test]
    fn bounded_client_limits_concurrency() {
        let mock = MockChatClient::new().with_fallback(|_| {
            std::thread::sleep(Duration::from_millis(5));
            Ok("x".into())
        });
        let bounded = BoundedClient::new(mock, 3);
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| bounded.complete(&req("x")).unwrap());
            }
        });
        assert!(bounded.peak() <= 3);
        assert_eq!(bounded.inner().calls(), 12);
    }

    /// One-shot HTTP server returning `body` with `status`; yields the raw request.
    fn serve_once(status: u16, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
            head + &String::from_utf8(buf).unwrap()
        });
        (format!("http://{addr}/v1"), handle)
    }

    #[test]
    fn http_client_speaks_chat_completions() {
        let (url, handle) = serve_once(
            200,
            r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"YES"}}]}"#,
        );
        let client = HttpChatClient::new(
            EndpointConfig { base_url: url, model: "judge".into(), api_key: Some("k".into()) },
            Duration::from_secs(5),
        );
        let reply = client.complete(&req("is it?")).unwrap();
        assert_eq!(reply, "YES");
        let raw = handle.join().unwrap();
        assert!(raw.starts_with("POST /v1/chat/completions"));
        assert!(raw.to_ascii_lowercase().contains("authorization: bearer k"));
        let body = &raw[raw.find("\r\n\r\n").unwrap() + 4..];
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "m");
        assert_eq!(v["messages"][0]["content"], "is it?");
    }

    #[test]
    fn http_status_errors_are_classified() {
        let (url, handle) = serve_once(503, "{}");
        let client = HttpChatClient::new(
            EndpointConfig { base_url: url, model: "m".into(), api_key: None },
            Duration::from_secs(5),
        );
        let err = client.complete(&req("x")).unwrap_err();
        assert_eq!(err, ClientError::Status(503));
        assert!(err.is_retryable());
        handle.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let client = HttpChatClient::new(
            EndpointConfig { base_url: format!("http://{addr}"), model: "m".into(), api_key: None },
            Duration::from_secs(2),
        );
        assert!(matches!(client.complete(&req("x")), Err(ClientError::Transport(_))));
    }
}
