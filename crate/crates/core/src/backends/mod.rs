//! Clients for the caption, embedding and completion services.
//!
//! All three services speak one JSON envelope over HTTP POST:
//!
//! ```text
//! request:  {"task": "caption" | "embed" | "complete", "payload": {...}}
//! response: {"ok": bool, "result": {...}, "error": str?}
//! ```
//!
//! [`ServiceClient`] handles the envelope and retries over any [`Transport`];
//! [`HttpTransport`] is the network transport. The `mock` module has
//! deterministic in-process backends.

mod cache;
mod http;
pub mod mock;

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::selection::Embedding;

pub(crate) use cache::write_json;
pub use cache::{CachedCaptioner, CachedEmbedder};
pub use http::HttpTransport;

pub const CAPTION_PREFIX: &str = "A person is";

pub const ENV_CAPTION_URL: &str = "PALM_CAPTION_URL";
pub const ENV_EMBED_URL: &str = "PALM_EMBED_URL";
pub const ENV_LLM_URL: &str = "PALM_LLM_URL";
pub const ENV_API_TOKEN: &str = "PALM_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub clip_id: String,
    pub frame_index: u64,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

/// Per-request sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: Option<u64>,
}

pub trait Captioner: Send + Sync {
    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub trait Completer: Send + Sync {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String>;
}

impl<B: Captioner + ?Sized> Captioner for Box<B> {
    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse> {
        (**self).caption(request)
    }
}

impl<B: Embedder + ?Sized> Embedder for Box<B> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }
}

impl<B: Completer + ?Sized> Completer for Box<B> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String> {
        (**self).complete(prompt, params)
    }
}

impl<B: Captioner + ?Sized> Captioner for &B {
    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse> {
        (**self).caption(request)
    }
}

impl<B: Embedder + ?Sized> Embedder for &B {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }
}

impl<B: Completer + ?Sized> Completer for &B {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String> {
        (**self).complete(prompt, params)
    }
}

/// Captions one frame and checks that the caption carries the prefix.
pub fn caption(client: &dyn Captioner, clip_id: &str, frame_index: u64, prefix: &str) -> Result<String> {
    let request = CaptionRequest {
        clip_id: clip_id.to_owned(),
        frame_index,
        prefix: prefix.to_owned(),
    };
    let response = client.caption(&request)?;
    if !response.caption.starts_with(prefix) {
        return Err(Error::Protocol(format!(
            "caption {:?} does not start with prefix {prefix:?}",
            response.caption
        )));
    }
    Ok(response.caption)
}

pub fn embed<T: Scalar>(client: &dyn Embedder, text: &str) -> Result<Embedding<T>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let values = client
        .embed(text)?
        .into_iter()
        .map(|v| T::from_f64(v).ok_or(Error::InvalidEmbedding("unrepresentable value")))
        .collect::<Result<Vec<T>>>()?;
    Embedding::new(values)
}

pub fn complete(client: &dyn Completer, prompt: &str, params: &SamplingParams) -> Result<String> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput);
    }
    client.complete(prompt, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Caption,
    Embed,
    Complete,
}

/// Failure of a single transport attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Timeouts, connection failures, 5xx and 429: worth retrying.
    Transient(String),
    Fatal(String),
}

/// Moves one envelope request to a service and returns the raw response body.
pub trait Transport: Send + Sync {
    fn send(&self, request: &Value) -> std::result::Result<Value, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: Url,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    #[serde(skip_serializing)]
    pub auth_token: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: Url::parse("http://127.0.0.1:8000/").expect("valid default url"),
            timeout_ms: 60_000,
            max_retries: 2,
            retry_backoff_ms: 500,
            auth_token: None,
        }
    }
}

impl BackendConfig {
    pub fn new(endpoint: Url) -> Self {
        Self {
            endpoint,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("backend timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff: Duration::from_millis(self.retry_backoff_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    /// Runs `attempt` until it succeeds, fails fatally, or `max_retries`
    /// retries have been spent.
    pub fn run<T>(&self, mut attempt: impl FnMut(u32) -> std::result::Result<T, TransportError>) -> Result<T> {
        let mut last = String::new();
        for n in 0..=self.max_retries {
            if n > 0 && !self.backoff.is_zero() {
                thread::sleep(self.backoff);
            }
            match attempt(n) {
                Ok(v) => return Ok(v),
                Err(TransportError::Fatal(msg)) => return Err(Error::Protocol(msg)),
                Err(TransportError::Transient(msg)) => {
                    tracing::debug!(attempt = n, %msg, "transient backend failure");
                    last = msg;
                }
            }
        }
        Err(Error::BackendUnavailable {
            sample: None,
            reason: format!("{} attempts failed, last: {last}", self.max_retries + 1),
        })
    }
}

#[derive(Debug, Deserialize)]
struct Envelope {
    ok: bool,
    #[serde(default)]
    result: Option<Value>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct EmbedResult {
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct CompleteResult {
    text: String,
}

/// Envelope client shared by the three services.
pub struct ServiceClient<Tr> {
    transport: Tr,
    retry: RetryPolicy,
}

impl<Tr: Transport> ServiceClient<Tr> {
    pub fn new(transport: Tr, retry: RetryPolicy) -> Self {
        Self { transport, retry }
    }

    pub fn transport(&self) -> &Tr {
        &self.transport
    }

    pub fn call(&self, task: Task, payload: Value) -> Result<Value> {
        let request = json!({ "task": task, "payload": payload });
        let body = self.retry.run(|_| self.transport.send(&request))?;
        let envelope: Envelope =
            serde_json::from_value(body).map_err(|e| Error::Protocol(format!("malformed envelope: {e}")))?;
        if !envelope.ok {
            return Err(Error::Protocol(format!(
                "service reported failure: {}",
                envelope.error.unwrap_or_else(|| "<no message>".into())
            )));
        }
        envelope
            .result
            .ok_or_else(|| Error::Protocol("envelope has ok=true but no result".into()))
    }

    fn call_as<R: for<'de> Deserialize<'de>>(&self, task: Task, payload: Value) -> Result<R> {
        let result = self.call(task, payload)?;
        serde_json::from_value(result).map_err(|e| Error::Protocol(format!("malformed {task:?} result: {e}")))
    }
}

impl ServiceClient<HttpTransport> {
    pub fn http(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::new(HttpTransport::new(config)?, config.retry_policy()))
    }
}

impl<Tr: Transport> Captioner for ServiceClient<Tr> {
    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse> {
        self.call_as(
            Task::Caption,
            serde_json::to_value(request).expect("request serializes"),
        )
    }
}

impl<Tr: Transport> Embedder for ServiceClient<Tr> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let result: EmbedResult = self.call_as(Task::Embed, json!({ "text": text }))?;
        Ok(result.values)
    }
}

impl<Tr: Transport> Completer for ServiceClient<Tr> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String> {
        let result: CompleteResult = self.call_as(
            Task::Complete,
            json!({
                "prompt": prompt,
                "temperature": params.temperature,
                "max_new_tokens": params.max_new_tokens,
                "seed": params.seed,
            }),
        )?;
        Ok(result.text)
    }
}

#[cfg(test)]
mod tests {
    use super::mock::InProcessTransport;
    use super::*;

    fn policy(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            backoff: Duration::ZERO,
        }
    }

    fn caption_service(fail_first: usize, caption: &'static str) -> ServiceClient<InProcessTransport> {
        let transport = InProcessTransport::new(move |req: &Value| {
            assert_eq!(req["task"], "caption");
            Ok(json!({"ok": true, "result": {"caption": caption}}))
        })
        .failing_first(fail_first);
        ServiceClient::new(transport, policy(2))
    }

    #[test]
    fn retry_recovers_from_one_transient_failure() {
        let client = caption_service(1, "A person is cutting an onion");
        assert_eq!(
            caption(&client, "clip_1", 15, CAPTION_PREFIX).unwrap(),
            "A person is cutting an onion"
        );
        assert_eq!(client.transport().calls(), 2);
    }

    #[test]
    fn retries_are_bounded() {
        let client = caption_service(10, "A person is here");
        let err = caption(&client, "clip_1", 15, CAPTION_PREFIX).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable { .. }));
        assert_eq!(client.transport().calls(), 3);
    }

    #[test]
    fn caption_prefix_contract() {
        let client = caption_service(0, "Someone is cutting");
        assert!(matches!(
            caption(&client, "clip_1", 15, CAPTION_PREFIX),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn envelope_errors() {
        let t = InProcessTransport::new(|_| Ok(json!({"ok": false, "error": "model crashed"})));
        let client = ServiceClient::new(t, policy(0));
        match client.embed("x") {
            Err(Error::Protocol(msg)) => assert!(msg.contains("model crashed")),
            other => panic!("unexpected {other:?}"),
        }
        let t = InProcessTransport::new(|_| Ok(json!({"ok": true, "result": {"vals": []}})));
        let client = ServiceClient::new(t, policy(0));
        assert!(matches!(client.embed("x"), Err(Error::Protocol(_))));
        let t = InProcessTransport::new(|_| Err(TransportError::Fatal("HTTP 400".into())));
        let client = ServiceClient::new(t, policy(5));
        assert!(matches!(client.embed("x"), Err(Error::Protocol(_))));
        assert_eq!(client.transport().calls(), 1);
    }

    #[test]
    fn embed_and_complete_payloads() {
        let t = InProcessTransport::new(|req: &Value| match req["task"].as_str() {
            Some("embed") => Ok(json!({"ok": true, "result": {"values": [1.0, 0.0, 0.5]}})),
            Some("complete") => {
                assert_eq!(req["payload"]["seed"], 9);
                Ok(json!({"ok": true, "result": {"text": "(take, knife)"}}))
            }
            _ => Err(TransportError::Fatal("unknown task".into())),
        });
        let client = ServiceClient::new(t, policy(0));
        let e: Embedding<f32> = embed(&client, "A person is").unwrap();
        assert_eq!(e.values(), [1.0f32, 0.0, 0.5]);
        assert!(matches!(embed::<f64>(&client, "  "), Err(Error::EmptyInput)));
        let params = SamplingParams {
            temperature: 0.7,
            max_new_tokens: 32,
            seed: Some(9),
        };
        assert_eq!(complete(&client, "prompt", &params).unwrap(), "(take, knife)");
    }

    #[test]
    fn config_serialization_hides_token() {
        let config = BackendConfig {
            auth_token: Some("secret".into()),
            ..BackendConfig::default()
        };
        let text = serde_json::to_string(&config).unwrap();
        assert!(!text.contains("secret"));
        let zero = BackendConfig {
            timeout_ms: 0,
            ..BackendConfig::default()
        };
        assert!(zero.validate().is_err());
    }
}
