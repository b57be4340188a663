//! Blocking JSON-over-HTTP backends.
//!
//! Chat wire format (one POST per call):
//!
//! ```text
//! request:  {"model": "...", "temperature": 0.7, "max_tokens": 512,
//!            "messages": [{"role": "user", "content": [
//!                {"type": "text", "text": "..."},
//!                {"type": "image", "media_type": "image/png", "data": "<base64>"}]}]}
//! response: {"choices": [{"message": {"content": "..."}}]}   or   {"text": "..."}
//! ```
//!
//! Detector, embedder and relevance endpoints use small JSON bodies documented
//! on their types. Every failure maps to [`BackendError::Unavailable`] carrying
//! the transport cause.

use std::path::Path;
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatModel, ChatRequest, Detector, EmbedInput, Embedder, RelevanceScorer, Segment};
use crate::types::{EntitySet, RoiRegion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpEndpoint {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Retries after the first attempt.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpEndpoint {
    fn default() -> Self {
        HttpEndpoint {
            url: String::new(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: 60,
            retries: 2,
            backoff_ms: 250,
        }
    }
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpEndpoint { url: url.into(), model: model.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct HttpClient {
    endpoint: HttpEndpoint,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpClient {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        HttpClient { endpoint, agent }
    }

    pub fn endpoint(&self) -> &HttpEndpoint {
        &self.endpoint
    }

    fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(&self.endpoint.url).header("Content-Type", "application/json");
        if let Some(var) = &self.endpoint.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status == 408 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.body_mut().read_json::<Value>().map_err(|e| Attempt::Fatal(format!("invalid JSON body: {e}")))
    }

    /// POSTs `body`, retrying transport failures, 408, 429 and 5xx up to the
    /// configured budget with exponential backoff.
    pub fn post_json(&self, body: &Value) -> Result<Value, BackendError> {
        let mut last = String::new();
        for attempt in 0..=self.endpoint.retries {
            if attempt > 0 {
                let wait = self.endpoint.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(cause)) => return Err(BackendError::unavailable(cause)),
                Err(Attempt::Retry(cause)) => {
                    log::warn!("{} attempt {} failed: {cause}", self.endpoint.url, attempt + 1);
                    last = cause;
                }
            }
        }
        Err(BackendError::unavailable(format!("{} attempts exhausted; last error: {last}", self.endpoint.retries + 1)))
    }
}

fn media_type(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

fn encode_image(image_ref: &str) -> Result<Value, BackendError> {
    let bytes = std::fs::read(image_ref)
        .map_err(|e| BackendError::unavailable(format!("cannot read image {image_ref}: {e}")))?;
    Ok(json!({
        "type": "image",
        "media_type": media_type(image_ref),
        "data": base64::engine::general_purpose::STANDARD.encode(bytes),
    }))
}

/// Builds the JSON body of a chat call.
pub fn chat_body(model: &str, request: &ChatRequest) -> Result<Value, BackendError> {
    request.validate()?;
    let mut messages = Vec::with_capacity(request.messages.len());
    for m in &request.messages {
        let mut content = Vec::with_capacity(m.segments.len());
        for seg in &m.segments {
            content.push(match seg {
                Segment::Text { text } => json!({"type": "text", "text": text}),
                Segment::Image { image_ref } => encode_image(image_ref)?,
            });
        }
        messages.push(json!({"role": m.role, "content": content}));
    }
    Ok(json!({
        "model": model,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "messages": messages,
    }))
}

/// Extracts the completion text from either accepted response shape.
pub fn completion_text(body: &Value) -> Result<String, BackendError> {
    body.pointer("/choices/0/message/content")
        .or_else(|| body.get("text"))
        .or_else(|| body.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::unavailable(format!("response has no completion text: {body}")))
}

#[derive(Debug, Clone)]
pub struct HttpChat {
    client: HttpClient,
}

impl HttpChat {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpChat { client: HttpClient::new(endpoint) }
    }
}

impl ChatModel for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = chat_body(&self.client.endpoint.model, request)?;
        completion_text(&self.client.post_json(&body)?)
    }
}

/// `{"model", "image": {media_type, data}, "entities": [..]}` →
/// `{"regions": [{"bbox": [x0,y0,x1,y1], "confidence": s, "label": l}]}`.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    client: HttpClient,
}

impl HttpDetector {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpDetector { client: HttpClient::new(endpoint) }
    }
}

impl Detector for HttpDetector {
    fn detect(&self, image_ref: &str, entities: &EntitySet) -> Result<Vec<RoiRegion>, BackendError> {
        let body = json!({
            "model": self.client.endpoint.model,
            "image": encode_image(image_ref)?,
            "entities": entities.as_slice(),
        });
        let reply = self.client.post_json(&body)?;
        let regions = reply.get("regions").cloned().unwrap_or(Value::Array(Vec::new()));
        serde_json::from_value(regions).map_err(|e| BackendError::DetectorMalformed(e.to_string()))
    }
}

/// `{"model", "input": text}` or `{"model", "image": {..}}` →
/// `{"embedding": [..]}` or `{"data": [{"embedding": [..]}]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: HttpClient,
    dimension: usize,
}

impl HttpEmbedder {
    pub fn new(endpoint: HttpEndpoint, dimension: usize) -> Self {
        HttpEmbedder { client: HttpClient::new(endpoint), dimension }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError> {
        let body = match input {
            EmbedInput::Text(t) => json!({"model": self.client.endpoint.model, "input": t}),
            EmbedInput::Image(r) => json!({"model": self.client.endpoint.model, "image": encode_image(r)?}),
        };
        let reply = self.client.post_json(&body)?;
        let vector = reply
            .get("embedding")
            .or_else(|| reply.pointer("/data/0/embedding"))
            .cloned()
            .ok_or_else(|| BackendError::unavailable("response has no embedding"))?;
        serde_json::from_value(vector).map_err(|e| BackendError::unavailable(format!("bad embedding: {e}")))
    }
}

/// `{"model", "query", "passage"}` → `{"score": s}` with `s` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct HttpRelevance {
    client: HttpClient,
}

impl HttpRelevance {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        HttpRelevance { client: HttpClient::new(endpoint) }
    }
}

impl RelevanceScorer for HttpRelevance {
    fn score(&self, query: &str, passage: &str) -> Result<f64, BackendError> {
        let body = json!({"model": self.client.endpoint.model, "query": query, "passage": passage});
        let reply = self.client.post_json(&body)?;
        reply
            .get("score")
            .and_then(Value::as_f64)
            .filter(|s| (0.0..=1.0).contains(s))
            .ok_or_else(|| BackendError::unavailable(format!("relevance response missing score in [0,1]: {reply}")))
    }
}
