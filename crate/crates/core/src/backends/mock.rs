//! Scripted mock backend.
//!
//! A script is a JSON-lines file with one entry per line:
//!
//! ```text
//! {"kind": "teacher", "match": "", "response": "</Guidance> check the apex </Guidance>"}
//! {"kind": "assessor", "match": "apex", "response": "<score>4</score>", "repeat": true}
//! {"kind": "detector", "response": [{"bbox": [0.1, 0.2, 0.5, 0.6], "confidence": 0.9, "label": "lung"}]}
//! {"kind": "embedder", "match": "abc", "response": [0.1, 0.2, 0.3]}
//! {"kind": "relevance", "response": 0.8}
//! {"kind": "student", "response": {"error": "connection reset"}}
//! ```
//!
//! For each call, the first unconsumed entry of the call's kind whose `match`
//! is empty or a substring of the call input answers it; it is consumed
//! unless `repeat` is set. Embedder entries form a lookup table instead:
//! `match` must equal the input exactly (empty acts as the default) and they
//! are never consumed.

use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BackendError, Backends, CallKind, ChatModel, ChatRequest, Detector, EmbedInput, Embedder, RelevanceScorer,
};
use crate::types::{EntitySet, RoiRegion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Text(String),
    Score(f64),
    Vector(Vec<f64>),
    Regions(Vec<RoiRegion>),
    Failure { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub kind: CallKind,
    #[serde(default, rename = "match")]
    pub match_key: String,
    pub response: MockResponse,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl MockEntry {
    pub fn new(kind: CallKind, match_key: impl Into<String>, response: MockResponse) -> Self {
        MockEntry { kind, match_key: match_key.into(), response, repeat: false }
    }

    pub fn text(kind: CallKind, match_key: impl Into<String>, text: impl Into<String>) -> Self {
        Self::new(kind, match_key, MockResponse::Text(text.into()))
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("cannot read mock script: {0}")]
    Io(#[from] std::io::Error),
    #[error("mock script line {line}: {message}")]
    Line { line: usize, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        MockScript { entries }
    }

    /// Parses JSON lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, MockScriptError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let entry = serde_json::from_str(trimmed)
                .map_err(|e| MockScriptError::Line { line: i + 1, message: e.to_string() })?;
            entries.push(entry);
        }
        Ok(MockScript { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockScriptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("mock entry serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn has_kind(&self, kind: CallKind) -> bool {
        self.entries.iter().any(|e| e.kind == kind)
    }
}

#[derive(Debug)]
struct State {
    entries: Vec<MockEntry>,
    consumed: Vec<bool>,
}

/// Deterministic backend replaying a [`MockScript`]. Calls are serialized
/// through a mutex so the consumption order is the call order.
#[derive(Debug, Clone)]
pub struct MockBackend {
    state: Arc<Mutex<State>>,
    dimension: usize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let dimension = script
            .entries
            .iter()
            .find_map(|e| match (&e.kind, &e.response) {
                (CallKind::Embedder, MockResponse::Vector(v)) => Some(v.len()),
                _ => None,
            })
            .unwrap_or(0);
        Self::with_dimension(script, dimension)
    }

    pub fn with_dimension(script: MockScript, dimension: usize) -> Self {
        let consumed = vec![false; script.entries.len()];
        MockBackend { state: Arc::new(Mutex::new(State { entries: script.entries, consumed })), dimension }
    }

    pub fn remaining(&self, kind: CallKind) -> usize {
        let state = self.state.lock().unwrap();
        state.entries.iter().zip(&state.consumed).filter(|(e, used)| e.kind == kind && !**used).count()
    }

    fn take(&self, kind: CallKind, input: &str) -> Result<MockResponse, BackendError> {
        let mut state = self.state.lock().unwrap();
        let State { entries, consumed } = &mut *state;
        let found = if kind == CallKind::Embedder {
            entries
                .iter()
                .position(|e| e.kind == kind && e.match_key == input)
                .or_else(|| entries.iter().position(|e| e.kind == kind && e.match_key.is_empty()))
        } else {
            entries.iter().zip(consumed.iter()).position(|(e, used)| {
                e.kind == kind && !used && (e.match_key.is_empty() || input.contains(&e.match_key))
            })
        };
        let idx = found.ok_or_else(|| {
            BackendError::unavailable(format!("mock script has no {kind:?} entry left for this call"))
        })?;
        let entry = &entries[idx];
        if !entry.repeat && kind != CallKind::Embedder {
            consumed[idx] = true;
        }
        match &entry.response {
            MockResponse::Failure { error } => Err(BackendError::unavailable(error)),
            other => Ok(other.clone()),
        }
    }

    pub fn chat(&self, kind: CallKind) -> Arc<dyn ChatModel> {
        Arc::new(MockChat { backend: self.clone(), kind })
    }

    /// Backends for every role present in the script.
    pub fn backends(&self, script: &MockScript) -> Backends {
        let mut b = Backends {
            teacher: self.chat(CallKind::Teacher),
            student: self.chat(CallKind::Student),
            assessor: self.chat(CallKind::Assessor),
            detector: None,
            embedder: None,
            relevance: None,
            entities: None,
        };
        if script.has_kind(CallKind::Detector) {
            b.detector = Some(Arc::new(self.clone()));
        }
        if script.has_kind(CallKind::Embedder) {
            b.embedder = Some(Arc::new(self.clone()));
        }
        if script.has_kind(CallKind::Relevance) {
            b.relevance = Some(Arc::new(self.clone()));
        }
        if script.has_kind(CallKind::Entities) {
            b.entities = Some(self.chat(CallKind::Entities));
        }
        b
    }
}

struct MockChat {
    backend: MockBackend,
    kind: CallKind,
}

fn kind_mismatch(kind: CallKind, response: &MockResponse) -> BackendError {
    BackendError::unavailable(format!("mock {kind:?} entry has the wrong payload type: {response:?}"))
}

impl ChatModel for MockChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        match self.backend.take(self.kind, &request.text())? {
            MockResponse::Text(t) => Ok(t),
            other => Err(kind_mismatch(self.kind, &other)),
        }
    }
}

impl Detector for MockBackend {
    fn detect(&self, image_ref: &str, entities: &EntitySet) -> Result<Vec<RoiRegion>, BackendError> {
        let input = format!("{image_ref}\n{}", entities.as_slice().join(","));
        match self.take(CallKind::Detector, &input)? {
            MockResponse::Regions(r) => Ok(r),
            MockResponse::Vector(v) if v.is_empty() => Ok(Vec::new()),
            other => Err(kind_mismatch(CallKind::Detector, &other)),
        }
    }
}

impl Embedder for MockBackend {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError> {
        match self.take(CallKind::Embedder, input.key())? {
            MockResponse::Vector(v) => Ok(v),
            other => Err(kind_mismatch(CallKind::Embedder, &other)),
        }
    }
}

impl RelevanceScorer for MockBackend {
    fn score(&self, _query: &str, passage: &str) -> Result<f64, BackendError> {
        match self.take(CallKind::Relevance, passage)? {
            MockResponse::Score(s) => Ok(s),
            other => Err(kind_mismatch(CallKind::Relevance, &other)),
        }
    }
}
