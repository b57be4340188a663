//! Model-call interfaces for every role the search talks to, plus the
//! concrete implementations: a scripted mock, a scripted tree scenario,
//! lightweight built-ins and an HTTP client.

mod builtin;
#[cfg(feature = "http")]
pub mod http;
pub mod mock;
pub mod parse;
pub mod prompt;
mod record;
mod roles;
pub mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{EntitySet, RoiRegion};

pub use builtin::{HashEmbedder, LexicalRelevance};
pub use record::{CallRecord, CallRecorder};
pub use roles::{
    assessor_evaluate, compose_request, detect_rois, embed, extract_entities, student_answer, teacher_guide,
    CallContext, GuidanceReply,
};
pub use parse::AssessorVerdict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {cause}")]
    Unavailable { cause: String },
    #[error("reply was empty")]
    ParseEmpty,
    #[error("no integer score found in assessor reply")]
    ParseScore { raw: String },
    #[error("score {0} outside 1..=5")]
    ScoreRange(i64),
    #[error("assessor reply could not be parsed after retry")]
    EvaluationFailed { raw: String },
    #[error("detector returned a malformed region: {0}")]
    DetectorMalformed(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl BackendError {
    pub fn unavailable(cause: impl fmt::Display) -> Self {
        BackendError::Unavailable { cause: cause.to_string() }
    }
}

/// Backend kind a mock script entry or journal record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Teacher,
    Student,
    Assessor,
    Detector,
    Embedder,
    Relevance,
    Entities,
}

/// Why a chat call is made. Not sent over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    #[default]
    Guide,
    Answer,
    Assess,
    Rewrite,
    Compose,
    Entities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Segment {
    Text { text: String },
    Image { image_ref: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub segments: Vec<Segment>,
}

impl Message {
    pub fn user(segments: Vec<Segment>) -> Self {
        Message { role: Role::User, segments }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub purpose: CallPurpose,
}

impl ChatRequest {
    /// Single user message made of a text prompt and an optional image.
    pub fn prompt(purpose: CallPurpose, text: String, image: Option<&str>, temperature: f64, max_tokens: u32) -> Self {
        let mut segments = vec![Segment::Text { text }];
        if let Some(image_ref) = image {
            segments.push(Segment::Image { image_ref: image_ref.to_string() });
        }
        ChatRequest { messages: vec![Message::user(segments)], temperature, max_tokens, purpose }
    }

    /// All text segments joined with newlines; what the mock matches against.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for seg in self.messages.iter().flat_map(|m| &m.segments) {
            if let Segment::Text { text } = seg {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(text);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::unavailable("chat request has no messages"));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::unavailable("negative temperature"));
        }
        Ok(())
    }
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

pub trait Detector: Send + Sync {
    fn detect(&self, image_ref: &str, entities: &EntitySet) -> Result<Vec<RoiRegion>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedInput<'a> {
    Text(&'a str),
    Image(&'a str),
}

impl EmbedInput<'_> {
    pub fn key(&self) -> &str {
        match self {
            EmbedInput::Text(s) | EmbedInput::Image(s) => s,
        }
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError>;
}

/// Scores how relevant a passage is to a query, in `[0, 1]`.
pub trait RelevanceScorer: Send + Sync {
    fn score(&self, query: &str, passage: &str) -> Result<f64, BackendError>;
}

/// Every backend the agent loop may call. Optional roles degrade gracefully:
/// no detector means a whole-image region, no embedder disables the
/// similarity early stop and retrieval.
#[derive(Clone)]
pub struct Backends {
    pub teacher: Arc<dyn ChatModel>,
    pub student: Arc<dyn ChatModel>,
    pub assessor: Arc<dyn ChatModel>,
    pub detector: Option<Arc<dyn Detector>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub relevance: Option<Arc<dyn RelevanceScorer>>,
    pub entities: Option<Arc<dyn ChatModel>>,
}

impl Backends {
    /// Teacher, student and assessor all served by one chat model.
    pub fn single(model: Arc<dyn ChatModel>) -> Self {
        Backends {
            teacher: model.clone(),
            student: model.clone(),
            assessor: model,
            detector: None,
            embedder: None,
            relevance: None,
            entities: None,
        }
    }

    pub fn with_detector(mut self, detector: Arc<dyn Detector>) -> Self {
        self.detector = Some(detector);
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn with_relevance(mut self, relevance: Arc<dyn RelevanceScorer>) -> Self {
        self.relevance = Some(relevance);
        self
    }

    pub fn with_entities(mut self, entities: Arc<dyn ChatModel>) -> Self {
        self.entities = Some(entities);
        self
    }

    /// Wraps every backend so that each call and its reply is appended to
    /// `recorder`.
    pub fn recorded(self, recorder: CallRecorder) -> Self {
        record::wrap(self, recorder)
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("detector", &self.detector.is_some())
            .field("embedder", &self.embedder.is_some())
            .field("relevance", &self.relevance.is_some())
            .field("entities", &self.entities.is_some())
            .finish_non_exhaustive()
    }
}
