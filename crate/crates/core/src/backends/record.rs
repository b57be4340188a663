use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    BackendError, Backends, CallKind, CallPurpose, ChatModel, ChatRequest, Detector, EmbedInput, Embedder,
    RelevanceScorer,
};
use crate::types::{EntitySet, RoiRegion};

/// One backend call with its input and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: CallKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<CallPurpose>,
    pub input: String,
    #[serde(default)]
    pub reply: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Destination for [`CallRecord`]s.
#[derive(Clone)]
pub struct CallRecorder(Arc<dyn Fn(CallRecord) + Send + Sync>);

impl CallRecorder {
    pub fn new(f: impl Fn(CallRecord) + Send + Sync + 'static) -> Self {
        CallRecorder(Arc::new(f))
    }

    fn push<T: Serialize>(
        &self,
        kind: CallKind,
        purpose: Option<CallPurpose>,
        input: String,
        result: &Result<T, BackendError>,
    ) {
        let (reply, error) = match result {
            Ok(v) => (serde_json::to_value(v).unwrap_or(Value::Null), None),
            Err(e) => (Value::Null, Some(e.to_string())),
        };
        (self.0)(CallRecord { kind, purpose, input, reply, error });
    }
}

impl fmt::Debug for CallRecorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CallRecorder")
    }
}

struct Recorded<T: ?Sized> {
    inner: Arc<T>,
    kind: CallKind,
    sink: CallRecorder,
}

impl ChatModel for Recorded<dyn ChatModel> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let result = self.inner.complete(request);
        self.sink.push(self.kind, Some(request.purpose), request.text(), &result);
        result
    }
}

impl Detector for Recorded<dyn Detector> {
    fn detect(&self, image_ref: &str, entities: &EntitySet) -> Result<Vec<RoiRegion>, BackendError> {
        let result = self.inner.detect(image_ref, entities);
        let input = format!("{image_ref}\n{}", entities.as_slice().join(","));
        self.sink.push(self.kind, None, input, &result);
        result
    }
}

impl Embedder for Recorded<dyn Embedder> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError> {
        let result = self.inner.embed(input);
        self.sink.push(self.kind, None, input.key().to_string(), &result);
        result
    }
}

impl RelevanceScorer for Recorded<dyn RelevanceScorer> {
    fn score(&self, query: &str, passage: &str) -> Result<f64, BackendError> {
        let result = self.inner.score(query, passage);
        self.sink.push(self.kind, None, format!("{query}\n{passage}"), &result);
        result
    }
}

fn chat(inner: Arc<dyn ChatModel>, kind: CallKind, sink: &CallRecorder) -> Arc<dyn ChatModel> {
    Arc::new(Recorded { inner, kind, sink: sink.clone() })
}

pub(super) fn wrap(b: Backends, sink: CallRecorder) -> Backends {
    Backends {
        teacher: chat(b.teacher, CallKind::Teacher, &sink),
        student: chat(b.student, CallKind::Student, &sink),
        assessor: chat(b.assessor, CallKind::Assessor, &sink),
        detector: b.detector.map(|inner| {
            Arc::new(Recorded { inner, kind: CallKind::Detector, sink: sink.clone() }) as Arc<dyn Detector>
        }),
        embedder: b.embedder.map(|inner| {
            Arc::new(Recorded { inner, kind: CallKind::Embedder, sink: sink.clone() }) as Arc<dyn Embedder>
        }),
        relevance: b.relevance.map(|inner| {
            Arc::new(Recorded { inner, kind: CallKind::Relevance, sink: sink.clone() }) as Arc<dyn RelevanceScorer>
        }),
        entities: b.entities.map(|inner| chat(inner, CallKind::Entities, &sink)),
    }
}
