//! Role-level operations: prompt, call, parse.

use super::parse::{parse_assessor, parse_guidance, AssessorVerdict, ParsedGuidance};
use super::prompt::{
    render_assessor_prompt, render_compose_prompt, render_entities_prompt, render_student_prompt,
    render_teacher_prompt,
};
use super::{BackendError, CallPurpose, ChatModel, ChatRequest, Detector, EmbedInput, Embedder};
use crate::types::{EntitySet, Observation, RoiRegion};

pub type GuidanceReply = ParsedGuidance;

/// Per-query call settings shared by every role.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub question: &'a str,
    pub image_ref: Option<&'a str>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CallContext<'_> {
    pub(crate) fn request(&self, purpose: CallPurpose, text: String) -> ChatRequest {
        ChatRequest::prompt(purpose, text, self.image_ref, self.temperature, self.max_tokens)
    }
}

pub fn teacher_guide(
    teacher: &dyn ChatModel,
    ctx: &CallContext<'_>,
    roi: &RoiRegion,
    obs: &Observation,
    feedback: &str,
) -> Result<GuidanceReply, BackendError> {
    let request = ctx.request(CallPurpose::Guide, render_teacher_prompt(roi, obs, feedback));
    let reply = teacher.complete(&request)?;
    parse_guidance(&reply)
}

pub fn student_answer(
    student: &dyn ChatModel,
    ctx: &CallContext<'_>,
    roi: &RoiRegion,
    guidance: &str,
) -> Result<String, BackendError> {
    let request = ctx.request(CallPurpose::Answer, render_student_prompt(ctx.question, roi, guidance));
    Ok(student.complete(&request)?.trim().to_string())
}

/// Scores a step. A reply that cannot be parsed is retried once with the
/// identical prompt before giving up with `EvaluationFailed`.
pub fn assessor_evaluate(
    assessor: &dyn ChatModel,
    ctx: &CallContext<'_>,
    roi: &RoiRegion,
    guidance: &str,
    answer: &str,
) -> Result<AssessorVerdict, BackendError> {
    let mut prompt = render_assessor_prompt(guidance, answer);
    prompt.push_str("\nRegion under review: ");
    prompt.push_str(&roi.describe());
    let request = ctx.request(CallPurpose::Assess, prompt);
    let first = assessor.complete(&request)?;
    match parse_assessor(&first) {
        Ok(v) => Ok(v),
        Err(e) => {
            log::warn!("assessor reply rejected ({e}); retrying once");
            let second = assessor.complete(&request)?;
            parse_assessor(&second).map_err(|_| BackendError::EvaluationFailed { raw: second })
        }
    }
}

/// Regions sorted by confidence, highest first; ties keep detector order.
pub fn detect_rois(
    detector: &dyn Detector,
    image_ref: &str,
    entities: &EntitySet,
) -> Result<Vec<RoiRegion>, BackendError> {
    let mut rois = detector.detect(image_ref, entities)?;
    for roi in &rois {
        roi.validate().map_err(|e| BackendError::DetectorMalformed(e.to_string()))?;
    }
    rois.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(rois)
}

pub fn embed(embedder: &dyn Embedder, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError> {
    let v = embedder.embed(input)?;
    if v.len() != embedder.dimension() {
        return Err(BackendError::DimensionMismatch { expected: embedder.dimension(), got: v.len() });
    }
    Ok(v)
}

pub fn extract_entities(model: &dyn ChatModel, ctx: &CallContext<'_>) -> Result<EntitySet, BackendError> {
    let request = ctx.request(CallPurpose::Entities, render_entities_prompt(ctx.question));
    Ok(EntitySet::parse_list(&model.complete(&request)?))
}

/// Synthesis request over (guidance, answer) steps.
pub fn compose_request(ctx: &CallContext<'_>, steps: &[(String, String)]) -> ChatRequest {
    ctx.request(CallPurpose::Compose, render_compose_prompt(ctx.question, steps))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::mock::{MockBackend, MockEntry, MockResponse, MockScript};
    use crate::backends::CallKind;

    fn ctx() -> CallContext<'static> {
        CallContext { question: "Is there an effusion?", image_ref: Some("cxr.png"), temperature: 0.7, max_tokens: 128 }
    }

    fn chat(entries: Vec<MockEntry>, kind: CallKind) -> Arc<dyn ChatModel> {
        MockBackend::new(MockScript::new(entries)).chat(kind)
    }

    #[test]
    fn teacher_echo_and_tag_strip() {
        let roi = RoiRegion::whole_image();
        let t = chat(vec![MockEntry::text(CallKind::Teacher, "", "inspect costophrenic angle")], CallKind::Teacher);
        let g = teacher_guide(t.as_ref(), &ctx(), &roi, &Observation::default(), "").unwrap();
        assert_eq!(g.text, "inspect costophrenic angle");

        let t = chat(vec![MockEntry::text(CallKind::Teacher, "", "</Guidance> trace the hemidiaphragm </Guidance>")], CallKind::Teacher);
        let g = teacher_guide(t.as_ref(), &ctx(), &roi, &Observation::default(), "").unwrap();
        assert_eq!(g.text, "trace the hemidiaphragm");
        assert!(!g.untagged);
    }

    #[test]
    fn transport_failure_surfaces_as_unavailable() {
        let roi = RoiRegion::whole_image();
        let fail = || MockEntry::new(CallKind::Teacher, "", MockResponse::Failure { error: "timeout".into() });
        let t = chat(vec![fail()], CallKind::Teacher);
        let err = teacher_guide(t.as_ref(), &ctx(), &roi, &Observation::default(), "").unwrap_err();
        assert!(matches!(err, BackendError::Unavailable { .. }));
        let s = chat(vec![MockEntry::new(CallKind::Student, "", MockResponse::Failure { error: "x".into() })], CallKind::Student);
        assert!(matches!(student_answer(s.as_ref(), &ctx(), &roi, "g"), Err(BackendError::Unavailable { .. })));
    }

    #[test]
    fn student_answers_even_without_guidance() {
        let roi = RoiRegion::whole_image();
        let s = chat(vec![MockEntry::text(CallKind::Student, "", "left basal opacity present")], CallKind::Student);
        assert_eq!(student_answer(s.as_ref(), &ctx(), &roi, "").unwrap(), "left basal opacity present");
    }

    #[test]
    fn assessor_retries_once() {
        let roi = RoiRegion::whole_image();
        let a = chat(
            vec![
                MockEntry::text(CallKind::Assessor, "", "I think it's fine"),
                MockEntry::text(CallKind::Assessor, "", "<score>3</score><feedback1>f1</feedback1><feedback2>f2</feedback2>"),
            ],
            CallKind::Assessor,
        );
        let v = assessor_evaluate(a.as_ref(), &ctx(), &roi, "g", "a").unwrap();
        assert_eq!(v, AssessorVerdict::new(3, "f1", "f2"));
    }

    #[test]
    fn assessor_gives_up_after_second_failure() {
        let roi = RoiRegion::whole_image();
        let a = chat(
            vec![MockEntry::text(CallKind::Assessor, "", "nope"), MockEntry::text(CallKind::Assessor, "", "still nope")],
            CallKind::Assessor,
        );
        let err = assessor_evaluate(a.as_ref(), &ctx(), &roi, "g", "a").unwrap_err();
        assert_eq!(err, BackendError::EvaluationFailed { raw: "still nope".into() });
    }

    #[test]
    fn detections_sorted_and_validated() {
        let r = |c: f64| RoiRegion { bbox: [0.1, 0.1, 0.5, 0.5], confidence: c, label: format!("r{c}") };
        let mock = MockBackend::new(MockScript::new(vec![MockEntry::new(
            CallKind::Detector,
            "",
            MockResponse::Regions(vec![r(0.4), r(0.9)]),
        )]));
        let rois = detect_rois(&mock, "img", &EntitySet::default()).unwrap();
        assert_eq!(rois.iter().map(|r| r.confidence).collect::<Vec<_>>(), vec![0.9, 0.4]);

        let empty = MockBackend::new(MockScript::new(vec![MockEntry::new(CallKind::Detector, "", MockResponse::Vector(vec![]))]));
        assert!(detect_rois(&empty, "img", &EntitySet::default()).unwrap().is_empty());

        let bad = RoiRegion { bbox: [0.6, 0.1, 0.5, 0.5], confidence: 0.5, label: "bad".into() };
        let mock = MockBackend::new(MockScript::new(vec![MockEntry::new(CallKind::Detector, "", MockResponse::Regions(vec![bad]))]));
        assert!(matches!(detect_rois(&mock, "img", &EntitySet::default()), Err(BackendError::DetectorMalformed(_))));
    }

    #[test]
    fn embedding_dimension_enforced() {
        let mock = MockBackend::with_dimension(
            MockScript::new(vec![
                MockEntry::new(CallKind::Embedder, "abc", MockResponse::Vector(vec![1.0, 0.0, 0.0])),
                MockEntry::new(CallKind::Embedder, "short", MockResponse::Vector(vec![1.0])),
            ]),
            3,
        );
        assert_eq!(embed(&mock, EmbedInput::Text("abc")).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(
            embed(&mock, EmbedInput::Text("short")),
            Err(BackendError::DimensionMismatch { expected: 3, got: 1 })
        );
    }

    #[test]
    fn entity_list_parsed() {
        let m = chat(vec![MockEntry::text(CallKind::Entities, "", "lung, heart, lung")], CallKind::Entities);
        assert_eq!(extract_entities(m.as_ref(), &ctx()).unwrap().len(), 2);
    }
}
