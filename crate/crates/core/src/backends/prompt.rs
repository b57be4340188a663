//! Prompt rendering. The teaching and evaluation templates ship verbatim in
//! `templates/`; rendering only fills their slots.

use crate::types::{Observation, RoiRegion};

pub const TEACHER_TEMPLATE: &str = include_str!("../../templates/teacher.txt");
pub const ASSESSOR_TEMPLATE: &str = include_str!("../../templates/assessor.txt");
pub const STUDENT_TEMPLATE: &str = include_str!("../../templates/student.txt");
pub const REWRITE_TEMPLATE: &str = include_str!("../../templates/rewrite.txt");
pub const COMPOSE_TEMPLATE: &str = include_str!("../../templates/compose.txt");
pub const ENTITIES_TEMPLATE: &str = include_str!("../../templates/entities.txt");

/// Header line preceding sibling guidance in the teacher prompt.
pub const SIBLING_GUIDANCE_HEADER: &str = "Alternative guidance already tried at this step:";
const SIBLING_ANSWER_HEADER: &str = "Alternative answers at this step:";
const SIBLING_FEEDBACK_HEADER: &str = "Feedback on alternatives:";
/// Placeholder used when reflection runs without retrieved passages.
pub const NO_KNOWLEDGE_MARKER: &str = "(no external knowledge retrieved)";

/// Replaces each slot in one left-to-right pass, so slot text appearing
/// inside a value is never substituted again.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    loop {
        let next = slots
            .iter()
            .filter_map(|(slot, value)| rest.find(slot).map(|at| (at, *slot, *value)))
            .min_by_key(|(at, slot, _)| (*at, usize::MAX - slot.len()));
        match next {
            Some((at, slot, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

fn section(steps: &[String], alt_header: &str, alternatives: &[String]) -> String {
    let mut lines: Vec<String> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Step {}: {}", i + 1, s))
        .collect();
    if !alternatives.is_empty() {
        lines.push(alt_header.to_string());
        lines.extend(alternatives.iter().map(|s| format!("- {s}")));
    }
    lines.join("\n")
}

pub fn render_teacher_prompt(roi: &RoiRegion, obs: &Observation, feedback: &str) -> String {
    let previous = section(&obs.ancestor_guidance, SIBLING_GUIDANCE_HEADER, &obs.sibling_guidance);
    let answers = section(&obs.ancestor_answers, SIBLING_ANSWER_HEADER, &obs.sibling_answers);
    let mut feedback_block = feedback.trim().to_string();
    if !obs.sibling_feedback.is_empty() {
        if !feedback_block.is_empty() {
            feedback_block.push('\n');
        }
        feedback_block.push_str(SIBLING_FEEDBACK_HEADER);
        for f in &obs.sibling_feedback {
            feedback_block.push_str("\n- ");
            feedback_block.push_str(f);
        }
    }
    let mut prompt = fill(
        TEACHER_TEMPLATE,
        &[
            ("{{previous_guidance}}", &previous),
            ("{{student_answer}}", &answers),
            ("{{feedback}}", &feedback_block),
        ],
    );
    prompt.push_str("\nRed-boxed area: ");
    prompt.push_str(&roi.describe());
    prompt.push('\n');
    prompt
}

pub fn render_assessor_prompt(guidance: &str, answer: &str) -> String {
    fill(ASSESSOR_TEMPLATE, &[("{Teacher's guidance}", guidance), ("{Student's answer}", answer)])
}

pub fn render_student_prompt(question: &str, roi: &RoiRegion, guidance: &str) -> String {
    fill(
        STUDENT_TEMPLATE,
        &[("{{question}}", question), ("{{roi}}", &roi.describe()), ("{{guidance}}", guidance)],
    )
}

pub struct RewriteInputs<'a> {
    pub question: &'a str,
    pub roi: &'a RoiRegion,
    pub guidance: &'a str,
    pub answer: &'a str,
    pub feedback: &'a str,
    pub knowledge: &'a [String],
}

pub fn render_rewrite_prompt(inputs: &RewriteInputs<'_>) -> String {
    let knowledge = if inputs.knowledge.is_empty() {
        NO_KNOWLEDGE_MARKER.to_string()
    } else {
        inputs
            .knowledge
            .iter()
            .enumerate()
            .map(|(i, passage)| format!("[{}] {}", i + 1, passage))
            .collect::<Vec<_>>()
            .join("\n")
    };
    fill(
        REWRITE_TEMPLATE,
        &[
            ("{{question}}", inputs.question),
            ("{{roi}}", &inputs.roi.describe()),
            ("{{guidance}}", inputs.guidance),
            ("{{answer}}", inputs.answer),
            ("{{feedback}}", inputs.feedback),
            ("{{knowledge}}", &knowledge),
        ],
    )
}

/// `steps` are (guidance, answer) pairs along the chosen path.
pub fn render_compose_prompt(question: &str, steps: &[(String, String)]) -> String {
    let body = steps
        .iter()
        .enumerate()
        .map(|(i, (g, a))| format!("Step {}:\nGuidance: {}\nAnswer: {}", i + 1, g, a))
        .collect::<Vec<_>>()
        .join("\n\n");
    fill(COMPOSE_TEMPLATE, &[("{{question}}", question), ("{{steps}}", &body)])
}

pub fn render_entities_prompt(question: &str) -> String {
    fill(ENTITIES_TEMPLATE, &[("{{question}}", question)])
}
