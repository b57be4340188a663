//! Tag-based parsing of teacher and assessor replies.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessorVerdict {
    pub score: u8,
    pub feedback_teacher: String,
    pub feedback_student: String,
}

impl AssessorVerdict {
    pub fn new(score: u8, feedback_teacher: impl Into<String>, feedback_student: impl Into<String>) -> Self {
        AssessorVerdict { score, feedback_teacher: feedback_teacher.into(), feedback_student: feedback_student.into() }
    }

    /// Renders the verdict in the reply format the evaluation prompt asks for.
    pub fn to_reply(&self) -> String {
        format!(
            "<score>{}</score>\n<feedback1>{}</feedback1>\n<feedback2>{}</feedback2>",
            self.score, self.feedback_teacher, self.feedback_student
        )
    }
}

/// Extracted guidance plus whether the reply ignored the tag format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedGuidance {
    pub text: String,
    pub untagged: bool,
}

fn guidance_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)<\s*/?\s*guidance\s*>").unwrap())
}

fn tag(name: &str) -> Regex {
    Regex::new(&format!(r"(?is)<{name}>(.*?)</{name}>")).unwrap()
}

fn score_tag() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| tag("score"))
}

fn feedback_tags() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| (tag("feedback1"), tag("feedback2")))
}

/// Pulls the guidance out of a teacher reply. The teaching template uses the
/// same `</Guidance>` marker on both sides, so the innermost span is the one
/// between the last two markers.
pub fn parse_guidance(raw: &str) -> Result<ParsedGuidance, BackendError> {
    let markers: Vec<_> = guidance_marker().find_iter(raw).collect();
    let (text, untagged) = match markers.as_slice() {
        [] => (raw.trim(), true),
        [only] => {
            let after = raw[only.end()..].trim();
            if after.is_empty() {
                (raw[..only.start()].trim(), true)
            } else {
                (after, true)
            }
        }
        [.., open, close] => (raw[open.end()..close.start()].trim(), false),
    };
    if text.is_empty() {
        return Err(BackendError::ParseEmpty);
    }
    if untagged {
        log::warn!("teacher reply did not follow the guidance tag format; using the whole reply");
    }
    Ok(ParsedGuidance { text: text.to_string(), untagged })
}

pub fn parse_assessor(raw: &str) -> Result<AssessorVerdict, BackendError> {
    let mut score = None;
    for caps in score_tag().captures_iter(raw) {
        if let Ok(v) = caps[1].trim().parse::<i64>() {
            score = Some(v);
        }
    }
    let score = score.ok_or_else(|| BackendError::ParseScore { raw: raw.to_string() })?;
    if !(1..=5).contains(&score) {
        return Err(BackendError::ScoreRange(score));
    }
    let (f1, f2) = feedback_tags();
    let grab = |re: &Regex| re.captures_iter(raw).last().map(|c| c[1].trim().to_string()).unwrap_or_default();
    Ok(AssessorVerdict { score: score as u8, feedback_teacher: grab(f1), feedback_student: grab(f2) })
}
