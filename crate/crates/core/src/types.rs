//! Shared domain types: the query, detected regions, the per-node agent state
//! and the search configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

/// Highest score on the assessor rubric.
pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Open,
    Closed,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvalidInput {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("bounding box {0:?} is not ordered or not normalized")]
    BadBox([f64; 4]),
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f64),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub question: String,
    /// Opaque image handle: a file path or a blob id. Never decoded here.
    pub image_ref: String,
    pub question_kind: QuestionKind,
}

impl Query {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        image_ref: impl Into<String>,
        question_kind: QuestionKind,
    ) -> Result<Self, InvalidInput> {
        let query = Query {
            id: id.into(),
            question: question.into(),
            image_ref: image_ref.into(),
            question_kind,
        };
        query.validate()?;
        Ok(query)
    }

    pub fn validate(&self) -> Result<(), InvalidInput> {
        if self.id.trim().is_empty() {
            return Err(InvalidInput::Empty("query id"));
        }
        if self.question.trim().is_empty() {
            return Err(InvalidInput::Empty("question"));
        }
        Ok(())
    }
}

/// A detected region: normalized box, detector confidence and entity label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRegion {
    /// `[x0, y0, x1, y1]` in normalized image coordinates.
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub label: String,
}

impl RoiRegion {
    pub fn new(bbox: [f64; 4], confidence: f64, label: impl Into<String>) -> Result<Self, InvalidInput> {
        let roi = RoiRegion { bbox, confidence, label: label.into() };
        roi.validate()?;
        Ok(roi)
    }

    /// Region covering the whole image, used when the detector finds nothing.
    pub fn whole_image() -> Self {
        RoiRegion { bbox: [0.0, 0.0, 1.0, 1.0], confidence: 1.0, label: "full image".to_string() }
    }

    pub fn validate(&self) -> Result<(), InvalidInput> {
        let [x0, y0, x1, y1] = self.bbox;
        let in_unit = self.bbox.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || x0 >= x1 || y0 >= y1 {
            return Err(InvalidInput::BadBox(self.bbox));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(InvalidInput::BadConfidence(self.confidence));
        }
        Ok(())
    }

    /// Human-readable description used in prompts.
    pub fn describe(&self) -> String {
        let [x0, y0, x1, y1] = self.bbox;
        format!(
            "{} at [{:.3}, {:.3}, {:.3}, {:.3}] (confidence {:.2})",
            self.label, x0, y0, x1, y1, self.confidence
        )
    }
}

/// Ordered, duplicate-free list of medical entity names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntitySet {
    entities: Vec<String>,
}

impl EntitySet {
    /// Builds a set from raw names, trimming whitespace and dropping empties
    /// and repeats while keeping first-seen order.
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut entities: Vec<String> = Vec::new();
        for name in names {
            let name = name.as_ref().trim();
            if !name.is_empty() && !entities.iter().any(|e| e == name) {
                entities.push(name.to_string());
            }
        }
        EntitySet { entities }
    }

    /// Parses a comma- or newline-separated list.
    pub fn parse_list(raw: &str) -> Self {
        Self::from_names(raw.split([',', '\n', ';']))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// What the teacher sees when producing the next guidance: the chain of
/// ancestors and the already-explored siblings of the node being created.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ancestor_guidance: Vec<String>,
    pub ancestor_answers: Vec<String>,
    pub sibling_guidance: Vec<String>,
    pub sibling_answers: Vec<String>,
    pub sibling_feedback: Vec<String>,
}

impl Observation {
    pub fn is_consistent(&self) -> bool {
        self.ancestor_guidance.len() == self.ancestor_answers.len()
            && self.sibling_guidance.len() == self.sibling_answers.len()
            && self.sibling_answers.len() == self.sibling_feedback.len()
    }
}

/// One state of the reasoning tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNode {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub depth: usize,
    pub roi_index: Option<usize>,
    pub guidance: String,
    pub answer: String,
    /// 0 means unscored; 1..=5 is the assessor rubric.
    pub reward: u8,
    /// Assessor feedback addressed to the teacher.
    pub feedback: String,
    /// Assessor revision suggestions addressed to the student.
    #[serde(default)]
    pub revision_feedback: String,
    pub refined_answer: Option<String>,
    pub observation: Observation,
    pub visit_count: u64,
    pub cumulative_reward: f64,
    pub children: Vec<NodeId>,
    /// Set when the assessor reply could not be parsed and the score was
    /// defaulted.
    #[serde(default)]
    pub evaluation_failed: bool,
    /// Excluded from selection by score bounds.
    #[serde(default)]
    pub pruned: bool,
    /// Answer converged with the parent's; the node's region is considered
    /// used up along this path.
    #[serde(default)]
    pub converged: bool,
}

impl AgentNode {
    pub fn root() -> Self {
        AgentNode {
            node_id: 0,
            parent_id: None,
            depth: 0,
            roi_index: None,
            guidance: String::new(),
            answer: String::new(),
            reward: 0,
            feedback: String::new(),
            revision_feedback: String::new(),
            refined_answer: None,
            observation: Observation::default(),
            visit_count: 0,
            cumulative_reward: 0.0,
            children: Vec::new(),
            evaluation_failed: false,
            pruned: false,
            converged: false,
        }
    }

    pub fn child_of(parent: &AgentNode, node_id: NodeId) -> Self {
        AgentNode {
            node_id,
            parent_id: Some(parent.node_id),
            depth: parent.depth + 1,
            ..AgentNode::root()
        }
    }

    pub fn is_scored(&self) -> bool {
        self.reward > 0
    }

    /// R(s)/N(s); zero for an unvisited node.
    pub fn mean_reward(&self) -> f64 {
        if self.visit_count == 0 {
            0.0
        } else {
            self.cumulative_reward / self.visit_count as f64
        }
    }

    /// The answer after reflection when one exists, otherwise the original.
    pub fn effective_answer(&self) -> &str {
        self.refined_answer.as_deref().unwrap_or(&self.answer)
    }
}

/// Checks every node-local invariant, plus depth continuity when the parent
/// is supplied.
pub fn validate_node(node: &AgentNode, parent: Option<&AgentNode>) -> Vec<String> {
    let mut violations = Vec::new();
    if node.reward > MAX_SCORE {
        violations.push("reward out of range".to_string());
    }
    if !(node.cumulative_reward >= 0.0) {
        violations.push("negative cumulative reward".to_string());
    }
    if node.cumulative_reward > f64::from(MAX_SCORE) * node.visit_count as f64 + 1e-9 {
        violations.push("cumulative reward exceeds 5 x visit count".to_string());
    }
    if !node.observation.is_consistent() {
        violations.push("observation lists have mismatched lengths".to_string());
    }
    match (node.parent_id, parent) {
        (None, _) if node.depth != 0 => violations.push("root depth is not zero".to_string()),
        (Some(pid), Some(p)) => {
            if pid != p.node_id {
                violations.push("parent id mismatch".to_string());
            }
            if node.depth != p.depth + 1 {
                violations.push("depth discontinuity".to_string());
            }
        }
        _ => {}
    }
    violations
}

/// Which expansion policy the search follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    /// Early stopping, convergence detection and score-gated widening.
    #[default]
    Adaptive,
    /// Every node is widened to `max_branch` children down to `max_depth`,
    /// with no early stopping.
    Fixed,
}

/// Score interval outside of which subtrees are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneBounds {
    pub alpha: f64,
    pub beta: f64,
}

impl PruneBounds {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, InvalidInput> {
        if alpha > beta {
            return Err(InvalidInput::Config(format!("alpha {alpha} exceeds beta {beta}")));
        }
        Ok(PruneBounds { alpha, beta })
    }

    pub fn contains(&self, score: f64) -> bool {
        score >= self.alpha && score <= self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub max_depth: usize,
    pub max_branch: usize,
    pub max_simulations: usize,
    pub exploration_c: f64,
    pub early_stop_score: u8,
    pub reflection_score_threshold: u8,
    pub kl_epsilon: f64,
    pub cosine_tau: f64,
    pub alpha_beta_enabled: bool,
    /// Points subtracted from the best complete-path mean to obtain alpha.
    pub alpha_slack: f64,
    /// Pins the pruning interval instead of maintaining it from the search.
    pub fixed_bounds: Option<PruneBounds>,
    pub temperature: f64,
    pub roi_softmax_temperature: f64,
    pub expansion_mode: ExpansionMode,
    pub max_tokens: u32,
    pub rng_seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_depth: 3,
            max_branch: 3,
            max_simulations: 20,
            exploration_c: std::f64::consts::SQRT_2,
            early_stop_score: 5,
            reflection_score_threshold: 4,
            kl_epsilon: 0.05,
            cosine_tau: 0.95,
            alpha_beta_enabled: false,
            alpha_slack: 2.0,
            fixed_bounds: None,
            temperature: 0.7,
            roi_softmax_temperature: 1.0,
            expansion_mode: ExpansionMode::Adaptive,
            max_tokens: 512,
            rng_seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), InvalidInput> {
        let fail = |msg: String| Err(InvalidInput::Config(msg));
        if self.max_depth < 1 || self.max_branch < 1 || self.max_simulations < 1 {
            return fail("max_depth, max_branch and max_simulations must be >= 1".into());
        }
        if !(self.exploration_c > 0.0) {
            return fail(format!("exploration_c must be > 0, got {}", self.exploration_c));
        }
        if self.early_stop_score < 1 || self.early_stop_score > MAX_SCORE {
            return fail(format!("early_stop_score {} outside 1..=5", self.early_stop_score));
        }
        if self.reflection_score_threshold > self.early_stop_score {
            return fail("reflection_score_threshold exceeds early_stop_score".into());
        }
        if !(self.kl_epsilon > 0.0) {
            return fail("kl_epsilon must be > 0".into());
        }
        if !(self.cosine_tau > 0.0 && self.cosine_tau <= 1.0) {
            return fail("cosine_tau must lie in (0, 1]".into());
        }
        if !(self.roi_softmax_temperature > 0.0) {
            return fail("roi_softmax_temperature must be > 0".into());
        }
        if !(self.temperature >= 0.0) {
            return fail("temperature must be >= 0".into());
        }
        if !(self.alpha_slack >= 0.0) {
            return fail("alpha_slack must be >= 0".into());
        }
        if let Some(b) = self.fixed_bounds {
            PruneBounds::new(b.alpha, b.beta)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_root_is_valid() {
        assert!(validate_node(&AgentNode::root(), None).is_empty());
    }

    #[test]
    fn reward_above_five_is_flagged() {
        let mut node = AgentNode::root();
        node.reward = 7;
        assert_eq!(validate_node(&node, None), vec!["reward out of range".to_string()]);
    }

    #[test]
    fn skipped_depth_is_flagged() {
        let parent = AgentNode::root();
        let mut child = AgentNode::child_of(&parent, 1);
        child.depth = parent.depth + 2;
        assert_eq!(validate_node(&child, Some(&parent)), vec!["depth discontinuity".to_string()]);
    }

    #[test]
    fn cumulative_reward_bounded_by_visits() {
        let mut node = AgentNode::root();
        node.visit_count = 1;
        node.cumulative_reward = 6.0;
        assert_eq!(validate_node(&node, None).len(), 1);
    }

    #[test]
    fn roi_rejects_inverted_box() {
        assert!(RoiRegion::new([0.6, 0.1, 0.4, 0.9], 0.5, "lung").is_err());
        assert!(RoiRegion::new([0.1, 0.1, 0.4, 0.9], 1.5, "lung").is_err());
        assert!(RoiRegion::new([0.1, 0.1, 0.4, 0.9], 0.5, "lung").is_ok());
    }

    #[test]
    fn entity_set_drops_duplicates() {
        let set = EntitySet::parse_list("lung, heart,lung,, heart");
        assert_eq!(set.as_slice(), &["lung".to_string(), "heart".to_string()]);
    }

    #[test]
    fn query_requires_id_and_question() {
        assert!(Query::new("", "q", "img.png", QuestionKind::Open).is_err());
        assert!(Query::new("1", "  ", "img.png", QuestionKind::Open).is_err());
    }

    #[test]
    fn config_thresholds_are_checked() {
        let mut cfg = SearchConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.reflection_score_threshold = 5;
        cfg.early_stop_score = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn node_serialization_round_trips() {
        let mut node = AgentNode::child_of(&AgentNode::root(), 3);
        node.guidance = "look at the apex".into();
        node.reward = 4;
        node.refined_answer = Some("refined".into());
        node.observation.ancestor_guidance.push("g".into());
        node.observation.ancestor_answers.push("a".into());
        let line = serde_json::to_string(&node).unwrap();
        assert!(!line.contains('\n'));
        let back: AgentNode = serde_json::from_str(&line).unwrap();
        assert_eq!(back, node);
    }
}
