//! Tree search over teacher-guided reasoning steps.
//!
//! One simulation is select → expand → evaluate → backpropagate. The loop
//! stops after `max_simulations`, when the tree is exhausted, or (in adaptive
//! mode) when a step reaches the early-stop score. The best path is then
//! reflected on and composed into the final answer.

mod journal;
mod policy;
mod tree;

use std::sync::Arc;

use thiserror::Error;

pub use journal::{
    load_journal, parse_journal, replay, to_jsonl, Journal, JournalError, JournalEvent, Replay, JOURNAL_SCHEMA,
};
pub use policy::{
    best_path, current_bounds, early_stop_reason, is_exhausted, is_expandable, prune, roi_probabilities,
    select, select_roi_masked, select_roi_on_prob, should_early_stop, ucb, unigram_kl, EarlyStop,
};
pub use tree::{PathResult, SearchTree};

use crate::backends::{
    assessor_evaluate, detect_rois, extract_entities, student_answer, teacher_guide, BackendError, Backends,
    CallContext,
};
use crate::rar::{reflect_rewrite, retrieve_for_step, RarConfig, RarError, StepQuery, VectorIndex};
use crate::types::{AgentNode, EntitySet, ExpansionMode, InvalidInput, NodeId, Query, SearchConfig};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("node {0} already has the maximum number of children")]
    ExpansionBudgetExhausted(NodeId),
    #[error("node {0} is at the maximum depth")]
    MaxDepthReached(NodeId),
    #[error("no node has been evaluated")]
    NoEvaluatedNodes,
    #[error("no region of interest is available")]
    EmptyRoiList,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} has no reward yet")]
    Unscored(NodeId),
    #[error("inconsistent tree: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    InvalidInput(#[from] InvalidInput),
}

fn context<'a>(tree: &'a SearchTree) -> CallContext<'a> {
    CallContext {
        question: &tree.query.question,
        image_ref: (!tree.query.image_ref.is_empty()).then_some(tree.query.image_ref.as_str()),
        temperature: tree.config.temperature,
        max_tokens: tree.config.max_tokens,
    }
}

/// Adds one child under `id`: samples an open region, asks the teacher for
/// guidance and the student for an answer. An empty teacher reply becomes
/// empty guidance rather than an error.
pub fn expand(tree: &mut SearchTree, id: NodeId, backends: &Backends) -> Result<Vec<NodeId>, SearchError> {
    let node = tree.node(id)?;
    if node.depth >= tree.config.max_depth {
        return Err(SearchError::MaxDepthReached(id));
    }
    if node.children.len() >= tree.config.max_branch {
        return Err(SearchError::ExpansionBudgetExhausted(id));
    }
    let feedback = node.feedback.clone();
    let observation = tree.observation_for(id)?;
    let open = tree.available_rois(id)?;
    let tau = tree.config.roi_softmax_temperature;
    let roi_index = {
        let rois = tree.rois.clone();
        select_roi_masked(&rois, &open, tau, &mut tree.rng)?
    };
    let roi = tree.rois[roi_index].clone();
    let ctx = context(tree);
    let guidance = match teacher_guide(backends.teacher.as_ref(), &ctx, &roi, &observation, &feedback) {
        Ok(g) => g.text,
        Err(BackendError::ParseEmpty) => {
            log::warn!("teacher returned no guidance for node {id}");
            String::new()
        }
        Err(e) => return Err(e.into()),
    };
    let answer = student_answer(backends.student.as_ref(), &ctx, &roi, &guidance)?;
    let mut child = AgentNode::child_of(tree.node(id)?, tree.len());
    child.roi_index = Some(roi_index);
    child.guidance = guidance;
    child.answer = answer;
    child.observation = observation;
    Ok(vec![tree.insert_child(child)?])
}

/// Scores a node with the assessor. An unparseable verdict scores 1 and
/// flags the node.
pub fn evaluate(tree: &mut SearchTree, id: NodeId, backends: &Backends) -> Result<u8, SearchError> {
    let node = tree.node(id)?;
    let roi = node.roi_index.map(|r| tree.rois[r].clone()).unwrap_or_else(crate::types::RoiRegion::whole_image);
    let (guidance, answer) = (node.guidance.clone(), node.answer.clone());
    let ctx = context(tree);
    match assessor_evaluate(backends.assessor.as_ref(), &ctx, &roi, &guidance, &answer) {
        Ok(v) => {
            tree.set_evaluation(id, v.score, v.feedback_teacher, v.feedback_student, false)?;
            Ok(v.score)
        }
        Err(BackendError::Unavailable { cause }) => Err(BackendError::Unavailable { cause }.into()),
        Err(e) => {
            log::warn!("evaluation of node {id} failed ({e}); scoring 1");
            tree.set_evaluation(id, 1, String::new(), String::new(), true)?;
            Ok(1)
        }
    }
}

/// Searches, reflects and composes. Holds everything besides the backends
/// that a run needs.
#[derive(Debug, Clone, Default)]
pub struct SearchRun {
    pub config: SearchConfig,
    pub rar: RarConfig,
    pub knowledge: Option<Arc<VectorIndex>>,
    /// Skip entity extraction and use these instead.
    pub entities: Option<EntitySet>,
    pub journal: Option<Journal>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub tree: SearchTree,
    pub path: PathResult,
    /// Nodes the convergence test closed.
    pub converged: usize,
}

impl SearchRun {
    pub fn new(config: SearchConfig) -> Self {
        SearchRun { config, ..Default::default() }
    }

    pub fn run(&self, query: &Query, backends: &Backends) -> Result<SearchOutcome, SearchError> {
        self.config.validate()?;
        query.validate()?;
        self.rar.validate().map_err(InvalidInput::Config)?;
        let recorded;
        let backends = match &self.journal {
            Some(j) => {
                j.push(JournalEvent::Header {
                    schema: JOURNAL_SCHEMA.to_string(),
                    query: query.clone(),
                    config: self.config.clone(),
                    rar: self.rar,
                });
                recorded = backends.clone().recorded(j.recorder());
                &recorded
            }
            None => backends,
        };

        let mut tree = SearchTree::new(query.clone(), Vec::new(), self.config.clone());
        let rois = self.detect(&tree, backends)?;
        if !rois.is_empty() {
            tree.rois = rois;
        }
        if let Some(j) = &self.journal {
            j.push(JournalEvent::Rois { rois: tree.rois.clone() });
            tree.set_journal(j.clone());
        }

        let converged = self.simulate(&mut tree, backends)?;
        let mut path = best_path(&tree)?;
        self.reflect(&mut tree, &path, backends)?;
        path.final_answer = compose_answer(&tree, &path, backends)?;
        if let Some(j) = &self.journal {
            j.push(JournalEvent::Result { path: path.clone() });
        }
        Ok(SearchOutcome { tree, path, converged })
    }

    fn detect(&self, tree: &SearchTree, backends: &Backends) -> Result<Vec<crate::types::RoiRegion>, SearchError> {
        let Some(detector) = &backends.detector else { return Ok(Vec::new()) };
        let entities = match (&self.entities, &backends.entities) {
            (Some(e), _) => e.clone(),
            (None, Some(model)) => extract_entities(model.as_ref(), &context(tree))?,
            (None, None) => EntitySet::default(),
        };
        match detect_rois(detector.as_ref(), &tree.query.image_ref, &entities) {
            Ok(rois) => Ok(rois),
            Err(BackendError::Unavailable { cause }) => Err(BackendError::Unavailable { cause }.into()),
            Err(e) => {
                log::warn!("detector output rejected ({e}); using the whole image");
                Ok(Vec::new())
            }
        }
    }

    fn simulate(&self, tree: &mut SearchTree, backends: &Backends) -> Result<usize, SearchError> {
        let adaptive = tree.config.expansion_mode == ExpansionMode::Adaptive;
        let mut converged = 0;
        for _ in 0..tree.config.max_simulations {
            let Some(leaf) = select(tree)? else { break };
            for child in expand(tree, leaf, backends)? {
                evaluate(tree, child, backends)?;
                tree.backpropagate(child)?;
                if tree.config.alpha_beta_enabled && prune(tree, child, &current_bounds(tree)) {
                    tree.mark_pruned(child)?;
                }
                if !adaptive {
                    continue;
                }
                match early_stop_reason(tree, child, Some(leaf), backends.embedder.as_deref()) {
                    Some(EarlyStop::FullScore) => return Ok(converged),
                    Some(EarlyStop::Converged) => {
                        tree.mark_converged(child)?;
                        converged += 1;
                    }
                    None => {}
                }
            }
        }
        Ok(converged)
    }

    /// Rewrites every step on `path` scoring under the reflection threshold.
    /// Rewards are left as they were.
    fn reflect(&self, tree: &mut SearchTree, path: &PathResult, backends: &Backends) -> Result<(), SearchError> {
        for &id in &path.node_ids {
            let node = tree.node(id)?.clone();
            if !node.is_scored() || node.reward >= tree.config.reflection_score_threshold {
                continue;
            }
            let roi = node.roi_index.map(|r| tree.rois[r].clone()).unwrap_or_else(crate::types::RoiRegion::whole_image);
            let ctx = context(tree);
            let knowledge = match (&self.knowledge, &backends.embedder) {
                (Some(index), Some(embedder)) => {
                    let step = StepQuery {
                        question: ctx.question,
                        guidance: &node.guidance,
                        answer: &node.answer,
                        image_ref: ctx.image_ref,
                    };
                    match retrieve_for_step(index, embedder.as_ref(), backends.relevance.as_deref(), &step, &self.rar) {
                        Ok(trace) => trace.knowledge,
                        Err(RarError::Backend(BackendError::Unavailable { cause })) => {
                            return Err(BackendError::Unavailable { cause }.into())
                        }
                        Err(e) => {
                            log::warn!("retrieval for node {id} failed ({e}); reflecting without knowledge");
                            Vec::new()
                        }
                    }
                }
                _ => Vec::new(),
            };
            let feedback = if node.revision_feedback.is_empty() { &node.feedback } else { &node.revision_feedback };
            let refined =
                reflect_rewrite(backends.student.as_ref(), &ctx, &roi, &node.guidance, &node.answer, feedback, &knowledge)?;
            tree.set_refined(id, refined)?;
        }
        Ok(())
    }
}

/// One student call turning the path's (guidance, answer) steps into the
/// final answer. Refined answers replace the originals.
pub fn compose_answer(tree: &SearchTree, path: &PathResult, backends: &Backends) -> Result<String, SearchError> {
    let mut steps = Vec::new();
    for &id in &path.node_ids {
        let n = tree.node(id)?;
        if n.parent_id.is_none() && !n.is_scored() {
            continue;
        }
        steps.push((n.guidance.clone(), n.effective_answer().to_string()));
    }
    if steps.is_empty() {
        return Err(SearchError::NoEvaluatedNodes);
    }
    let request = crate::backends::compose_request(&context(tree), &steps);
    Ok(backends.student.complete(&request)?.trim().to_string())
}

/// Runs a search with default retrieval settings and no knowledge base.
pub fn run_search(query: &Query, backends: &Backends, config: SearchConfig) -> Result<PathResult, SearchError> {
    SearchRun::new(config).run(query, backends).map(|o| o.path)
}
