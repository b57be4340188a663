use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::journal::{Journal, JournalEvent};
use super::SearchError;
use crate::types::{AgentNode, NodeId, Observation, Query, RoiRegion, SearchConfig, MAX_SCORE};

/// Root-to-leaf path with its summed reward and the composed answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub node_ids: Vec<NodeId>,
    pub total_reward: f64,
    pub final_answer: String,
}

/// Id-indexed node store. Node ids equal their insertion index and the root
/// is always id 0. Every mutation goes through a method here so it can be
/// journaled and replayed.
#[derive(Debug, Clone)]
pub struct SearchTree {
    pub query: Query,
    pub config: SearchConfig,
    pub rois: Vec<RoiRegion>,
    nodes: Vec<AgentNode>,
    pub(crate) rng: ChaCha8Rng,
    best_complete_mean: Option<f64>,
    evaluations: usize,
    journal: Option<Journal>,
}

impl SearchTree {
    /// An empty region list is replaced by the whole-image region.
    pub fn new(query: Query, mut rois: Vec<RoiRegion>, config: SearchConfig) -> Self {
        if rois.is_empty() {
            rois.push(RoiRegion::whole_image());
        }
        SearchTree {
            query,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            rois,
            nodes: vec![AgentNode::root()],
            best_complete_mean: None,
            evaluations: 0,
            journal: None,
        }
    }

    pub(crate) fn set_journal(&mut self, journal: Journal) {
        self.journal = Some(journal);
    }

    fn log(&self, event: impl FnOnce() -> JournalEvent) {
        if let Some(j) = &self.journal {
            j.push(event());
        }
    }

    pub fn root_id(&self) -> NodeId {
        0
    }

    pub fn root(&self) -> &AgentNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[AgentNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: NodeId) -> Result<&AgentNode, SearchError> {
        self.nodes.get(id).ok_or(SearchError::UnknownNode(id))
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Result<&mut AgentNode, SearchError> {
        self.nodes.get_mut(id).ok_or(SearchError::UnknownNode(id))
    }

    /// Number of assessor evaluations applied so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Best mean reward over paths that reached `max_depth`.
    pub fn best_complete_mean(&self) -> Option<f64> {
        self.best_complete_mean
    }

    /// Ids from the root down to `id`, inclusive.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<NodeId>, SearchError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent_id {
            path.push(p);
            cur = self.node(p)?;
        }
        path.reverse();
        Ok(path)
    }

    /// The five observation lists seen when expanding `id`: the steps on the
    /// path from the root to `id` and the children `id` already has.
    pub fn observation_for(&self, id: NodeId) -> Result<Observation, SearchError> {
        let mut obs = Observation::default();
        for pid in self.path_to(id)? {
            let n = &self.nodes[pid];
            if n.parent_id.is_none() {
                continue;
            }
            obs.ancestor_guidance.push(n.guidance.clone());
            obs.ancestor_answers.push(n.answer.clone());
        }
        for &cid in &self.node(id)?.children {
            let c = &self.nodes[cid];
            obs.sibling_guidance.push(c.guidance.clone());
            obs.sibling_answers.push(c.answer.clone());
            obs.sibling_feedback.push(c.feedback.clone());
        }
        Ok(obs)
    }

    /// Regions still open on the path to `id`: a converged step closes its
    /// region for everything below it.
    pub fn available_rois(&self, id: NodeId) -> Result<Vec<bool>, SearchError> {
        let mut open = vec![true; self.rois.len()];
        for pid in self.path_to(id)? {
            let n = &self.nodes[pid];
            if let (true, Some(r)) = (n.converged, n.roi_index) {
                if r < open.len() {
                    open[r] = false;
                }
            }
        }
        Ok(open)
    }

    /// Appends `node` under its parent. The id must be the next free one.
    pub fn insert_child(&mut self, node: AgentNode) -> Result<NodeId, SearchError> {
        let parent_id = node.parent_id.ok_or(SearchError::Inconsistent("inserted node has no parent".into()))?;
        let id = self.nodes.len();
        if node.node_id != id {
            return Err(SearchError::Inconsistent(format!("expected node id {id}, got {}", node.node_id)));
        }
        let parent = self.node(parent_id)?;
        if node.depth != parent.depth + 1 {
            return Err(SearchError::Inconsistent(format!("node {id} breaks depth continuity")));
        }
        if parent.children.len() >= self.config.max_branch {
            return Err(SearchError::ExpansionBudgetExhausted(parent_id));
        }
        if node.depth > self.config.max_depth {
            return Err(SearchError::MaxDepthReached(parent_id));
        }
        if node.roi_index.is_some_and(|r| r >= self.rois.len()) {
            return Err(SearchError::Inconsistent(format!("node {id} points at a missing region")));
        }
        self.log(|| JournalEvent::NodeAdded { node: node.clone() });
        self.nodes.push(node);
        self.nodes[parent_id].children.push(id);
        Ok(id)
    }

    /// Stores an assessor outcome on a node.
    pub fn set_evaluation(
        &mut self,
        id: NodeId,
        reward: u8,
        feedback: String,
        revision_feedback: String,
        evaluation_failed: bool,
    ) -> Result<(), SearchError> {
        if !(1..=MAX_SCORE).contains(&reward) {
            return Err(SearchError::Inconsistent(format!("reward {reward} outside 1..=5")));
        }
        self.log(|| JournalEvent::Evaluated {
            node_id: id,
            reward,
            feedback: feedback.clone(),
            revision_feedback: revision_feedback.clone(),
            evaluation_failed,
        });
        let n = self.node_mut(id)?;
        n.reward = reward;
        n.feedback = feedback;
        n.revision_feedback = revision_feedback;
        n.evaluation_failed = evaluation_failed;
        self.evaluations += 1;
        if self.nodes[id].depth == self.config.max_depth {
            let path = self.path_to(id)?;
            let steps: Vec<f64> =
                path.iter().map(|&p| &self.nodes[p]).filter(|n| n.parent_id.is_some()).map(|n| f64::from(n.reward)).collect();
            let mean = steps.iter().sum::<f64>() / steps.len() as f64;
            if self.best_complete_mean.is_none_or(|b| mean > b) {
                self.best_complete_mean = Some(mean);
            }
        }
        Ok(())
    }

    /// Adds the node's reward to it and every ancestor, one visit each.
    pub fn backpropagate(&mut self, id: NodeId) -> Result<(), SearchError> {
        let reward = self.node(id)?.reward;
        if reward < 1 {
            return Err(SearchError::Unscored(id));
        }
        self.log(|| JournalEvent::Backpropagated { node_id: id });
        for pid in self.path_to(id)? {
            let n = &mut self.nodes[pid];
            n.visit_count += 1;
            n.cumulative_reward += f64::from(reward);
        }
        Ok(())
    }

    pub fn mark_pruned(&mut self, id: NodeId) -> Result<(), SearchError> {
        if !self.node(id)?.pruned {
            self.log(|| JournalEvent::Pruned { node_id: id });
            self.node_mut(id)?.pruned = true;
        }
        Ok(())
    }

    pub fn mark_converged(&mut self, id: NodeId) -> Result<(), SearchError> {
        if !self.node(id)?.converged {
            self.log(|| JournalEvent::Converged { node_id: id });
            self.node_mut(id)?.converged = true;
        }
        Ok(())
    }

    pub fn set_refined(&mut self, id: NodeId, refined: String) -> Result<(), SearchError> {
        self.log(|| JournalEvent::Refined { node_id: id, refined_answer: refined.clone() });
        self.node_mut(id)?.refined_answer = Some(refined);
        Ok(())
    }
}
