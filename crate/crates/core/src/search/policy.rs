use std::collections::HashMap;

use rand::Rng;

use super::tree::{PathResult, SearchTree};
use super::SearchError;
use crate::backends::{embed, EmbedInput, Embedder};
use crate::text::{cosine, tokenize};
use crate::types::{ExpansionMode, NodeId, PruneBounds, RoiRegion, MAX_SCORE};

/// `R/N + c·sqrt(2 ln Np / N)`, or `+inf` for an unvisited node so that new
/// children are tried before any revisit.
pub fn ucb(reward_sum: f64, visits: u64, parent_visits: u64, c: f64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    let n = visits as f64;
    let np = parent_visits.max(1) as f64;
    reward_sum / n + c * (2.0 * np.ln() / n).sqrt()
}

/// Whether `id` may receive another child.
pub fn is_expandable(tree: &SearchTree, id: NodeId) -> bool {
    let Ok(node) = tree.node(id) else { return false };
    let cfg = &tree.config;
    if node.pruned || node.depth >= cfg.max_depth || node.children.len() >= cfg.max_branch {
        return false;
    }
    if cfg.expansion_mode == ExpansionMode::Adaptive
        && node.children.iter().any(|&c| tree.nodes()[c].reward >= cfg.early_stop_score)
    {
        return false;
    }
    tree.available_rois(id).map(|open| open.contains(&true)).unwrap_or(false)
}

/// True when nothing below `id` can be expanded any more.
pub fn is_exhausted(tree: &SearchTree, id: NodeId) -> bool {
    let node = &tree.nodes()[id];
    if node.pruned {
        return true;
    }
    !is_expandable(tree, id) && node.children.iter().all(|&c| is_exhausted(tree, c))
}

/// Current pruning window: the fixed override when configured, otherwise
/// `[best complete-path mean - slack, 5]`.
pub fn current_bounds(tree: &SearchTree) -> PruneBounds {
    let cfg = &tree.config;
    if let Some(b) = cfg.fixed_bounds {
        return b;
    }
    let alpha = tree.best_complete_mean().map(|m| m - cfg.alpha_slack).unwrap_or(0.0);
    PruneBounds { alpha: alpha.min(f64::from(MAX_SCORE)), beta: f64::from(MAX_SCORE) }
}

/// True when the node's score falls outside `bounds`. Unscored nodes are
/// never pruned.
pub fn prune(tree: &SearchTree, id: NodeId, bounds: &PruneBounds) -> bool {
    match tree.node(id) {
        Ok(n) if n.is_scored() => !bounds.contains(f64::from(n.reward)),
        _ => false,
    }
}

/// Descends by UCB from the root to the node to expand next. Children that
/// are pruned or whose subtree is exhausted are skipped. Returns `None` once
/// the whole tree is exhausted.
pub fn select(tree: &mut SearchTree) -> Result<Option<NodeId>, SearchError> {
    let mut cur = tree.root_id();
    loop {
        if is_expandable(tree, cur) {
            return Ok(Some(cur));
        }
        if tree.config.alpha_beta_enabled {
            let bounds = current_bounds(tree);
            for c in tree.nodes()[cur].children.clone() {
                if prune(tree, c, &bounds) {
                    tree.mark_pruned(c)?;
                }
            }
        }
        let parent = &tree.nodes()[cur];
        let c = tree.config.exploration_c;
        let mut best: Option<(f64, NodeId)> = None;
        for &ch in &parent.children {
            if is_exhausted(tree, ch) {
                continue;
            }
            let n = &tree.nodes()[ch];
            let u = ucb(n.cumulative_reward, n.visit_count, parent.visit_count, c);
            if best.is_none_or(|(b, _)| u > b) {
                best = Some((u, ch));
            }
        }
        match best {
            Some((_, ch)) => cur = ch,
            None => return Ok(None),
        }
    }
}

/// Softmax over `confidence / tau` restricted to the open regions.
pub fn roi_probabilities(rois: &[RoiRegion], open: &[bool], tau: f64) -> Vec<f64> {
    let logits: Vec<Option<f64>> =
        rois.iter().zip(open).map(|(r, &o)| o.then(|| r.confidence / tau)).collect();
    let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| l.map(|v| (v - max).exp()).unwrap_or(0.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| if total > 0.0 { w / total } else { 0.0 }).collect()
}

/// Samples a region index from the confidence softmax.
pub fn select_roi_on_prob(rois: &[RoiRegion], tau: f64, rng: &mut impl Rng) -> Result<usize, SearchError> {
    select_roi_masked(rois, &vec![true; rois.len()], tau, rng)
}

/// Like [`select_roi_on_prob`] but never returns a closed region.
pub fn select_roi_masked(rois: &[RoiRegion], open: &[bool], tau: f64, rng: &mut impl Rng) -> Result<usize, SearchError> {
    if rois.is_empty() || !open.iter().take(rois.len()).any(|&o| o) {
        return Err(SearchError::EmptyRoiList);
    }
    let probs = roi_probabilities(rois, open, tau);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last)
}

/// KL(prev ‖ cur) between unigram distributions with add-one smoothing over
/// the union vocabulary.
pub fn unigram_kl(prev: &str, cur: &str) -> f64 {
    let count = |text: &str| {
        let mut m: HashMap<String, f64> = HashMap::new();
        for t in tokenize(text) {
            *m.entry(t).or_default() += 1.0;
        }
        m
    };
    let (p, q) = (count(prev), count(cur));
    let mut vocab: Vec<&String> = p.keys().chain(q.keys()).collect();
    vocab.sort();
    vocab.dedup();
    if vocab.is_empty() {
        return 0.0;
    }
    let v = vocab.len() as f64;
    let np: f64 = p.values().sum::<f64>() + v;
    let nq: f64 = q.values().sum::<f64>() + v;
    vocab
        .iter()
        .map(|w| {
            let pw = (p.get(*w).copied().unwrap_or(0.0) + 1.0) / np;
            let qw = (q.get(*w).copied().unwrap_or(0.0) + 1.0) / nq;
            pw * (pw / qw).ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    /// Reward reached the early-stop score.
    FullScore,
    /// The answer barely differs from the previous step's.
    Converged,
}

/// Why the search should stop at `id`, if it should. The convergence branch
/// needs an embedder and a previous answer; embedder failures skip it.
pub fn early_stop_reason(
    tree: &SearchTree,
    id: NodeId,
    prev: Option<NodeId>,
    embedder: Option<&dyn Embedder>,
) -> Option<EarlyStop> {
    let node = tree.node(id).ok()?;
    if node.reward >= tree.config.early_stop_score {
        return Some(EarlyStop::FullScore);
    }
    let prev = tree.node(prev?).ok()?;
    if prev.parent_id.is_none() && prev.answer.is_empty() {
        return None;
    }
    if unigram_kl(&prev.answer, &node.answer) >= tree.config.kl_epsilon {
        return None;
    }
    let embedder = embedder?;
    let a = embed(embedder, EmbedInput::Text(&prev.answer)).ok()?;
    let b = embed(embedder, EmbedInput::Text(&node.answer)).ok()?;
    (cosine(&a, &b) > tree.config.cosine_tau).then_some(EarlyStop::Converged)
}

pub fn should_early_stop(tree: &SearchTree, id: NodeId, prev: Option<NodeId>, embedder: Option<&dyn Embedder>) -> bool {
    early_stop_reason(tree, id, prev, embedder).is_some()
}

/// Root-to-leaf path with the largest reward sum; ties go to the
/// lexicographically smallest id sequence. `final_answer` is left empty.
pub fn best_path(tree: &SearchTree) -> Result<PathResult, SearchError> {
    if !tree.nodes().iter().any(|n| n.is_scored()) {
        return Err(SearchError::NoEvaluatedNodes);
    }
    let mut best: Option<(f64, Vec<NodeId>)> = None;
    let mut stack = vec![(tree.root_id(), 0.0, vec![tree.root_id()])];
    while let Some((id, sum, path)) = stack.pop() {
        let node = &tree.nodes()[id];
        let sum = sum + f64::from(node.reward);
        if node.children.is_empty() {
            let better = match &best {
                None => true,
                Some((bs, bp)) => sum > *bs || (sum == *bs && path < *bp),
            };
            if better {
                best = Some((sum, path));
            }
            continue;
        }
        for &c in &node.children {
            let mut p = path.clone();
            p.push(c);
            stack.push((c, sum, p));
        }
    }
    let (total_reward, node_ids) = best.expect("tree has a root leaf");
    Ok(PathResult { node_ids, total_reward, final_answer: String::new() })
}
