//! Trajectories of (observation, guidance, reward) steps taken from a search
//! path, their JSON-lines file format, and the clipped policy-ratio objective
//! used to check downstream training code.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search::{PathResult, SearchTree};
use crate::types::MAX_SCORE;

pub const TRAJECTORY_SCHEMA: &str = "vragent-traj/1";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("path contains no evaluated step")]
    NoEvaluatedNodes,
    #[error("path node {0} is not in the tree")]
    UnknownNode(usize),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("trajectory io: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    /// The step's observation serialized as JSON.
    pub observation_digest: String,
    /// The teacher guidance taken at this step.
    pub action: String,
    pub reward: u8,
    pub advantage: Option<f64>,
    pub old_logprob: Option<f64>,
    pub new_logprob: Option<f64>,
}

impl TrajectoryStep {
    fn check(&self) -> Result<(), String> {
        if !(1..=MAX_SCORE).contains(&self.reward) {
            return Err(format!("reward {} outside 1..=5", self.reward));
        }
        for (name, v) in [("advantage", self.advantage), ("old_logprob", self.old_logprob), ("new_logprob", self.new_logprob)] {
            if v.is_some_and(|x| !x.is_finite()) {
                return Err(format!("{name} is not finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub steps: Vec<TrajectoryStep>,
    #[serde(default)]
    pub final_answer: String,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| f64::from(s.reward)).collect()
    }

    /// Fills every step's advantage as reward minus `baseline`.
    pub fn assign_advantages(&mut self, baseline: f64) {
        let advantages = advantage_from_baseline(&self.rewards(), baseline);
        for (s, a) in self.steps.iter_mut().zip(advantages) {
            s.advantage = Some(a);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub reward_baseline: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { clip_epsilon: 0.2, reward_baseline: 3.75 }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err("clip_epsilon must lie in (0, 1)".into());
        }
        if !self.reward_baseline.is_finite() {
            return Err("reward_baseline must be finite".into());
        }
        Ok(())
    }
}

/// One step per path node. An unscored root is skipped; any other unscored
/// node is an error.
pub fn collect(tree: &SearchTree, path: &PathResult) -> Result<Trajectory, TrajectoryError> {
    let mut steps = Vec::with_capacity(path.node_ids.len());
    for &id in &path.node_ids {
        let n = tree.node(id).map_err(|_| TrajectoryError::UnknownNode(id))?;
        if !n.is_scored() {
            if n.parent_id.is_none() {
                continue;
            }
            return Err(TrajectoryError::NoEvaluatedNodes);
        }
        steps.push(TrajectoryStep {
            observation_digest: serde_json::to_string(&n.observation).expect("observation serializes"),
            action: n.guidance.clone(),
            reward: n.reward,
            advantage: None,
            old_logprob: None,
            new_logprob: None,
        });
    }
    if steps.is_empty() {
        return Err(TrajectoryError::NoEvaluatedNodes);
    }
    Ok(Trajectory { query_id: Some(tree.query.id.clone()), steps, final_answer: path.final_answer.clone() })
}

pub fn advantage_from_baseline(rewards: &[f64], baseline: f64) -> Vec<f64> {
    rewards.iter().map(|r| r - baseline).collect()
}

/// `exp(new - old)`.
pub fn ppo_ratio(new_logprob: f64, old_logprob: f64) -> Result<f64, TrajectoryError> {
    if !new_logprob.is_finite() || !old_logprob.is_finite() {
        return Err(TrajectoryError::NonFiniteInput);
    }
    Ok((new_logprob - old_logprob).exp())
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn ppo_clipped_term(ratio: f64, advantage: f64, cfg: &PpoConfig) -> f64 {
    let eps = cfg.clip_epsilon;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
}

pub fn to_jsonl(trajs: &[Trajectory]) -> String {
    let mut out = serde_json::to_string(&Header { schema: TRAJECTORY_SCHEMA.into() }).unwrap();
    out.push('\n');
    for t in trajs {
        out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

pub fn export_trajectories(trajs: &[Trajectory], path: &Path) -> Result<(), TrajectoryError> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(trajs).as_bytes())?;
    Ok(())
}

/// Parses a trajectory file. A file with no lines is an empty list; otherwise
/// the first line must be the schema header.
pub fn parse_trajectories(text: &str) -> Result<Vec<Trajectory>, TrajectoryError> {
    let violation = |line: usize, message: String| TrajectoryError::SchemaViolation { line, message };
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let h: Header = serde_json::from_str(line).map_err(|e| violation(n, format!("bad header: {e}")))?;
            if h.schema != TRAJECTORY_SCHEMA {
                return Err(violation(n, format!("unsupported schema {}", h.schema)));
            }
            header_seen = true;
            continue;
        }
        let t: Trajectory = serde_json::from_str(line).map_err(|e| violation(n, e.to_string()))?;
        for s in &t.steps {
            s.check().map_err(|m| violation(n, m))?;
        }
        out.push(t);
    }
    Ok(out)
}

pub fn import_trajectories(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    parse_trajectories(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::backends::scripted::ScriptedTree;
    use crate::backends::Backends;
    use crate::search::{best_path, SearchRun};
    use crate::types::{AgentNode, Query, QuestionKind, SearchConfig};

    fn tree() -> SearchTree {
        SearchTree::new(Query::new("q", "what?", "", QuestionKind::Open).unwrap(), Vec::new(), SearchConfig::default())
    }

    fn add(t: &mut SearchTree, parent: usize, reward: u8) -> usize {
        let mut n = AgentNode::child_of(t.node(parent).unwrap(), t.len());
        n.guidance = format!("g{}", t.len());
        let id = t.insert_child(n).unwrap();
        if reward > 0 {
            t.set_evaluation(id, reward, String::new(), String::new(), false).unwrap();
            t.backpropagate(id).unwrap();
        }
        id
    }

    #[test]
    fn collect_path_rewards() {
        let mut t = tree();
        let a = add(&mut t, 0, 3);
        let b = add(&mut t, a, 4);
        add(&mut t, b, 5);
        let traj = collect(&t, &best_path(&t).unwrap()).unwrap();
        assert_eq!(traj.steps.iter().map(|s| s.reward).collect::<Vec<_>>(), vec![3, 4, 5]);
        assert_eq!(traj.steps[1].action, "g2");
    }

    #[test]
    fn collect_root_only_and_unscored() {
        let mut t = tree();
        t.set_evaluation(0, 4, String::new(), String::new(), false).unwrap();
        let p = PathResult { node_ids: vec![0], total_reward: 4.0, final_answer: String::new() };
        assert_eq!(collect(&t, &p).unwrap().steps.len(), 1);

        let mut t = tree();
        let a = add(&mut t, 0, 0);
        let p = PathResult { node_ids: vec![0, a], total_reward: 0.0, final_answer: String::new() };
        assert!(matches!(collect(&t, &p), Err(TrajectoryError::NoEvaluatedNodes)));
    }

    #[test]
    fn collect_from_a_search() {
        let out = SearchRun::new(SearchConfig { max_branch: 2, max_depth: 2, ..SearchConfig::default() })
            .run(&Query::new("q", "what?", "", QuestionKind::Open).unwrap(), &Backends::single(Arc::new(ScriptedTree::random(4, 2, 2, 4))))
            .unwrap();
        let traj = collect(&out.tree, &out.path).unwrap();
        assert_eq!(traj.steps.len(), out.path.node_ids.len() - 1);
        let sum: f64 = traj.rewards().iter().sum();
        assert_eq!(sum, out.path.total_reward);
    }

    #[test]
    fn advantages() {
        assert_eq!(advantage_from_baseline(&[3.75], 3.75), vec![0.0]);
        assert_eq!(advantage_from_baseline(&[5.0, 3.0], 3.75), vec![1.25, -0.75]);
        assert_eq!(advantage_from_baseline(&[1.0], 3.75), vec![-2.75]);
    }

    #[test]
    fn ratios() {
        assert_eq!(ppo_ratio(-1.3, -1.3).unwrap(), 1.0);
        assert!((ppo_ratio(-1.0 + 2f64.ln(), -1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((ppo_ratio(0.5 - 4f64.ln(), 0.5).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(ppo_ratio(f64::NAN, 0.0), Err(TrajectoryError::NonFiniteInput)));
        assert!(matches!(ppo_ratio(0.0, f64::INFINITY), Err(TrajectoryError::NonFiniteInput)));
    }

    #[test]
    fn clipped_terms() {
        let cfg = PpoConfig::default();
        assert!((ppo_clipped_term(1.2, 1.0, &cfg) - 1.2).abs() < 1e-12);
        assert!((ppo_clipped_term(2.0, 1.0, &cfg) - 1.2).abs() < 1e-12);
        assert!((ppo_clipped_term(0.5, -1.0, &cfg) - -0.8).abs() < 1e-12);
    }

    fn sample() -> Vec<Trajectory> {
        let step = |r: u8| TrajectoryStep {
            observation_digest: "{}".into(),
            action: format!("look {r}"),
            reward: r,
            advantage: Some(f64::from(r) - 3.75),
            old_logprob: Some(-1.5),
            new_logprob: None,
        };
        vec![
            Trajectory { query_id: Some("a".into()), steps: vec![step(3), step(5)], final_answer: "x".into() },
            Trajectory { query_id: None, steps: vec![step(1)], final_answer: String::new() },
        ]
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        export_trajectories(&sample(), &p).unwrap();
        assert_eq!(import_trajectories(&p).unwrap(), sample());
        assert!(fs::read_to_string(&p).unwrap().starts_with("{\"schema\":\"vragent-traj/1\"}"));
    }

    #[test]
    fn file_errors() {
        let text = to_jsonl(&sample());
        let cut = &text[..text.len() - 10];
        assert!(matches!(parse_trajectories(cut), Err(TrajectoryError::SchemaViolation { line: 3, .. })));
        assert!(parse_trajectories("").unwrap().is_empty());
        assert!(matches!(parse_trajectories("{\"schema\":\"other/2\"}\n"), Err(TrajectoryError::SchemaViolation { line: 1, .. })));
        let bad = text.replace("\"reward\":3", "\"reward\":9");
        assert!(matches!(parse_trajectories(&bad), Err(TrajectoryError::SchemaViolation { line: 2, .. })));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(import_trajectories(&dir.path().join("missing")), Err(TrajectoryError::IoFailure(_))));
    }

    fn arb_step() -> impl Strategy<Value = TrajectoryStep> {
        (
            ".{0,40}",
            ".{0,40}",
            1u8..=5,
            proptest::option::of(-10.0f64..10.0),
            proptest::option::of(-20.0f64..0.0),
            proptest::option::of(-20.0f64..0.0),
        )
            .prop_map(|(o, a, r, adv, old, new)| TrajectoryStep {
                observation_digest: o,
                action: a,
                reward: r,
                advantage: adv,
                old_logprob: old,
                new_logprob: new,
            })
    }

    proptest! {
        #[test]
        fn clipped_term_bounded_by_unclipped(r in 0.0f64..5.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
            let cfg = PpoConfig { clip_epsilon: eps, ..PpoConfig::default() };
            let term = ppo_clipped_term(r, a, &cfg);
            prop_assert!(term <= r * a + 1e-12);
            if (1.0 - eps..=1.0 + eps).contains(&r) {
                prop_assert!((term - r * a).abs() < 1e-12);
            }
        }

        #[test]
        fn clipped_term_plateaus_for_positive_advantage(r1 in 0.0f64..4.0, dr in 0.0f64..2.0, a in 0.001f64..5.0) {
            let cfg = PpoConfig::default();
            let r2 = r1 + dr;
            let (t1, t2) = (ppo_clipped_term(r1, a, &cfg), ppo_clipped_term(r2, a, &cfg));
            prop_assert!(t1 <= t2 + 1e-12);
            if r1 >= 1.2 {
                prop_assert!((t1 - 1.2 * a).abs() < 1e-9 && (t2 - 1.2 * a).abs() < 1e-9);
            }
        }

        #[test]
        fn advantage_shift_equivariant(rs in proptest::collection::vec(1.0f64..5.0, 1..10), c in -3.0f64..3.0, b in 0.0f64..5.0) {
            let base = advantage_from_baseline(&rs, b);
            let shifted: Vec<f64> = rs.iter().map(|r| r + c).collect();
            for (x, y) in base.iter().zip(advantage_from_baseline(&shifted, b)) {
                prop_assert!((y - (x + c)).abs() < 1e-12);
            }
        }

        #[test]
        fn random_round_trip(steps in proptest::collection::vec(proptest::collection::vec(arb_step(), 1..4), 0..4)) {
            let trajs: Vec<Trajectory> = steps
                .into_iter()
                .enumerate()
                .map(|(i, s)| Trajectory { query_id: Some(i.to_string()), steps: s, final_answer: format!("ans {i}") })
                .collect();
            prop_assert_eq!(parse_trajectories(&to_jsonl(&trajs)).unwrap(), trajs);
        }
    }
}
