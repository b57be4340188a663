//! A chat model that plays teacher, student and assessor over a fixed reward
//! table indexed by tree position.
//!
//! Each guidance names its position as `step:<path>` where `<path>` is the
//! dotted list of child indices from the root (`"0"`, `"0.2"`, ...). The
//! teacher derives the next path from the prompt: the last ancestor step is
//! the parent and every sibling already listed takes one index. The assessor
//! looks the path up in the table. This makes the outcome of every possible
//! expansion known in advance, so searches can be checked against exhaustive
//! enumeration.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::parse::AssessorVerdict;
use super::prompt::SIBLING_GUIDANCE_HEADER;
use super::{BackendError, CallPurpose, ChatModel, ChatRequest};

pub const COMPOSED_ANSWER: &str = "composed final answer";

fn step_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"step:([0-9]+(?:\.[0-9]+)*)").unwrap())
}

fn last_step(text: &str) -> Option<String> {
    step_re().captures_iter(text).last().map(|c| c[1].to_string())
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let from = text.find(start).map(|i| i + start.len()).unwrap_or(0);
    let rest = &text[from..];
    let to = rest.find(end).unwrap_or(rest.len());
    &rest[..to]
}

/// Parent path of a dotted path; `None` for a depth-1 path.
pub fn parent_path(path: &str) -> Option<&str> {
    path.rfind('.').map(|i| &path[..i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTree {
    /// Score for each path. Paths missing from the table score 1.
    pub rewards: BTreeMap<String, u8>,
    /// Answer overrides; by default the answer is `finding for step:<path>`.
    #[serde(default)]
    pub answers: BTreeMap<String, String>,
}

impl ScriptedTree {
    pub fn new(rewards: BTreeMap<String, u8>) -> Self {
        ScriptedTree { rewards, answers: BTreeMap::new() }
    }

    /// Every path of a complete `branch`-ary tree down to `depth`.
    pub fn all_paths(branch: usize, depth: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut frontier = vec![String::new()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for parent in &frontier {
                for k in 0..branch {
                    let p = if parent.is_empty() { k.to_string() } else { format!("{parent}.{k}") };
                    out.push(p.clone());
                    next.push(p);
                }
            }
            frontier = next;
        }
        out
    }

    /// Uniform random scores in `1..=max_score` over a complete tree.
    pub fn random(seed: u64, branch: usize, depth: usize, max_score: u8) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards = Self::all_paths(branch, depth)
            .into_iter()
            .map(|p| (p, rng.random_range(1..=max_score)))
            .collect();
        Self::new(rewards)
    }

    pub fn reward(&self, path: &str) -> u8 {
        self.rewards.get(path).copied().unwrap_or(1)
    }

    pub fn guidance_for(path: &str) -> String {
        format!("examine step:{path}")
    }

    pub fn answer_for(&self, path: &str) -> String {
        self.answers.get(path).cloned().unwrap_or_else(|| format!("finding for step:{path}"))
    }

    fn teach(&self, prompt: &str) -> String {
        let previous = between(prompt, "Previous Guidance:", "Student’s Answer:");
        let (ancestors, siblings) = match previous.find(SIBLING_GUIDANCE_HEADER) {
            Some(i) => (&previous[..i], &previous[i..]),
            None => (previous, ""),
        };
        let index = step_re().find_iter(siblings).count();
        let path = match last_step(ancestors) {
            Some(parent) => format!("{parent}.{index}"),
            None => index.to_string(),
        };
        format!("</Guidance> {} </Guidance>", Self::guidance_for(&path))
    }

    fn assess(&self, prompt: &str) -> String {
        let guidance = between(prompt, "<guidance>", "</guidance>");
        let path = last_step(guidance).unwrap_or_default();
        AssessorVerdict::new(self.reward(&path), format!("teacher note on step:{path}"), "be more specific")
            .to_reply()
    }
}

impl ChatModel for ScriptedTree {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let text = request.text();
        Ok(match request.purpose {
            CallPurpose::Guide => self.teach(&text),
            CallPurpose::Answer => {
                let guidance = between(&text, "Teacher's guidance:", "Follow the guidance");
                self.answer_for(&last_step(guidance).unwrap_or_default())
            }
            CallPurpose::Assess => self.assess(&text),
            CallPurpose::Rewrite => "refined finding".to_string(),
            CallPurpose::Compose => COMPOSED_ANSWER.to_string(),
            CallPurpose::Entities => String::new(),
        })
    }
}
