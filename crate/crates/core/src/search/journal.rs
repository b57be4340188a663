//! Line-delimited JSON record of a search: a header, every backend call, and
//! every tree mutation in the order it happened. Replaying the mutation
//! events rebuilds the tree exactly, without any backend.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::policy::best_path;
use super::tree::{PathResult, SearchTree};
use crate::backends::{CallPurpose, CallRecord, CallRecorder};
use crate::rar::RarConfig;
use crate::types::{AgentNode, NodeId, Query, RoiRegion, SearchConfig};

pub const JOURNAL_SCHEMA: &str = "vragent-journal/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    Header { schema: String, query: Query, config: SearchConfig, rar: RarConfig },
    Call(CallRecord),
    Rois { rois: Vec<RoiRegion> },
    NodeAdded { node: AgentNode },
    Evaluated { node_id: NodeId, reward: u8, feedback: String, revision_feedback: String, evaluation_failed: bool },
    Backpropagated { node_id: NodeId },
    Pruned { node_id: NodeId },
    Converged { node_id: NodeId },
    Refined { node_id: NodeId, refined_answer: String },
    Result { path: PathResult },
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// Shared append-only event buffer.
#[derive(Debug, Clone, Default)]
pub struct Journal {
    events: Arc<Mutex<Vec<JournalEvent>>>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, event: JournalEvent) {
        self.events.lock().expect("journal lock").push(event);
    }

    pub fn events(&self) -> Vec<JournalEvent> {
        self.events.lock().expect("journal lock").clone()
    }

    pub fn recorder(&self) -> CallRecorder {
        let j = self.clone();
        CallRecorder::new(move |r| j.push(JournalEvent::Call(r)))
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.events())
    }

    pub fn write(&self, path: &Path) -> Result<(), JournalError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

pub fn to_jsonl(events: &[JournalEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("journal events serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_journal(text: &str) -> Result<Vec<JournalEvent>, JournalError> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(line).map_err(|e| JournalError::Corrupt { line: i + 1, message: e.to_string() })?;
        events.push(e);
    }
    Ok(events)
}

pub fn load_journal(path: &Path) -> Result<Vec<JournalEvent>, JournalError> {
    parse_journal(&fs::read_to_string(path)?)
}

/// Outcome of a replay: the rebuilt tree, the path recomputed from it and
/// the path the original run recorded.
#[derive(Debug, Clone)]
pub struct Replay {
    pub tree: SearchTree,
    pub recomputed: PathResult,
    pub recorded: PathResult,
}

impl Replay {
    pub fn matches(&self) -> bool {
        serde_json::to_string(&self.recomputed).ok() == serde_json::to_string(&self.recorded).ok()
    }
}

pub fn replay(events: &[JournalEvent]) -> Result<Replay, JournalError> {
    let corrupt = |line: usize, message: String| JournalError::Corrupt { line, message };
    let mut tree: Option<SearchTree> = None;
    let mut composed: Option<String> = None;
    let mut recorded = None;
    for (i, event) in events.iter().enumerate() {
        let line = i + 1;
        if let JournalEvent::Header { schema, query, config, .. } = event {
            if schema != JOURNAL_SCHEMA {
                return Err(corrupt(line, format!("unknown schema {schema}")));
            }
            tree = Some(SearchTree::new(query.clone(), Vec::new(), config.clone()));
            continue;
        }
        let t = tree.as_mut().ok_or_else(|| corrupt(line, "event before header".into()))?;
        let applied = match event {
            JournalEvent::Header { .. } => unreachable!(),
            JournalEvent::Call(rec) => {
                if rec.purpose == Some(CallPurpose::Compose) {
                    composed = rec.reply.as_str().map(|s| s.trim().to_string());
                }
                Ok(())
            }
            JournalEvent::Rois { rois } => {
                t.rois = rois.clone();
                Ok(())
            }
            JournalEvent::NodeAdded { node } => t.insert_child(node.clone()).map(|_| ()),
            JournalEvent::Evaluated { node_id, reward, feedback, revision_feedback, evaluation_failed } => {
                t.set_evaluation(*node_id, *reward, feedback.clone(), revision_feedback.clone(), *evaluation_failed)
            }
            JournalEvent::Backpropagated { node_id } => t.backpropagate(*node_id),
            JournalEvent::Pruned { node_id } => t.mark_pruned(*node_id),
            JournalEvent::Converged { node_id } => t.mark_converged(*node_id),
            JournalEvent::Refined { node_id, refined_answer } => t.set_refined(*node_id, refined_answer.clone()),
            JournalEvent::Result { path } => {
                recorded = Some(path.clone());
                Ok(())
            }
        };
        applied.map_err(|e| corrupt(line, e.to_string()))?;
    }
    let tree = tree.ok_or_else(|| corrupt(0, "no header".into()))?;
    let recorded = recorded.ok_or_else(|| corrupt(events.len(), "truncated: no result event".into()))?;
    let mut recomputed = best_path(&tree).map_err(|e| corrupt(events.len(), e.to_string()))?;
    recomputed.final_answer = composed.unwrap_or_default();
    Ok(Replay { tree, recomputed, recorded })
}
