//! Tree-search reasoning agent for visual question answering: a teacher
//! proposes guidance, a student answers, an assessor scores, and a Monte-Carlo
//! tree search keeps the best chain of steps. Around it sit the visual token
//! edit math, retrieval-augmented reflection, trajectory export for policy
//! optimisation, and answer metrics.

pub mod backends;
pub mod eval;
pub mod rar;
pub mod search;
pub mod text;
pub mod trajectory;
pub mod types;
pub mod vte;

pub use search::{run_search, PathResult, SearchRun, SearchTree};
pub use types::*;
