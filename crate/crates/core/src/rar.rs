//! Retrieval-augmented reflection: exact cosine top-K retrieval, relevance
//! filtering, reranking and the student rewrite.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::prompt::{render_rewrite_prompt, RewriteInputs};
use crate::backends::{
    embed, BackendError, CallContext, CallPurpose, ChatModel, EmbedInput, Embedder, LexicalRelevance,
    RelevanceScorer,
};
use crate::text::l2_norm;
use crate::types::RoiRegion;

#[derive(Debug, Error)]
pub enum RarError {
    #[error("item {id} has dimension {got}, index dimension is {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("duplicate knowledge id {0}")]
    DuplicateId(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("top_k must be at least 1")]
    ZeroK,
    #[error("no candidates to score")]
    NoCandidates,
    #[error("candidate {0} has no relevance score")]
    MissingScores(String),
    #[error("knowledge item {0} has no embedding and no embedder is configured")]
    MissingEmbedding(String),
    #[error("knowledge base line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("knowledge base io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_rank: Option<usize>,
}

impl KnowledgeItem {
    pub fn new(id: impl Into<String>, text: impl Into<String>, embedding: Vec<f64>) -> Self {
        KnowledgeItem {
            id: id.into(),
            text: text.into(),
            source: String::new(),
            embedding,
            retrieval_score: None,
            relevance_score: None,
            rerank_rank: None,
        }
    }
}

/// Flat exact-search index under cosine similarity.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dimension: usize,
    items: Vec<KnowledgeItem>,
    norms: Vec<f64>,
}

pub fn index_build(items: Vec<KnowledgeItem>) -> Result<VectorIndex, RarError> {
    let dimension = items.first().map(|i| i.embedding.len()).unwrap_or(0);
    let mut seen = HashSet::new();
    for item in &items {
        if item.embedding.len() != dimension {
            return Err(RarError::DimensionMismatch {
                id: item.id.clone(),
                expected: dimension,
                got: item.embedding.len(),
            });
        }
        if !seen.insert(item.id.as_str()) {
            return Err(RarError::DuplicateId(item.id.clone()));
        }
    }
    let norms = items.iter().map(|i| l2_norm(&i.embedding)).collect();
    Ok(VectorIndex { dimension, items, norms })
}

impl VectorIndex {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[KnowledgeItem] {
        &self.items
    }
}

/// The `k` items most cosine-similar to `query`, best first; equal scores are
/// ordered by id.
pub fn retrieve_topk(index: &VectorIndex, query: &[f64], k: usize) -> Result<Vec<KnowledgeItem>, RarError> {
    if index.is_empty() {
        return Err(RarError::EmptyIndex);
    }
    if k == 0 {
        return Err(RarError::ZeroK);
    }
    if query.len() != index.dimension {
        return Err(RarError::DimensionMismatch { id: "<query>".into(), expected: index.dimension, got: query.len() });
    }
    let qn = l2_norm(query);
    let mut scored: Vec<(f64, usize)> = index
        .items
        .iter()
        .zip(&index.norms)
        .enumerate()
        .map(|(i, (item, &n))| {
            let dot: f64 = item.embedding.iter().zip(query).map(|(a, b)| a * b).sum();
            let score = if n == 0.0 || qn == 0.0 { 0.0 } else { dot / (n * qn) };
            (score, i)
        })
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.total_cmp(&a.0).then_with(|| index.items[a.1].id.cmp(&index.items[b.1].id))
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored
        .into_iter()
        .map(|(score, i)| {
            let mut item = index.items[i].clone();
            item.retrieval_score = Some(score);
            item
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RarConfig {
    pub top_k: usize,
    pub relevance_threshold: f64,
    pub filter_enabled: bool,
    pub rerank_enabled: bool,
    /// Average an image embedding into the retrieval query.
    pub image_embedding: bool,
}

impl Default for RarConfig {
    fn default() -> Self {
        RarConfig { top_k: 5, relevance_threshold: 0.5, filter_enabled: true, rerank_enabled: true, image_embedding: false }
    }
}

impl RarConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_k < 1 {
            return Err("top_k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.relevance_threshold) {
            return Err("relevance_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn strategy(&self) -> RetrievalStrategy {
        match (self.filter_enabled, self.rerank_enabled) {
            (false, false) => RetrievalStrategy::FixedTopK,
            (false, true) => RetrievalStrategy::RerankOnly,
            (true, false) => RetrievalStrategy::DynamicTopK,
            (true, true) => RetrievalStrategy::AdaptiveRetrieval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalStrategy {
    FixedTopK,
    RerankOnly,
    DynamicTopK,
    AdaptiveRetrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieve,
    Score,
    Filter,
    Rerank,
}

impl RetrievalStrategy {
    pub fn stages(self) -> &'static [Stage] {
        match self {
            RetrievalStrategy::FixedTopK => &[Stage::Retrieve],
            RetrievalStrategy::RerankOnly => &[Stage::Retrieve, Stage::Score, Stage::Rerank],
            RetrievalStrategy::DynamicTopK => &[Stage::Retrieve, Stage::Score, Stage::Filter],
            RetrievalStrategy::AdaptiveRetrieval => &[Stage::Retrieve, Stage::Score, Stage::Filter, Stage::Rerank],
        }
    }
}

/// Scores every candidate, then (when filtering) drops those under the
/// threshold. If everything would be dropped the single best candidate
/// survives so the rewrite always has context.
pub fn score_relevance(
    query: &str,
    mut candidates: Vec<KnowledgeItem>,
    scorer: &dyn RelevanceScorer,
    cfg: &RarConfig,
) -> Result<Vec<KnowledgeItem>, RarError> {
    if candidates.is_empty() {
        return Err(RarError::NoCandidates);
    }
    for c in &mut candidates {
        let s = scorer.score(query, &c.text)?;
        c.relevance_score = Some(s.clamp(0.0, 1.0));
    }
    if !cfg.filter_enabled {
        return Ok(candidates);
    }
    let best = candidates
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.relevance_score.unwrap().total_cmp(&b.relevance_score.unwrap()).then_with(|| ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .unwrap();
    let kept: Vec<KnowledgeItem> = candidates
        .iter()
        .filter(|c| c.relevance_score.unwrap() >= cfg.relevance_threshold)
        .cloned()
        .collect();
    if kept.is_empty() {
        Ok(vec![candidates.swap_remove(best)])
    } else {
        Ok(kept)
    }
}

/// Orders by relevance (then retrieval score, then id) when reranking is on,
/// keeps the incoming order otherwise, and numbers the result from 1.
pub fn rerank(mut candidates: Vec<KnowledgeItem>, cfg: &RarConfig) -> Result<Vec<KnowledgeItem>, RarError> {
    if cfg.rerank_enabled {
        if let Some(c) = candidates.iter().find(|c| c.relevance_score.is_none()) {
            return Err(RarError::MissingScores(c.id.clone()));
        }
        candidates.sort_by(|a, b| {
            b.relevance_score
                .unwrap()
                .total_cmp(&a.relevance_score.unwrap())
                .then_with(|| {
                    let ra = a.retrieval_score.unwrap_or(f64::NEG_INFINITY);
                    let rb = b.retrieval_score.unwrap_or(f64::NEG_INFINITY);
                    rb.total_cmp(&ra)
                })
                .then_with(|| a.id.cmp(&b.id))
        });
    }
    for (i, c) in candidates.iter_mut().enumerate() {
        c.rerank_rank = Some(i + 1);
    }
    Ok(candidates)
}

/// Every intermediate set of one retrieval, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTrace {
    pub strategy: RetrievalStrategy,
    pub candidates: Vec<KnowledgeItem>,
    pub relevant: Vec<KnowledgeItem>,
    pub knowledge: Vec<KnowledgeItem>,
}

/// Runs the configured stages on an already-embedded query.
pub fn run_pipeline(
    index: &VectorIndex,
    query_vec: &[f64],
    query_text: &str,
    scorer: Option<&dyn RelevanceScorer>,
    cfg: &RarConfig,
) -> Result<RetrievalTrace, RarError> {
    let strategy = cfg.strategy();
    let candidates = retrieve_topk(index, query_vec, cfg.top_k)?;
    let needs_scores = strategy.stages().contains(&Stage::Score);
    let relevant = if needs_scores {
        let fallback = LexicalRelevance;
        let scorer: &dyn RelevanceScorer = match scorer {
            Some(s) => s,
            None => {
                log::warn!("no relevance scorer configured; using lexical overlap");
                &fallback
            }
        };
        score_relevance(query_text, candidates.clone(), scorer, cfg)?
    } else {
        candidates.clone()
    };
    let knowledge = rerank(relevant.clone(), cfg)?;
    Ok(RetrievalTrace { strategy, candidates, relevant, knowledge })
}

/// What the retriever sees of one reasoning step.
#[derive(Debug, Clone, Copy)]
pub struct StepQuery<'a> {
    pub question: &'a str,
    pub guidance: &'a str,
    pub answer: &'a str,
    pub image_ref: Option<&'a str>,
}

impl StepQuery<'_> {
    pub fn text(&self) -> String {
        format!("{}\n{}\n{}", self.question, self.guidance, self.answer)
    }
}

/// Embeds the step (text, optionally averaged with the image) and retrieves.
pub fn retrieve_for_step(
    index: &VectorIndex,
    embedder: &dyn Embedder,
    scorer: Option<&dyn RelevanceScorer>,
    step: &StepQuery<'_>,
    cfg: &RarConfig,
) -> Result<RetrievalTrace, RarError> {
    let text = step.text();
    let mut q = embed(embedder, EmbedInput::Text(&text))?;
    if let (true, Some(image)) = (cfg.image_embedding, step.image_ref) {
        let v = embed(embedder, EmbedInput::Image(image))?;
        for (a, b) in q.iter_mut().zip(v) {
            *a = (*a + b) / 2.0;
        }
    }
    run_pipeline(index, &q, &text, scorer, cfg)
}

/// One student call rewriting an answer with feedback and retrieved passages.
#[allow(clippy::too_many_arguments)]
pub fn reflect_rewrite(
    student: &dyn ChatModel,
    ctx: &CallContext<'_>,
    roi: &RoiRegion,
    guidance: &str,
    answer: &str,
    feedback: &str,
    knowledge: &[KnowledgeItem],
) -> Result<String, BackendError> {
    let passages: Vec<String> = knowledge.iter().map(|k| k.text.clone()).collect();
    let prompt = render_rewrite_prompt(&RewriteInputs {
        question: ctx.question,
        roi,
        guidance,
        answer,
        feedback,
        knowledge: &passages,
    });
    Ok(student.complete(&ctx.request(CallPurpose::Rewrite, prompt))?.trim().to_string())
}

#[derive(Serialize, Deserialize)]
struct CachedEmbedding {
    id: String,
    embedding: Vec<f64>,
}

pub fn sidecar_path(kb: &Path) -> PathBuf {
    let mut name = kb.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".embeddings.jsonl");
    kb.with_file_name(name)
}

/// Loads a JSON-lines knowledge base `{id, text, source, embedding?}`.
/// Missing embeddings come from the sidecar cache when present, otherwise
/// from `embedder`, and newly computed ones are written back to the sidecar.
pub fn load_knowledge_base(path: &Path, embedder: Option<&dyn Embedder>) -> Result<VectorIndex, RarError> {
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: KnowledgeItem =
            serde_json::from_str(line).map_err(|e| RarError::Schema { line: i + 1, message: e.to_string() })?;
        items.push(item);
    }
    let sidecar = sidecar_path(path);
    let mut cache: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    if let Ok(cached) = fs::read_to_string(&sidecar) {
        for line in cached.lines().filter(|l| !l.trim().is_empty()) {
            if let Ok(c) = serde_json::from_str::<CachedEmbedding>(line) {
                cache.insert(c.id, c.embedding);
            }
        }
    }
    let mut computed = Vec::new();
    for item in items.iter_mut().filter(|i| i.embedding.is_empty()) {
        if let Some(v) = cache.get(&item.id).filter(|v| embedder.is_none_or(|e| v.len() == e.dimension())) {
            item.embedding = v.clone();
            continue;
        }
        let e = embedder.ok_or_else(|| RarError::MissingEmbedding(item.id.clone()))?;
        item.embedding = embed(e, EmbedInput::Text(&item.text))?;
        computed.push(CachedEmbedding { id: item.id.clone(), embedding: item.embedding.clone() });
    }
    if !computed.is_empty() {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&sidecar)?;
        for c in &computed {
            writeln!(f, "{}", serde_json::to_string(c).expect("embedding serializes"))?;
        }
    }
    index_build(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, MockEntry, MockResponse, MockScript};
    use crate::backends::{CallKind, HashEmbedder};

    fn item(id: &str, v: Vec<f64>) -> KnowledgeItem {
        KnowledgeItem::new(id, format!("passage {id}"), v)
    }

    fn scored(id: &str, retrieval: f64, relevance: Option<f64>) -> KnowledgeItem {
        let mut k = item(id, vec![1.0]);
        k.retrieval_score = Some(retrieval);
        k.relevance_score = relevance;
        k
    }

    struct Fixed(Vec<f64>);
    impl RelevanceScorer for Fixed {
        fn score(&self, _q: &str, passage: &str) -> Result<f64, BackendError> {
            let idx: usize = passage.trim_start_matches("passage ").parse().unwrap();
            Ok(self.0[idx])
        }
    }

    #[test]
    fn build_checks_dims_and_ids() {
        let idx = index_build(vec![item("a", vec![1.0; 4]), item("b", vec![0.0; 4]), item("c", vec![2.0; 4])]).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(matches!(index_build(vec![item("a", vec![1.0; 4]), item("b", vec![1.0; 3])]), Err(RarError::DimensionMismatch { .. })));
        assert!(matches!(index_build(vec![item("a", vec![1.0]), item("a", vec![2.0])]), Err(RarError::DuplicateId(_))));
    }

    #[test]
    fn self_similarity_first() {
        let idx = index_build(vec![item("a", vec![1.0, 0.0]), item("b", vec![0.0, 1.0]), item("c", vec![0.6, 0.8])]).unwrap();
        let top = retrieve_topk(&idx, &[0.0, 1.0], 2).unwrap();
        assert_eq!(top[0].id, "b");
        assert!((top[0].retrieval_score.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(top[1].id, "c");
    }

    #[test]
    fn orthogonal_ties_sort_by_id() {
        let idx = index_build(vec![item("z", vec![0.0, 1.0]), item("m", vec![0.0, 2.0]), item("a", vec![0.0, 3.0])]).unwrap();
        let top = retrieve_topk(&idx, &[1.0, 0.0], 3).unwrap();
        assert_eq!(top.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), vec!["a", "m", "z"]);
        assert!(top.iter().all(|i| i.retrieval_score == Some(0.0)));
    }

    #[test]
    fn empty_index_and_zero_k() {
        let idx = index_build(vec![]).unwrap();
        assert!(matches!(retrieve_topk(&idx, &[], 1), Err(RarError::EmptyIndex)));
        let idx = index_build(vec![item("a", vec![1.0])]).unwrap();
        assert!(matches!(retrieve_topk(&idx, &[1.0], 0), Err(RarError::ZeroK)));
    }

    #[test]
    fn threshold_filter() {
        let cfg = RarConfig { relevance_threshold: 0.5, ..RarConfig::default() };
        let cands = vec![item("0", vec![1.0]), item("1", vec![1.0])];
        let out = score_relevance("q", cands.clone(), &Fixed(vec![0.9, 0.3]), &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "0");

        let off = RarConfig { filter_enabled: false, ..cfg };
        let out = score_relevance("q", cands.clone(), &Fixed(vec![0.9, 0.3]), &off).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].relevance_score, Some(0.3));

        let out = score_relevance("q", cands, &Fixed(vec![0.2, 0.4]), &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "1");
    }

    #[test]
    fn scripted_relevance_scores() {
        let mock = MockBackend::new(MockScript::new(vec![
            MockEntry::new(CallKind::Relevance, "", MockResponse::Score(0.9)),
            MockEntry::new(CallKind::Relevance, "", MockResponse::Score(0.3)),
        ]));
        let out = score_relevance("q", vec![item("0", vec![1.0]), item("1", vec![1.0])], &mock, &RarConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn rerank_rules() {
        let cfg = RarConfig::default();
        let out = rerank(vec![scored("A", 0.9, Some(0.3)), scored("B", 0.8, Some(0.9))], &cfg).unwrap();
        assert_eq!(out.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), vec!["B", "A"]);
        assert_eq!(out[0].rerank_rank, Some(1));

        let off = RarConfig { rerank_enabled: false, ..cfg };
        let out = rerank(vec![scored("A", 0.9, Some(0.3)), scored("B", 0.8, Some(0.9))], &off).unwrap();
        assert_eq!(out.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), vec!["A", "B"]);

        let out = rerank(vec![scored("A", 0.5, Some(0.7)), scored("B", 0.8, Some(0.7))], &cfg).unwrap();
        assert_eq!(out[0].id, "B");

        assert!(matches!(rerank(vec![scored("A", 0.5, None)], &cfg), Err(RarError::MissingScores(_))));
    }

    #[test]
    fn strategies_have_distinct_stage_lists() {
        let mut seen = HashSet::new();
        for filter in [false, true] {
            for rr in [false, true] {
                let cfg = RarConfig { filter_enabled: filter, rerank_enabled: rr, ..RarConfig::default() };
                assert!(seen.insert(cfg.strategy().stages()));
            }
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn rewrite_prompt_and_reply() {
        let mock = MockBackend::new(MockScript::new(vec![MockEntry::text(
            CallKind::Student,
            "no external knowledge",
            "corrected: effusion present",
        )]));
        let student = mock.chat(CallKind::Student);
        let ctx = CallContext { question: "q", image_ref: None, temperature: 0.7, max_tokens: 64 };
        let out = reflect_rewrite(student.as_ref(), &ctx, &RoiRegion::whole_image(), "g", "a", "f", &[]).unwrap();
        assert_eq!(out, "corrected: effusion present");
    }

    #[test]
    fn knowledge_base_embeds_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let kb = dir.path().join("kb.jsonl");
        fs::write(
            &kb,
            "{\"id\": \"k1\", \"text\": \"pleural effusion blunts the costophrenic angle\", \"source\": \"notes\"}\n\
             {\"id\": \"k2\", \"text\": \"cardiomegaly enlarges the cardiac silhouette\", \"source\": \"notes\", \"embedding\": [1,0,0,0,0,0,0,0]}\n",
        )
        .unwrap();
        let e = HashEmbedder::new(8);
        let idx = load_knowledge_base(&kb, Some(&e)).unwrap();
        assert_eq!(idx.len(), 2);
        assert!(sidecar_path(&kb).exists());
        // Second load needs no embedder: the sidecar supplies k1.
        let again = load_knowledge_base(&kb, None).unwrap();
        assert_eq!(again.items()[0].embedding, idx.items()[0].embedding);
    }

    #[test]
    fn knowledge_base_schema_error_has_line() {
        let dir = tempfile::tempdir().unwrap();
        let kb = dir.path().join("kb.jsonl");
        fs::write(&kb, "{\"id\": \"k1\", \"text\": \"x\", \"embedding\": [1]}\n{\"id\": 3}\n").unwrap();
        assert!(matches!(load_knowledge_base(&kb, None), Err(RarError::Schema { line: 2, .. })));
    }
}
