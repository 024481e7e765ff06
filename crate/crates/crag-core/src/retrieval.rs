//! Query encoding, task-aware composite scoring, hard top-K and
//! differentiable soft retrieval, and the task profile memory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, KnowledgeEntry};
use crate::linalg::{self, cosine, Matrix};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Task context steering retrieval-subspace selection and relevance scoring.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_id: String,
    /// Domain tag; empty means "no subspace restriction".
    pub domain: String,
    /// task-id -> emphasis in [0,1], consumed by the relevance estimator.
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub embedding: Vec<f64>,
    pub task: TaskDescriptor,
    pub tick: u64,
}

/// Learnable retriever parameters θ: similarity/relevance blend, query
/// projection, and soft-retrieval temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverParams {
    pub alpha: f64,
    pub projection: Matrix,
    pub temperature: f64,
    /// Optional uncertainty cutoff: entries with uncertainty above it are
    /// excluded from retrieval. Off by default.
    pub max_uncertainty: Option<f64>,
}

impl RetrieverParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            alpha: 1.0,
            projection: Matrix::identity(dim),
            temperature: 1.0,
            max_uncertainty: None,
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RetrievalError::BadParams("alpha must be in [0,1]"));
        }
        if self.temperature <= 0.0 {
            return Err(RetrievalError::BadParams("temperature must be > 0"));
        }
        if !self.projection.is_finite() {
            return Err(RetrievalError::BadParams("projection entries must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievedItem {
    pub id: u64,
    pub score: f64,
    pub soft_weight: f64,
}

/// Retrieval result; items sorted descending by score, soft weights sum to 1
/// when nonempty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievedSet {
    pub items: Vec<RetrievedItem>,
    pub k: usize,
}

impl RetrievedSet {
    pub fn ids(&self) -> Vec<u64> {
        self.items.iter().map(|i| i.id).collect()
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retriever params: {0}")]
    BadParams(&'static str),
    #[error("dimension mismatch: query dim {query} vs entry dim {entry}")]
    DimensionMismatch { query: usize, entry: usize },
    #[error("out-of-order tick {tick} for task {task} (last {last})")]
    OutOfOrderTick { task: String, tick: u64, last: u64 },
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic token feature-hashing encoder: lowercase, split on
/// non-alphanumerics, hash each token into `dim` buckets with a ±1 sign,
/// L2-normalize. Equal texts always yield equal embeddings.
pub fn encode(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 8, "encoder requires dim >= 8");
    let mut v = vec![0.0; dim];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        let h = fnv1a(token.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    linalg::normalize(&mut v);
    v
}

/// Task-aware composite score:
/// `alpha * cos(P q, e) + (1 - alpha) * rel(entry, task) * freshness(entry)`.
/// The entry's stored per-task relevance is modulated by its temporal decay;
/// an absent task id scores 0.
pub fn score(
    query: &Query,
    entry: &KnowledgeEntry,
    params: &RetrieverParams,
    corpus: &Corpus,
) -> Result<f64, RetrievalError> {
    if query.embedding.len() != entry.embedding.len() {
        return Err(RetrievalError::DimensionMismatch {
            query: query.embedding.len(),
            entry: entry.embedding.len(),
        });
    }
    let projected = params.projection.matvec(&query.embedding);
    let sim = cosine(&projected, &entry.embedding);
    let rel = entry.relevance.get(&query.task.task_id).copied().unwrap_or(0.0);
    let freshness = corpus.freshness_weight(entry, query.tick);
    Ok(params.alpha * sim + (1.0 - params.alpha) * rel * freshness)
}

fn eligible<'c>(query: &Query, corpus: &'c Corpus, params: &RetrieverParams) -> Vec<&'c KnowledgeEntry> {
    let pass_uncertainty = |e: &KnowledgeEntry| match params.max_uncertainty {
        Some(cap) => e.uncertainty <= cap,
        None => true,
    };
    // Retrieval subspace: hard domain filter with full-corpus fallback.
    if !query.task.domain.is_empty() {
        let subspace: Vec<&KnowledgeEntry> = corpus
            .entries()
            .filter(|e| e.domain == query.task.domain && pass_uncertainty(e))
            .collect();
        if !subspace.is_empty() {
            return subspace;
        }
    }
    corpus.entries().filter(|e| pass_uncertainty(e)).collect()
}

/// Score every eligible entry. Parallel over the corpus scan when the
/// `parallel` feature is enabled; order of results matches scan order either
/// way.
pub fn score_all(
    query: &Query,
    corpus: &Corpus,
    params: &RetrieverParams,
) -> Result<Vec<(u64, f64)>, RetrievalError> {
    let entries = eligible(query, corpus, params);
    #[cfg(feature = "parallel")]
    {
        entries
            .par_iter()
            .map(|e| score(query, e, params, corpus).map(|s| (e.id, s)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        score_all_seq_impl(query, &entries, params, corpus)
    }
}

/// Sequential scoring path; always compiled so the benches can compare it
/// against the parallel scan.
pub fn score_all_seq(
    query: &Query,
    corpus: &Corpus,
    params: &RetrieverParams,
) -> Result<Vec<(u64, f64)>, RetrievalError> {
    let entries = eligible(query, corpus, params);
    score_all_seq_impl(query, &entries, params, corpus)
}

fn score_all_seq_impl(
    query: &Query,
    entries: &[&KnowledgeEntry],
    params: &RetrieverParams,
    corpus: &Corpus,
) -> Result<Vec<(u64, f64)>, RetrievalError> {
    entries
        .iter()
        .map(|e| score(query, e, params, corpus).map(|s| (e.id, s)))
        .collect()
}

fn top_k_of(mut scored: Vec<(u64, f64)>, k: usize) -> Vec<(u64, f64)> {
    // Descending score, ties broken by lowest id.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Hard top-K over the task's retrieval subspace (falling back to the full
/// corpus when the subspace is empty). Soft weights are uniform placeholders;
/// use [`soft_retrieve`] for the differentiable relaxation.
pub fn retrieve_topk(
    query: &Query,
    k: usize,
    corpus: &Corpus,
    params: &RetrieverParams,
) -> Result<RetrievedSet, RetrievalError> {
    assert!(k >= 1, "k must be >= 1");
    params.validate()?;
    let top = top_k_of(score_all(query, corpus, params)?, k);
    let n = top.len();
    let items = top
        .into_iter()
        .map(|(id, score)| RetrievedItem { id, score, soft_weight: 1.0 / n as f64 })
        .collect();
    Ok(RetrievedSet { items, k })
}

/// Same item set as [`retrieve_topk`]; soft weights are a temperature-scaled
/// softmax over the selected scores (straight-through with respect to the
/// selection set).
pub fn soft_retrieve(
    query: &Query,
    k: usize,
    corpus: &Corpus,
    params: &RetrieverParams,
) -> Result<RetrievedSet, RetrievalError> {
    let mut set = retrieve_topk(query, k, corpus, params)?;
    let scaled: Vec<f64> = set.items.iter().map(|i| i.score / params.temperature).collect();
    let weights = linalg::softmax(&scaled);
    for (item, w) in set.items.iter_mut().zip(weights) {
        item.soft_weight = w;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub tick: u64,
    pub mean_score: f64,
    pub downstream_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct TaskProfile {
    history: Vec<ProfileRecord>,
    /// Running sum of query embeddings plus count, for the analogy map.
    embedding_sum: Vec<f64>,
    embedding_count: u64,
}

impl TaskProfile {
    fn mean_embedding(&self) -> Option<Vec<f64>> {
        if self.embedding_count == 0 {
            return None;
        }
        Some(self.embedding_sum.iter().map(|v| v / self.embedding_count as f64).collect())
    }
}

/// Dynamic task profile memory: per-task retrieval history plus an analogy
/// map from each task to its nearest historical task by mean query embedding.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TaskProfileMemory {
    profiles: BTreeMap<String, TaskProfile>,
    analogy: BTreeMap<String, String>,
}

impl TaskProfileMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn history(&self, task_id: &str) -> &[ProfileRecord] {
        self.profiles.get(task_id).map_or(&[], |p| &p.history)
    }

    pub fn analogy(&self, task_id: &str) -> Option<&str> {
        self.analogy.get(task_id).map(String::as_str)
    }

    /// Appends one retrieval record for a task. `mean_query_embedding` is the
    /// window's mean query embedding, feeding the analogy map. Ticks must be
    /// strictly increasing per task.
    pub fn update(
        &mut self,
        task: &TaskDescriptor,
        tick: u64,
        mean_score: f64,
        downstream_loss: f64,
        mean_query_embedding: &[f64],
    ) -> Result<(), RetrievalError> {
        let profile = self.profiles.entry(task.task_id.clone()).or_default();
        if let Some(last) = profile.history.last() {
            if tick <= last.tick {
                return Err(RetrievalError::OutOfOrderTick {
                    task: task.task_id.clone(),
                    tick,
                    last: last.tick,
                });
            }
        }
        profile.history.push(ProfileRecord { tick, mean_score, downstream_loss });
        if profile.embedding_sum.is_empty() {
            profile.embedding_sum = vec![0.0; mean_query_embedding.len()];
        }
        for (s, v) in profile.embedding_sum.iter_mut().zip(mean_query_embedding) {
            *s += v;
        }
        profile.embedding_count += 1;
        self.recompute_analogy();
        Ok(())
    }

    /// Nearest recorded task to an embedding; retrieval-by-analogy entry
    /// point for unseen tasks.
    pub fn nearest_task(&self, embedding: &[f64]) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (id, profile) in &self.profiles {
            let Some(mean) = profile.mean_embedding() else { continue };
            let c = cosine(embedding, &mean);
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((id, c));
            }
        }
        best.map(|(id, _)| id)
    }

    fn recompute_analogy(&mut self) {
        let means: Vec<(String, Vec<f64>)> = self
            .profiles
            .iter()
            .filter_map(|(id, p)| p.mean_embedding().map(|m| (id.clone(), m)))
            .collect();
        self.analogy.clear();
        for (id, mean) in &means {
            let mut best: Option<(&str, f64)> = None;
            for (other, other_mean) in &means {
                if other == id {
                    continue;
                }
                let c = cosine(mean, other_mean);
                if best.map_or(true, |(_, bc)| c > bc) {
                    best = Some((other, c));
                }
            }
            if let Some((other, _)) = best {
                self.analogy.insert(id.clone(), other.to_string());
            }
        }
    }
}
