//! Retrieval-conditioned fusion and generation: attention-pooled retrieved
//! embeddings concatenated with the input representation, a one-hidden-layer
//! tanh generator, and continual fine-tuning with an L2 anchor to the
//! previous parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Var};
use crate::corpus::Corpus;
use crate::linalg::{self, Matrix};
use crate::retrieval::{soft_retrieve, Query, RetrievedSet, RetrieverParams, TaskDescriptor};
use crate::stream::StreamBatch;

/// Generator parameters φ: y = W2 · tanh(W1 · z), z = concat(h, pooled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl GeneratorParams {
    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Self { w1: Matrix::zeros(hidden, input_dim), w2: Matrix::zeros(output_dim, hidden) }
    }

    /// Small deterministic initialization.
    pub fn seeded(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim, hidden, output_dim);
        for v in p.w1.data.iter_mut().chain(p.w2.data.iter_mut()) {
            *v = rng.gen_range(-0.3..0.3);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows
    }

    /// Flattened view (w1 then w2), used by the optimizers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w1.data.clone();
        v.extend_from_slice(&self.w2.data);
        v
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let n1 = self.w1.data.len();
        self.w1.data.copy_from_slice(&flat[..n1]);
        self.w2.data.copy_from_slice(&flat[n1..]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub attn_temperature: f64,
    /// Items with confidence (1 - uncertainty) below this are dropped from
    /// pooling; 0.0 disables the gate.
    pub confidence_gate: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { attn_temperature: 1.0, confidence_gate: 0.0 }
    }
}

/// Retrieval-conditioned input: concat(h, attention-pooled retrieval vector).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    pub values: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("retrieved entry id {0} not present in corpus")]
    UnresolvedEntryId(u64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no samples pass the retrieval confidence gate")]
    EmptyBatchAfterSelection,
}

/// Attention-pooled fusion. Weights are a softmax of item scores over the
/// items passing the confidence gate; when nothing passes, the pooled half is
/// exactly zero so the output dimension never changes.
pub fn fuse(
    h: &[f64],
    retrieved: &RetrievedSet,
    corpus: &Corpus,
    cfg: &FusionConfig,
) -> Result<ContextVector, FusionError> {
    let dim = corpus.config().dim;
    let mut gated: Vec<(&[f64], f64)> = Vec::new();
    for item in &retrieved.items {
        let entry = corpus.get(item.id).ok_or(FusionError::UnresolvedEntryId(item.id))?;
        if 1.0 - entry.uncertainty >= cfg.confidence_gate {
            gated.push((&entry.embedding, item.score));
        }
    }
    let mut pooled = vec![0.0; dim];
    if !gated.is_empty() {
        let scaled: Vec<f64> = gated.iter().map(|(_, s)| s / cfg.attn_temperature).collect();
        let weights = linalg::softmax(&scaled);
        for ((emb, _), w) in gated.iter().zip(weights) {
            for (p, e) in pooled.iter_mut().zip(*emb) {
                *p += w * e;
            }
        }
    }
    let mut values = h.to_vec();
    values.extend(pooled);
    Ok(ContextVector { values })
}

/// Toy generator forward pass: y = W2 · tanh(W1 · fuse(h(x), retrieved)).
/// The input representation h(x) is the query embedding.
pub fn generate(
    query: &Query,
    retrieved: &RetrievedSet,
    corpus: &Corpus,
    params: &GeneratorParams,
    cfg: &FusionConfig,
) -> Result<Vec<f64>, FusionError> {
    let ctx = fuse(&query.embedding, retrieved, corpus, cfg)?;
    if ctx.values.len() != params.input_dim() {
        return Err(FusionError::DimensionMismatch(format!(
            "context dim {} vs generator input dim {}",
            ctx.values.len(),
            params.input_dim()
        )));
    }
    let hidden: Vec<f64> = params.w1.matvec(&ctx.values).iter().map(|v| v.tanh()).collect();
    Ok(params.w2.matvec(&hidden))
}

/// Squared L2 error.
pub fn loss(prediction: &[f64], target: &[f64]) -> Result<f64, FusionError> {
    if prediction.len() != target.len() {
        return Err(FusionError::DimensionMismatch(format!(
            "prediction dim {} vs target dim {}",
            prediction.len(),
            target.len()
        )));
    }
    Ok(prediction.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Everything the retrieval-conditioned forward pass needs besides the
/// learnable parameters.
#[derive(Debug, Clone)]
pub struct PipelineCtx<'a> {
    pub corpus: &'a Corpus,
    pub retriever: &'a RetrieverParams,
    pub fusion: FusionConfig,
    pub k: usize,
}

/// Per-item constants of a selected retrieval set, precomputed for the
/// differentiable forward pass. The selection itself is straight-through:
/// gradients flow through scores and weights, not through set membership.
#[derive(Debug, Clone)]
pub(crate) struct SelectedItem {
    pub embedding: Vec<f64>,
    pub relevance: f64,
    pub freshness: f64,
    pub gated_in: bool,
}

pub(crate) fn select_items(
    query: &Query,
    ctx: &PipelineCtx<'_>,
) -> Result<Vec<SelectedItem>, FusionError> {
    let set = soft_retrieve(query, ctx.k, ctx.corpus, ctx.retriever)
        .map_err(|e| FusionError::DimensionMismatch(e.to_string()))?;
    set.items
        .iter()
        .map(|item| {
            let entry = ctx.corpus.get(item.id).ok_or(FusionError::UnresolvedEntryId(item.id))?;
            Ok(SelectedItem {
                embedding: entry.embedding.clone(),
                relevance: entry.relevance.get(&query.task.task_id).copied().unwrap_or(0.0),
                freshness: ctx.corpus.freshness_weight(entry, query.tick),
                gated_in: 1.0 - entry.uncertainty >= ctx.fusion.confidence_gate,
            })
        })
        .collect()
}

/// Mean retrieval confidence of a sample's retrieved set (1 when empty, so
/// retrieval-free samples are never filtered out).
pub(crate) fn mean_confidence(query: &Query, ctx: &PipelineCtx<'_>) -> Result<f64, FusionError> {
    let set = soft_retrieve(query, ctx.k, ctx.corpus, ctx.retriever)
        .map_err(|e| FusionError::DimensionMismatch(e.to_string()))?;
    if set.items.is_empty() {
        return Ok(1.0);
    }
    let mut acc = 0.0;
    for item in &set.items {
        let entry = ctx.corpus.get(item.id).ok_or(FusionError::UnresolvedEntryId(item.id))?;
        acc += 1.0 - entry.uncertainty;
    }
    Ok(acc / set.items.len() as f64)
}

/// Learnable parameters lifted onto a tape. Retriever and generator halves
/// can independently be vars (trained) or constants (frozen).
pub(crate) struct DiffParams<'t> {
    pub alpha: Var<'t>,
    pub projection: Vec<Var<'t>>,
    pub dim: usize,
    pub w1: Vec<Var<'t>>,
    pub w2: Vec<Var<'t>>,
    pub hidden: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl<'t> DiffParams<'t> {
    pub fn lift(
        tape: &'t Tape,
        retriever: &RetrieverParams,
        generator: &GeneratorParams,
        train_retriever: bool,
        train_generator: bool,
    ) -> Self {
        let lift = |train: bool, vals: &[f64]| -> Vec<Var<'t>> {
            if train {
                tape.vars(vals)
            } else {
                tape.constants(vals)
            }
        };
        Self {
            alpha: if train_retriever { tape.var(retriever.alpha) } else { tape.constant(retriever.alpha) },
            projection: lift(train_retriever, &retriever.projection.data),
            dim: retriever.projection.rows,
            w1: lift(train_generator, &generator.w1.data),
            w2: lift(train_generator, &generator.w2.data),
            hidden: generator.hidden(),
            input_dim: generator.input_dim(),
            output_dim: generator.output_dim(),
        }
    }

    pub fn generator_vars(&self) -> Vec<Var<'t>> {
        let mut v = self.w1.clone();
        v.extend_from_slice(&self.w2);
        v
    }
}

/// Differentiable per-sample squared-error loss through scoring, fusion, and
/// generation. Mirrors the f64 pipeline exactly (same formulas, same
/// straight-through top-K set).
pub(crate) fn diff_sample_loss<'t>(
    tape: &'t Tape,
    p: &DiffParams<'t>,
    w1: &[Var<'t>],
    w2: &[Var<'t>],
    query_embedding: &[f64],
    target: &[f64],
    items: &[SelectedItem],
    cfg: &FusionConfig,
) -> Var<'t> {
    let q = tape.constants(query_embedding);
    // Projected query and cosine against each (unit norm) item embedding.
    let pq = autodiff::vmatvec(tape, &p.projection, p.dim, p.dim, &q);
    let pq_norm = autodiff::vdot(tape, &pq, &pq).sqrt();
    let one = tape.constant(1.0);
    let scores: Vec<Var<'t>> = items
        .iter()
        .map(|item| {
            let e = tape.constants(&item.embedding);
            let cos = autodiff::vdot(tape, &pq, &e) / pq_norm;
            p.alpha * cos + (one - p.alpha) * (item.relevance * item.freshness)
        })
        .collect();
    // Attention pooling over gated items.
    let gated: Vec<usize> =
        (0..items.len()).filter(|&i| items[i].gated_in).collect();
    let mut pooled = vec![tape.constant(0.0); p.dim];
    if !gated.is_empty() {
        let scaled: Vec<Var<'t>> =
            gated.iter().map(|&i| scores[i] / cfg.attn_temperature).collect();
        let weights = autodiff::vsoftmax(tape, &scaled);
        for (gi, w) in gated.iter().zip(weights) {
            for (pv, ev) in pooled.iter_mut().zip(&items[*gi].embedding) {
                *pv = *pv + w * *ev;
            }
        }
    }
    let mut z = q;
    z.extend(pooled);
    debug_assert_eq!(z.len(), p.input_dim);
    let hidden = autodiff::vtanh(&autodiff::vmatvec(tape, w1, p.hidden, p.input_dim, &z));
    let prediction = autodiff::vmatvec(tape, w2, p.output_dim, p.hidden, &hidden);
    let y = tape.constants(target);
    autodiff::vsq_dist(tape, &prediction, &y)
}

pub(crate) fn query_for_sample(embedding: &[f64], domain: &str, tick: u64) -> Query {
    Query {
        text: String::new(),
        embedding: embedding.to_vec(),
        task: TaskDescriptor { task_id: domain.to_string(), domain: String::new(), weights: Default::default() },
        tick,
    }
}

/// One continual fine-tuning step: gradient descent on
/// `mean sample loss + λ_reg · ‖φ − φ_prev‖²` over the samples whose
/// retrieval mean confidence passes the gate (dynamic sample selection).
pub fn finetune_step(
    batch: &StreamBatch,
    params: &GeneratorParams,
    anchor: &GeneratorParams,
    lambda_reg: f64,
    lr: f64,
    ctx: &PipelineCtx<'_>,
) -> Result<GeneratorParams, FusionError> {
    assert!(lambda_reg >= 0.0 && lr > 0.0);
    let mut selected = Vec::new();
    for sample in &batch.samples {
        let query = query_for_sample(&sample.embedding, &sample.domain, batch.tick);
        if mean_confidence(&query, ctx)? >= ctx.fusion.confidence_gate {
            selected.push((query, sample));
        }
    }
    if selected.is_empty() {
        return Err(FusionError::EmptyBatchAfterSelection);
    }
    let tape = Tape::new();
    let p = DiffParams::lift(&tape, ctx.retriever, params, false, true);
    let mut total = tape.constant(0.0);
    for (query, sample) in &selected {
        let items = select_items(query, ctx)?;
        total = total
            + diff_sample_loss(
                &tape,
                &p,
                &p.w1,
                &p.w2,
                &sample.embedding,
                &sample.target,
                &items,
                &ctx.fusion,
            );
    }
    let n = selected.len() as f64;
    let mut objective = total / n;
    // L2 anchor to the previous parameters.
    let anchor_flat = anchor.flatten();
    let phi_vars = p.generator_vars();
    for (v, a) in phi_vars.iter().zip(&anchor_flat) {
        let d = *v - *a;
        objective = objective + lambda_reg * (d * d);
    }
    let grads = tape.backward(objective);
    let mut flat = params.flatten();
    for (f, v) in flat.iter_mut().zip(&phi_vars) {
        *f -= lr * grads.wrt(*v);
    }
    let mut out = params.clone();
    out.unflatten_into(&flat);
    Ok(out)
}
