//! Multi-timescale orchestration: per tick the scheduler draws a stream
//! batch, evaluates retrieval quality, and fires the knowledge-base,
//! retriever, and model-adaptation loops at their configured periods.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::fusion::{self, query_for_sample, FusionConfig, FusionError, PipelineCtx};
use crate::metrics::{
    self, MetricSelector, MetricWindow, MetricsError, RankedResult,
};
use crate::multilevel::{self, ModelState, MultilevelError};
use crate::retrieval::{retrieve_topk, RetrievalError};
use crate::stream::{estimate_divergence, StreamBatch, StreamConfig, StreamSim};

/// Which maintenance loop an action belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    Retriever,
    Kb,
    Model,
}

/// Periods (in ticks) of the three loops; `None` disables a loop entirely.
/// `ordering` resolves same-tick ties and must name each loop exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimescaleConfig {
    pub f_retriever: Option<u64>,
    pub f_kb: Option<u64>,
    pub f_model: Option<u64>,
    pub ordering: [LoopKind; 3],
    pub total_ticks: u64,
    pub window_size: u64,
}

impl Default for TimescaleConfig {
    fn default() -> Self {
        Self {
            f_retriever: Some(1),
            f_kb: Some(5),
            f_model: Some(20),
            ordering: [LoopKind::Kb, LoopKind::Retriever, LoopKind::Model],
            total_ticks: 40,
            window_size: 10,
        }
    }
}

impl TimescaleConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        for f in [self.f_retriever, self.f_kb, self.f_model].into_iter().flatten() {
            if f < 1 {
                return Err(SchedulerError::InvalidConfig("periods must be >= 1".into()));
            }
        }
        let mut seen = [false; 3];
        for l in self.ordering {
            seen[l as usize] = true;
        }
        if seen.contains(&false) {
            return Err(SchedulerError::InvalidConfig(
                "ordering must be a permutation of the three loops".into(),
            ));
        }
        if self.window_size < 1 || self.total_ticks < self.window_size {
            return Err(SchedulerError::InvalidConfig(
                "need total_ticks >= window_size >= 1".into(),
            ));
        }
        Ok(())
    }

    fn period(&self, l: LoopKind) -> Option<u64> {
        match l {
            LoopKind::Retriever => self.f_retriever,
            LoopKind::Kb => self.f_kb,
            LoopKind::Model => self.f_model,
        }
    }
}

/// Knobs for the per-loop update steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Retrieval depth used both for evaluation rankings and training.
    pub eval_k: usize,
    pub lr_retriever: f64,
    pub lr_model: f64,
    /// Forgetting-control strength of the model adaptation step.
    pub lambda_reg: f64,
    /// Replay buffer capacity (most recent samples) for model adaptation.
    pub replay_capacity: usize,
    pub fusion: FusionConfig,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            eval_k: 3,
            lr_retriever: 0.05,
            lr_model: 0.05,
            lambda_reg: 0.0,
            replay_capacity: 32,
            fusion: FusionConfig::default(),
        }
    }
}

/// Per-tick record of what happened and how retrieval is doing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub actions: Vec<LoopKind>,
    /// Metrics of the window completed at this tick, if one just closed.
    pub window: Option<MetricWindow>,
    /// KL estimate of the current batch against the nominal (t = 0) batch.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ticks: Vec<TickReport>,
    pub windows: Vec<MetricWindow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub retention_delta: f64,
    pub degradation_delta: f64,
    pub stability_delta: f64,
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("runs have different window counts: {0} vs {1}")]
    WindowMismatch(usize, usize),
    #[error("tick {tick} aborted: {source}")]
    Aborted {
        tick: u64,
        #[source]
        source: Box<SchedulerError>,
    },
    #[error(transparent)]
    Multilevel(#[from] MultilevelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Drives a full simulated run. Per tick: draw the batch, record ranking
/// results against the planted ground truth, then fire each due loop in the
/// configured tie order — knowledge-base planting + pruning, a single
/// retriever gradient step on the current batch, and a model fine-tune step
/// over the replay buffer. Initial planting always happens once at setup so
/// a disabled KB loop still evaluates against a populated corpus.
/// Deterministic given (configs, seed).
pub fn run(
    stream_cfg: &StreamConfig,
    corpus: &mut Corpus,
    state: &mut ModelState,
    ts: &TimescaleConfig,
    cfg: &SchedulerConfig,
    seed: u64,
) -> Result<RunReport, SchedulerError> {
    ts.validate()?;
    let mut stream_cfg = stream_cfg.clone();
    stream_cfg.seed = seed;
    let mut sim = StreamSim::new(stream_cfg);
    sim.plant_knowledge(corpus, 0);

    let nominal = sim.next_batch(0);
    let mut replay: Vec<crate::stream::Sample> = Vec::new();
    let mut query_counter = 0u64;
    let mut window_results: Vec<RankedResult> = Vec::new();
    let mut windows: Vec<MetricWindow> = Vec::new();
    let mut ticks: Vec<TickReport> = Vec::new();

    for t in 0..ts.total_ticks {
        match run_tick(
            &mut sim,
            corpus,
            state,
            ts,
            cfg,
            t,
            &nominal,
            &mut replay,
            &mut query_counter,
            &mut window_results,
            &mut windows,
        ) {
            Ok(report) => ticks.push(report),
            Err(source) => {
                return Err(SchedulerError::Aborted { tick: t, source: Box::new(source) })
            }
        }
    }
    Ok(RunReport { ticks, windows })
}

#[allow(clippy::too_many_arguments)]
fn run_tick(
    sim: &mut StreamSim,
    corpus: &mut Corpus,
    state: &mut ModelState,
    ts: &TimescaleConfig,
    cfg: &SchedulerConfig,
    t: u64,
    nominal: &StreamBatch,
    replay: &mut Vec<crate::stream::Sample>,
    query_counter: &mut u64,
    window_results: &mut Vec<RankedResult>,
    windows: &mut Vec<MetricWindow>,
) -> Result<TickReport, SchedulerError> {
    let batch = sim.next_batch(t);
    let divergence = estimate_divergence(&batch, nominal);

    // Evaluate retrieval quality against the planted ground truth. The
    // evaluation query carries the task id (for relevance scoring) but no
    // domain restriction, so rankings compete across the whole corpus.
    for s in &batch.samples {
        let q = query_for_sample(&s.embedding, &s.domain, t);
        let set = retrieve_topk(&q, cfg.eval_k, corpus, &state.retriever)?;
        let ranked: Vec<u64> = set.items.iter().map(|i| i.id).collect();
        window_results.push(RankedResult::binary(
            *query_counter,
            ranked,
            s.relevant_ids.iter().copied(),
        ));
        *query_counter += 1;
    }

    // Replay buffer keeps the most recent samples.
    replay.extend(batch.samples.iter().cloned());
    if replay.len() > cfg.replay_capacity {
        let excess = replay.len() - cfg.replay_capacity;
        replay.drain(..excess);
    }

    let mut actions = Vec::new();
    for l in ts.ordering {
        let due = matches!(ts.period(l), Some(f) if t % f == 0);
        if !due {
            continue;
        }
        actions.push(l);
        match l {
            LoopKind::Kb => {
                sim.plant_knowledge(corpus, t);
                corpus.prune(t);
            }
            LoopKind::Retriever => {
                state.retriever = multilevel::retriever_step(
                    &batch.samples,
                    corpus,
                    &cfg.fusion,
                    cfg.eval_k,
                    state,
                    cfg.lr_retriever,
                    t,
                )?;
                state.version += 1;
            }
            LoopKind::Model => {
                let ctx = PipelineCtx {
                    corpus,
                    retriever: &state.retriever,
                    fusion: cfg.fusion,
                    k: cfg.eval_k,
                };
                let replay_batch =
                    StreamBatch { tick: t, samples: replay.clone() };
                state.generator = fusion::finetune_step(
                    &replay_batch,
                    &state.generator,
                    &state.generator.clone(),
                    cfg.lambda_reg,
                    cfg.lr_model,
                    &ctx,
                )?;
                state.version += 1;
            }
        }
    }

    // Close the metric window on its last tick.
    let mut window = None;
    if (t + 1) % ts.window_size == 0 && !window_results.is_empty() {
        let results = std::mem::take(window_results);
        let w = MetricWindow {
            window: windows.len(),
            topk_acc: metrics::topk_accuracy(&results, cfg.eval_k)?,
            mrr: metrics::mrr(&results)?,
            ndcg: metrics::ndcg(&results, cfg.eval_k)?,
            n_queries: results.len(),
        };
        windows.push(w.clone());
        window = Some(w);
    }
    Ok(TickReport { tick: t, actions, window, divergence })
}

/// Per-metric deltas (a − b) of the drift summary statistics.
pub fn compare_runs(
    a: &RunReport,
    b: &RunReport,
    selector: MetricSelector,
) -> Result<RunComparison, SchedulerError> {
    if a.windows.len() != b.windows.len() {
        return Err(SchedulerError::WindowMismatch(a.windows.len(), b.windows.len()));
    }
    let sa = metrics::drift_summary(&a.windows, selector)?;
    let sb = metrics::drift_summary(&b.windows, selector)?;
    Ok(RunComparison {
        retention_delta: sa.retention - sb.retention,
        degradation_delta: sa.degradation - sb.degradation,
        stability_delta: sa.stability - sb.stability,
    })
}
