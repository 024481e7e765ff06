//! Nested optimization: a generic K-level truncated-unrolling solver, the
//! KL-constrained domain-weight subproblem with an exact closed form, the
//! bilevel retriever/generator trainer, and the trilevel loop that adds
//! distributionally robust domain weights. Also owns the aggregate model
//! state and its on-disk format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::fusion::{
    diff_sample_loss, query_for_sample, select_items, DiffParams, FusionConfig, FusionError,
    GeneratorParams, PipelineCtx,
};
use crate::corpus::Corpus;
use crate::moe::{ExpertParams, GatingParams};
use crate::retrieval::RetrieverParams;
use crate::stream::Sample;

pub const MODEL_FORMAT: &str = "crag-model/1";

/// One level of a nested problem: an objective over the full variable
/// assignment and an optional feasible-set projection for this level's block.
pub struct Level {
    pub dim: usize,
    pub init: Vec<f64>,
    /// F_k evaluated on a tape at the full assignment (x_1..x_K).
    pub objective: Box<dyn for<'t> Fn(&'t Tape, &[Vec<Var<'t>>]) -> Var<'t>>,
    /// Idempotent projection onto this level's feasible set, applied in
    /// value space after each gradient step. None = unconstrained.
    pub projection: Option<Box<dyn Fn(&mut [f64])>>,
}

pub struct NestedProblem {
    pub levels: Vec<Level>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub outer_steps: usize,
    pub inner_steps: usize,
    /// Depth of the differentiable unroll used for hypergradients.
    pub unroll_depth: usize,
    /// Learning rate per level, outermost first.
    pub lr: Vec<f64>,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_steps: 30,
            inner_steps: 5,
            unroll_depth: 3,
            lr: vec![0.1, 0.1, 0.1],
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, levels: usize) -> Result<(), MultilevelError> {
        if self.outer_steps < 1 || self.inner_steps < 1 || self.unroll_depth < 1 {
            return Err(MultilevelError::InvalidConfig("step counts must be >= 1".into()));
        }
        if self.lr.len() < levels || self.lr.iter().take(levels).any(|l| *l <= 0.0) {
            return Err(MultilevelError::InvalidConfig(format!(
                "need {levels} positive learning rates"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub level: usize,
    pub objective: f64,
}

#[derive(Debug, Error)]
pub enum MultilevelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("optimization diverged: objective {0} exceeds 1e6")]
    Divergence(f64),
    #[error("fusion pipeline error: {0}")]
    Fusion(#[from] FusionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unsupported model format {0:?}")]
    UnsupportedFormat(String),
}

/// Builds the differentiable truncated unroll for levels `k..K`, given vars
/// for levels `< k`. Each level runs `unroll_depth` gradient steps on its own
/// objective, re-unrolling everything below at every step. Projections are
/// not applied inside the unroll: the problems solved here keep iterates in
/// the interior, where the projection is the identity.
fn unroll_lower<'t>(
    tape: &'t Tape,
    problem: &NestedProblem,
    cfg: &SolverConfig,
    upper: &[Vec<Var<'t>>],
    values: &[Vec<f64>],
) -> Vec<Vec<Var<'t>>> {
    let k = upper.len();
    if k == problem.levels.len() {
        return Vec::new();
    }
    let mut xk: Vec<Var<'t>> = tape.constants(&values[k]);
    for _ in 0..cfg.unroll_depth {
        let mut assign = upper.to_vec();
        assign.push(xk.clone());
        assign.extend(unroll_lower(tape, problem, cfg, &assign, values));
        let f = (problem.levels[k].objective)(tape, &assign);
        let grads = tape.grad_vars(f, &xk);
        for (x, g) in xk.iter_mut().zip(grads) {
            *x = *x - cfg.lr[k] * g;
        }
    }
    let mut assign = upper.to_vec();
    assign.push(xk.clone());
    let below = unroll_lower(tape, problem, cfg, &assign, values);
    let mut out = vec![xk];
    out.extend(below);
    out
}

/// Truncated-unrolling gradient of F_k with respect to x_k, holding levels
/// above fixed and differentiating through the unrolled descent of the
/// levels below.
pub fn level_gradient(
    problem: &NestedProblem,
    values: &[Vec<f64>],
    cfg: &SolverConfig,
    k: usize,
) -> (Vec<f64>, f64) {
    let tape = Tape::new();
    let mut assign: Vec<Vec<Var<'_>>> =
        values[..k].iter().map(|v| tape.constants(v)).collect();
    let xk = tape.vars(&values[k]);
    assign.push(xk.clone());
    assign.extend(unroll_lower(&tape, problem, cfg, &assign, values));
    let f = (problem.levels[k].objective)(&tape, &assign);
    let grads = tape.backward(f);
    (xk.iter().map(|v| grads.wrt(*v)).collect(), f.value())
}

/// Recursive truncated-unrolling descent. Level 0 takes `outer_steps`
/// projected-gradient steps; every deeper level takes `inner_steps` steps
/// inside each step of the level above it.
pub fn solve_nested(
    problem: &NestedProblem,
    cfg: &SolverConfig,
) -> Result<(Vec<Vec<f64>>, Vec<TraceStep>), MultilevelError> {
    let levels = problem.levels.len();
    if levels < 1 || levels > 3 {
        return Err(MultilevelError::InvalidConfig(format!(
            "K = {levels} outside supported range 1..=3"
        )));
    }
    cfg.validate(levels)?;
    let mut x: Vec<Vec<f64>> = problem.levels.iter().map(|l| l.init.clone()).collect();
    for (lvl, xk) in problem.levels.iter().zip(x.iter_mut()) {
        if let Some(p) = &lvl.projection {
            p(xk);
        }
    }
    let mut trace = Vec::new();
    let mut counter = 0usize;
    descend(problem, cfg, 0, &mut x, &mut trace, &mut counter)?;
    Ok((x, trace))
}

fn descend(
    problem: &NestedProblem,
    cfg: &SolverConfig,
    k: usize,
    x: &mut Vec<Vec<f64>>,
    trace: &mut Vec<TraceStep>,
    counter: &mut usize,
) -> Result<(), MultilevelError> {
    let steps = if k == 0 { cfg.outer_steps } else { cfg.inner_steps };
    for _ in 0..steps {
        if k + 1 < problem.levels.len() {
            descend(problem, cfg, k + 1, x, trace, counter)?;
        }
        let (grad, f) = level_gradient(problem, x, cfg, k);
        if !f.is_finite() || f > 1e6 {
            return Err(MultilevelError::Divergence(f));
        }
        for (xv, g) in x[k].iter_mut().zip(grad) {
            *xv -= cfg.lr[k] * g;
        }
        if let Some(p) = &problem.levels[k].projection {
            p(&mut x[k]);
        }
        trace.push(TraceStep { step: *counter, level: k, objective: f });
        *counter += 1;
    }
    Ok(())
}

/// Which direction the domain-weight subproblem optimizes. `WorstCase`
/// maximizes the weighted loss (robustness); `BestCase` minimizes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DroSense {
    WorstCase,
    BestCase,
}

/// Domain weights on the probability simplex inside a KL ball around the
/// uniform distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights {
    pub w: Vec<f64>,
    pub epsilon: f64,
    pub sense: DroSense,
}

impl DomainWeights {
    pub fn uniform(m: usize, epsilon: f64, sense: DroSense) -> Self {
        Self { w: vec![1.0 / m as f64; m], epsilon, sense }
    }
}

/// KL(w ‖ uniform over the support size of w).
pub fn kl_to_uniform(w: &[f64]) -> f64 {
    let m = w.len() as f64;
    w.iter().filter(|v| **v > 0.0).map(|v| v * (v * m).ln()).sum()
}

/// Exact solution of the linear objective Σ w_m·loss_m over the simplex
/// intersected with { KL(w‖uniform) ≤ ε }: the optimum has the exponential-
/// family form w_m ∝ exp(±loss_m / T), with the temperature T found by
/// bisection so the KL constraint is active (or the unconstrained vertex
/// when ε exceeds the KL of the T→0⁺ limit). Deterministic; ε = 0 returns
/// the exact uniform distribution.
pub fn solve_dro_weights(
    domain_losses: &[f64],
    _w0: &[f64],
    epsilon: f64,
    sense: DroSense,
) -> DomainWeights {
    let m = domain_losses.len();
    assert!(m >= 1 && epsilon >= 0.0);
    let sign = match sense {
        DroSense::WorstCase => 1.0,
        DroSense::BestCase => -1.0,
    };
    let uniform = DomainWeights::uniform(m, epsilon, sense);
    if epsilon == 0.0 || m == 1 {
        return uniform;
    }
    let scores: Vec<f64> = domain_losses.iter().map(|l| sign * l).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // T → 0⁺ limit: uniform over the argmax set.
    let arg: Vec<usize> = (0..m).filter(|&i| scores[i] == max).collect();
    if arg.len() == m {
        return uniform; // equal losses: every T gives uniform
    }
    let kl_max = (m as f64 / arg.len() as f64).ln();
    let weights_at = |t: f64| -> Vec<f64> {
        let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / t).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    };
    if epsilon >= kl_max {
        let mut w = vec![0.0; m];
        for &i in &arg {
            w[i] = 1.0 / arg.len() as f64;
        }
        return DomainWeights { w, epsilon, sense };
    }
    // KL(w(T) ‖ uniform) decreases monotonically in T; bisect to hit ε.
    let mut lo = 1e-12;
    let mut hi = 1.0;
    while kl_to_uniform(&weights_at(hi)) > epsilon {
        hi *= 2.0;
        if hi > 1e18 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kl_to_uniform(&weights_at(mid)) > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    DomainWeights { w: weights_at(0.5 * (lo + hi)), epsilon, sense }
}

/// Aggregate learnable state: retriever θ, generator φ, gate θ_g, experts
/// θ_e, and domain weights w, plus a monotone version tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub retriever: RetrieverParams,
    pub generator: GeneratorParams,
    pub gating: GatingParams,
    pub experts: ExpertParams,
    pub weights: DomainWeights,
    pub version: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u64,
}

impl ModelState {
    /// Versioned single-file format: a header line, then the state as one
    /// JSON line (matrices row-major decimal floats).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), MultilevelError> {
        let header =
            ModelHeader { format: MODEL_FORMAT.to_string(), version: self.version };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        serde_json::to_writer(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, MultilevelError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: ModelHeader = serde_json::from_str(line.trim())?;
        if header.format != MODEL_FORMAT {
            return Err(MultilevelError::UnsupportedFormat(header.format));
        }
        line.clear();
        r.read_line(&mut line)?;
        Ok(serde_json::from_str(line.trim())?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MultilevelError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, MultilevelError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Per-outer-step record of the RAG trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagTraceStep {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub domain_losses: Vec<f64>,
    pub w: Vec<f64>,
}

/// How the innermost level chooses domain weights each outer step.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightPolicy {
    /// Closed-form KL-constrained reweighting from current per-domain losses.
    Dro { epsilon: f64, sense: DroSense },
    /// Weights pinned to a fixed simplex point.
    Fixed(Vec<f64>),
}

/// Which components a reduced run is allowed to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    RetrieverOnly,
    RetrieverAndWeights,
    Full,
}

/// Freeze schedule produced by `reduce_problem`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverPlan {
    pub train_retriever: bool,
    pub train_generator: bool,
    pub train_weights: bool,
}

/// Timescale reduction: freezing slow components collapses the trilevel
/// loop into a bilevel or single-level problem.
pub fn reduce_problem(mode: ReduceMode) -> SolverPlan {
    match mode {
        ReduceMode::RetrieverOnly => SolverPlan {
            train_retriever: true,
            train_generator: false,
            train_weights: false,
        },
        ReduceMode::RetrieverAndWeights => SolverPlan {
            train_retriever: true,
            train_generator: false,
            train_weights: true,
        },
        ReduceMode::Full => SolverPlan {
            train_retriever: true,
            train_generator: true,
            train_weights: true,
        },
    }
}

/// Shared training core. Each outer step: (1) refresh domain weights per the
/// policy from current per-domain mean losses, (2) unroll `inner_steps`
/// generator descent steps on the weight-averaged training loss, (3) take one
/// retriever hypergradient step on the validation loss through the unroll.
/// Deterministic given inputs; a single code path guarantees that a DRO
/// policy with ε = 0 reproduces a fixed-uniform run bit for bit.
#[allow(clippy::too_many_arguments)]
fn run_weighted_bilevel(
    domains: &[Vec<Sample>],
    val: &[Sample],
    corpus: &Corpus,
    fusion_cfg: &FusionConfig,
    k: usize,
    state: &ModelState,
    cfg: &SolverConfig,
    tick: u64,
    policy: &WeightPolicy,
    plan: SolverPlan,
) -> Result<(RetrieverParams, GeneratorParams, Vec<f64>, Vec<RagTraceStep>), MultilevelError> {
    if domains.is_empty() || domains.iter().any(|d| d.is_empty()) || val.is_empty() {
        return Err(MultilevelError::InvalidConfig("empty training or validation set".into()));
    }
    cfg.validate(2)?;
    let m = domains.len();
    let mut retriever = state.retriever.clone();
    let mut generator = state.generator.clone();
    let mut w = match policy {
        WeightPolicy::Dro { epsilon, sense } => DomainWeights::uniform(m, *epsilon, *sense).w,
        WeightPolicy::Fixed(w) => w.clone(),
    };
    let mut trace = Vec::with_capacity(cfg.outer_steps);
    for step in 0..cfg.outer_steps {
        let ctx = PipelineCtx { corpus, retriever: &retriever, fusion: *fusion_cfg, k };

        // Innermost level: refresh w from current per-domain mean losses.
        let domain_losses: Vec<f64> = domains
            .iter()
            .map(|d| mean_f64_loss(d, &generator, &ctx, tick))
            .collect::<Result<_, _>>()?;
        if plan.train_weights {
            if let WeightPolicy::Dro { epsilon, sense } = policy {
                w = solve_dro_weights(&domain_losses, &w, *epsilon, *sense).w;
            }
        }

        // Middle + outer levels on one tape.
        let tape = Tape::new();
        let p = DiffParams::lift(&tape, &retriever, &generator, plan.train_retriever, true);
        let mut w1 = p.w1.clone();
        let mut w2 = p.w2.clone();
        let mut train_loss_val = f64::NAN;
        for _ in 0..cfg.inner_steps {
            let mut total = tape.constant(0.0);
            for (d, wm) in domains.iter().zip(&w) {
                let mut dl = tape.constant(0.0);
                for s in d {
                    let q = query_for_sample(&s.embedding, &s.domain, tick);
                    let items = select_items(&q, &ctx)?;
                    dl = dl + diff_sample_loss(
                        &tape, &p, &w1, &w2, &s.embedding, &s.target, &items, fusion_cfg,
                    );
                }
                total = total + *wm * (dl / d.len() as f64);
            }
            train_loss_val = total.value();
            if plan.train_generator {
                let mut phi: Vec<Var<'_>> = w1.clone();
                phi.extend_from_slice(&w2);
                let grads = tape.grad_vars(total, &phi);
                let mut it = grads.into_iter();
                for v in w1.iter_mut().chain(w2.iter_mut()) {
                    *v = *v - cfg.lr[1] * it.next().unwrap();
                }
            }
        }

        // Outer level: validation loss through the unrolled generator steps.
        let mut val_total = tape.constant(0.0);
        for s in val {
            let q = query_for_sample(&s.embedding, &s.domain, tick);
            let items = select_items(&q, &ctx)?;
            val_total = val_total
                + diff_sample_loss(&tape, &p, &w1, &w2, &s.embedding, &s.target, &items, fusion_cfg);
        }
        let val_loss = val_total / val.len() as f64;
        if !val_loss.value().is_finite() || val_loss.value() > 1e6 {
            return Err(MultilevelError::Divergence(val_loss.value()));
        }
        if plan.train_retriever {
            let grads = tape.backward(val_loss);
            retriever.alpha =
                (retriever.alpha - cfg.lr[0] * grads.wrt(p.alpha)).clamp(0.0, 1.0);
            for (slot, v) in retriever.projection.data.iter_mut().zip(&p.projection) {
                *slot -= cfg.lr[0] * grads.wrt(*v);
            }
        }
        if plan.train_generator {
            let n1 = generator.w1.data.len();
            let mut flat = generator.flatten();
            for (slot, v) in flat[..n1].iter_mut().zip(&w1) {
                *slot = v.value();
            }
            for (slot, v) in flat[n1..].iter_mut().zip(&w2) {
                *slot = v.value();
            }
            generator.unflatten_into(&flat);
        }
        trace.push(RagTraceStep {
            step,
            train_loss: train_loss_val,
            val_loss: val_loss.value(),
            domain_losses,
            w: w.clone(),
        });
    }
    Ok((retriever, generator, w, trace))
}

/// Plain f64 mean loss of a sample set under current parameters.
fn mean_f64_loss(
    samples: &[Sample],
    generator: &GeneratorParams,
    ctx: &PipelineCtx<'_>,
    tick: u64,
) -> Result<f64, MultilevelError> {
    let mut total = 0.0;
    for s in samples {
        let q = query_for_sample(&s.embedding, &s.domain, tick);
        let set = crate::retrieval::soft_retrieve(&q, ctx.k, ctx.corpus, ctx.retriever)
            .map_err(|e| MultilevelError::InvalidConfig(e.to_string()))?;
        let pred = crate::fusion::generate(&q, &set, ctx.corpus, generator, &ctx.fusion)?;
        total += crate::fusion::loss(&pred, &s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Bilevel retriever/generator training: generator descends the training
/// loss at the inner level, the retriever takes hypergradient steps on the
/// validation loss through the unrolled inner updates.
#[allow(clippy::too_many_arguments)]
pub fn solve_bilevel_rag(
    train: &[Sample],
    val: &[Sample],
    corpus: &Corpus,
    fusion_cfg: &FusionConfig,
    k: usize,
    state: &ModelState,
    cfg: &SolverConfig,
    tick: u64,
) -> Result<(RetrieverParams, GeneratorParams, Vec<RagTraceStep>), MultilevelError> {
    let domains = vec![train.to_vec()];
    let (theta, phi, _, trace) = run_weighted_bilevel(
        &domains,
        val,
        corpus,
        fusion_cfg,
        k,
        state,
        cfg,
        tick,
        &WeightPolicy::Fixed(vec![1.0]),
        reduce_problem(ReduceMode::Full),
    )?;
    Ok((theta, phi, trace))
}

/// One single-level retriever gradient step on the loss of a recent batch,
/// with generator and weights frozen — the reduced problem used by the
/// short-timescale update loop.
pub fn retriever_step(
    recent: &[Sample],
    corpus: &Corpus,
    fusion_cfg: &FusionConfig,
    k: usize,
    state: &ModelState,
    lr: f64,
    tick: u64,
) -> Result<RetrieverParams, MultilevelError> {
    let cfg = SolverConfig {
        outer_steps: 1,
        inner_steps: 1,
        unroll_depth: 1,
        lr: vec![lr, lr],
        ..Default::default()
    };
    let (theta, _, _, _) = run_weighted_bilevel(
        &[recent.to_vec()],
        recent,
        corpus,
        fusion_cfg,
        k,
        state,
        &cfg,
        tick,
        &WeightPolicy::Fixed(vec![1.0]),
        SolverPlan { train_retriever: true, train_generator: false, train_weights: false },
    )?;
    Ok(theta)
}

/// Trilevel training over M ≥ 2 domains: DRO weights innermost, generator in
/// the middle, retriever outermost.
#[allow(clippy::too_many_arguments)]
pub fn solve_trilevel(
    domains: &[Vec<Sample>],
    val: &[Sample],
    corpus: &Corpus,
    fusion_cfg: &FusionConfig,
    k: usize,
    state: &ModelState,
    cfg: &SolverConfig,
    tick: u64,
    policy: &WeightPolicy,
    plan: SolverPlan,
) -> Result<(RetrieverParams, GeneratorParams, Vec<f64>, Vec<RagTraceStep>), MultilevelError> {
    if domains.len() < 2 {
        return Err(MultilevelError::InvalidConfig("trilevel requires M >= 2 domains".into()));
    }
    run_weighted_bilevel(domains, val, corpus, fusion_cfg, k, state, cfg, tick, policy, plan)
}
