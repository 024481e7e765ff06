//! Toy mixture-of-experts: a linear gating network routing to linear
//! experts, trained as a bilevel problem — experts descend the gate-weighted
//! task loss at the inner level, the gate takes hypergradient steps through
//! the unrolled inner updates at the outer level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Var};
use crate::linalg::{self, Matrix};

/// Gating parameters θ_g: logits = Wg · x, sparsified to `top_k` experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    /// N × d logit map.
    pub wg: Matrix,
    pub top_k: usize,
}

impl GatingParams {
    pub fn n_experts(&self) -> usize {
        self.wg.rows
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if self.top_k < 1 || self.top_k > self.n_experts() {
            return Err(MoeError::InvalidConfig(format!(
                "top_k {} out of range 1..={}",
                self.top_k,
                self.n_experts()
            )));
        }
        Ok(())
    }
}

/// Expert parameters θ_e: N linear maps d → output_dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub experts: Vec<Matrix>,
}

impl ExpertParams {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.experts.is_empty() {
            return Err(MoeError::InvalidConfig("need at least one expert".into()));
        }
        let (r, c) = (self.experts[0].rows, self.experts[0].cols);
        if self.experts.iter().any(|m| m.rows != r || m.cols != c) {
            return Err(MoeError::InvalidConfig("expert dimensions differ".into()));
        }
        Ok(())
    }

    pub fn seeded(n: usize, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let experts = (0..n)
            .map(|_| {
                let mut m = Matrix::zeros(output_dim, input_dim);
                for v in m.data.iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
                m
            })
            .collect();
        Self { experts }
    }
}

/// Coefficients of the auxiliary routing losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub entropy_coef: f64,
    pub balance_coef: f64,
    pub sparsity_coef: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self { entropy_coef: 0.0, balance_coef: 0.1, sparsity_coef: 0.0 }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<(), MoeError> {
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("balance_coef", self.balance_coef),
            ("sparsity_coef", self.sparsity_coef),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(MoeError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Bilevel solver knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeSolverConfig {
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub lr_inner: f64,
    pub lr_outer: f64,
    /// Fraction of the dataset held out for the upper-level task loss.
    pub holdout_frac: f64,
}

impl Default for MoeSolverConfig {
    fn default() -> Self {
        Self { outer_steps: 50, inner_steps: 5, lr_inner: 0.1, lr_outer: 0.1, holdout_frac: 0.2 }
    }
}

/// One (input, target) pair.
pub type MoeSample = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeTraceStep {
    pub step: usize,
    pub expert_loss: f64,
    pub upper_loss: f64,
}

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged: loss {0} exceeds 1e6")]
    Divergence(f64),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Sparse gate: softmax over logits, keep the `top_k` largest (ties broken
/// toward the lowest index), renormalize to sum 1; all others exactly 0.
pub fn gate(x: &[f64], gating: &GatingParams) -> Vec<f64> {
    let dense = linalg::softmax(&gating.wg.matvec(x));
    let kept = topk_indices(&dense, gating.top_k);
    let total: f64 = kept.iter().map(|&i| dense[i]).sum();
    let mut out = vec![0.0; dense.len()];
    for &i in &kept {
        out[i] = dense[i] / total;
    }
    out
}

/// Indices of the k largest values, ties toward the lowest index.
fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mean over the batch of Σ_i gate(x)_i · ‖e_i(x) − y‖².
pub fn expert_loss(batch: &[MoeSample], gating: &GatingParams, experts: &ExpertParams) -> f64 {
    let mut total = 0.0;
    for (x, y) in batch {
        let g = gate(x, gating);
        for (gi, e) in g.iter().zip(&experts.experts) {
            if *gi == 0.0 {
                continue;
            }
            let pred = e.matvec(x);
            let sq: f64 = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
            total += gi * sq;
        }
    }
    total / batch.len() as f64
}

/// Auxiliary routing loss on the dense softmax:
/// entropy_coef·(−mean entropy) + balance_coef·N·Σ_i f_i·p_i
/// + sparsity_coef·(mean L1), where f_i is the fraction of the batch whose
/// top-1 expert is i and p_i the mean dense probability of expert i.
pub fn routing_loss(batch: &[MoeSample], gating: &GatingParams, cfg: &RoutingConfig) -> f64 {
    let n = gating.n_experts();
    let mut neg_entropy = 0.0;
    let mut l1 = 0.0;
    let mut p_mean = vec![0.0; n];
    let mut f_count = vec![0usize; n];
    for (x, _) in batch {
        let dense = linalg::softmax(&gating.wg.matvec(x));
        for (pm, d) in p_mean.iter_mut().zip(&dense) {
            *pm += d;
        }
        f_count[topk_indices(&dense, 1)[0]] += 1;
        neg_entropy += dense.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        l1 += dense.iter().map(|p| p.abs()).sum::<f64>();
    }
    let b = batch.len() as f64;
    let balance: f64 = (0..n).map(|i| (f_count[i] as f64 / b) * (p_mean[i] / b)).sum();
    cfg.entropy_coef * (neg_entropy / b)
        + cfg.balance_coef * n as f64 * balance
        + cfg.sparsity_coef * (l1 / b)
}

/// Differentiable sparse gate on a tape: softmax of logit vars, top-k set
/// chosen by value (straight-through), kept entries renormalized.
fn diff_gate<'t>(
    tape: &'t Tape,
    wg: &[Var<'t>],
    n: usize,
    d: usize,
    x: &[f64],
    top_k: usize,
) -> Vec<Var<'t>> {
    let xv = tape.constants(x);
    let logits = autodiff::vmatvec(tape, wg, n, d, &xv);
    let dense = autodiff::vsoftmax(tape, &logits);
    let vals: Vec<f64> = dense.iter().map(|v| v.value()).collect();
    let kept = topk_indices(&vals, top_k);
    let mut total = tape.constant(0.0);
    for &i in &kept {
        total = total + dense[i];
    }
    let mut out = vec![tape.constant(0.0); n];
    for &i in &kept {
        out[i] = dense[i] / total;
    }
    out
}

/// Differentiable gate-weighted task loss over a batch.
fn diff_expert_loss<'t>(
    tape: &'t Tape,
    wg: &[Var<'t>],
    experts: &[Vec<Var<'t>>],
    dims: (usize, usize, usize), // (n, d, output_dim)
    top_k: usize,
    batch: &[MoeSample],
) -> Var<'t> {
    let (n, d, out_dim) = dims;
    let mut total = tape.constant(0.0);
    for (x, y) in batch {
        let g = diff_gate(tape, wg, n, d, x, top_k);
        let xv = tape.constants(x);
        let yv = tape.constants(y);
        for (gi, e) in g.iter().zip(experts) {
            if gi.value() == 0.0 {
                continue;
            }
            let pred = autodiff::vmatvec(tape, e, out_dim, d, &xv);
            total = total + *gi * autodiff::vsq_dist(tape, &pred, &yv);
        }
    }
    total / batch.len() as f64
}

/// Differentiable routing loss. The top-1 fractions f_i are treated as
/// constants (piecewise constant in θ_g); gradients flow through the mean
/// probabilities p_i and the entropy.
fn diff_routing_loss<'t>(
    tape: &'t Tape,
    wg: &[Var<'t>],
    n: usize,
    d: usize,
    batch: &[MoeSample],
    cfg: &RoutingConfig,
) -> Var<'t> {
    let mut neg_entropy = tape.constant(0.0);
    let mut l1 = tape.constant(0.0);
    let mut p_mean = vec![tape.constant(0.0); n];
    let mut f_count = vec![0usize; n];
    for (x, _) in batch {
        let xv = tape.constants(x);
        let logits = autodiff::vmatvec(tape, wg, n, d, &xv);
        let dense = autodiff::vsoftmax(tape, &logits);
        let vals: Vec<f64> = dense.iter().map(|v| v.value()).collect();
        f_count[topk_indices(&vals, 1)[0]] += 1;
        for (pm, dv) in p_mean.iter_mut().zip(&dense) {
            *pm = *pm + *dv;
            neg_entropy = neg_entropy + *dv * dv.ln();
            l1 = l1 + *dv;
        }
    }
    let b = batch.len() as f64;
    let mut balance = tape.constant(0.0);
    for i in 0..n {
        balance = balance + (f_count[i] as f64 / b) * (p_mean[i] / b);
    }
    cfg.entropy_coef * (neg_entropy / b)
        + cfg.balance_coef * (n as f64) * balance
        + cfg.sparsity_coef * (l1 / b)
}

/// Bilevel training. Each outer step unrolls `inner_steps` expert gradient
/// descent updates on the tape (warm-started from the current experts), then
/// takes one gate step on `routing_loss + held-out task loss` differentiated
/// through the unrolled updates. Deterministic.
pub fn bilevel_train_moe(
    dataset: &[MoeSample],
    gating0: &GatingParams,
    experts0: &ExpertParams,
    cfg: &RoutingConfig,
    solver: &MoeSolverConfig,
) -> Result<(GatingParams, ExpertParams, Vec<MoeTraceStep>), MoeError> {
    if dataset.is_empty() {
        return Err(MoeError::EmptyDataset);
    }
    gating0.validate()?;
    experts0.validate()?;
    cfg.validate()?;
    let n = gating0.n_experts();
    let d = gating0.wg.cols;
    let out_dim = experts0.experts[0].rows;
    let n_hold = ((dataset.len() as f64 * solver.holdout_frac).round() as usize)
        .min(dataset.len().saturating_sub(1));
    let (train, holdout) = dataset.split_at(dataset.len() - n_hold);
    let holdout = if holdout.is_empty() { train } else { holdout };

    let mut gating = gating0.clone();
    let mut experts = experts0.clone();
    let mut trace = Vec::with_capacity(solver.outer_steps);
    for step in 0..solver.outer_steps {
        let tape = Tape::new();
        let wg = tape.vars(&gating.wg.data);
        let mut e_vars: Vec<Vec<Var<'_>>> =
            experts.experts.iter().map(|m| tape.vars(&m.data)).collect();
        // Inner: unrolled expert descent with the gate held fixed.
        for _ in 0..solver.inner_steps {
            let loss = diff_expert_loss(&tape, &wg, &e_vars, (n, d, out_dim), gating.top_k, train);
            let flat: Vec<Var<'_>> = e_vars.iter().flatten().copied().collect();
            let grads = tape.grad_vars(loss, &flat);
            let mut it = grads.into_iter();
            for e in e_vars.iter_mut() {
                for v in e.iter_mut() {
                    *v = *v - solver.lr_inner * it.next().unwrap();
                }
            }
        }
        // Outer: routing loss + held-out task loss through the unrolled steps.
        let inner_final =
            diff_expert_loss(&tape, &wg, &e_vars, (n, d, out_dim), gating.top_k, train);
        let task = diff_expert_loss(&tape, &wg, &e_vars, (n, d, out_dim), gating.top_k, holdout);
        let routing = diff_routing_loss(&tape, &wg, n, d, train, cfg);
        let upper = routing + task;
        if !upper.value().is_finite() || upper.value() > 1e6 {
            return Err(MoeError::Divergence(upper.value()));
        }
        let g = tape.backward(upper);
        for (w, v) in gating.wg.data.iter_mut().zip(&wg) {
            *w -= solver.lr_outer * g.wrt(*v);
        }
        // Commit the unrolled expert values.
        for (m, e) in experts.experts.iter_mut().zip(&e_vars) {
            for (slot, v) in m.data.iter_mut().zip(e) {
                *slot = v.value();
            }
        }
        trace.push(MoeTraceStep { step, expert_loss: inner_final.value(), upper_loss: upper.value() });
    }
    Ok((gating, experts, trace))
}
