//! Continual retrieval-augmented generation engine: dynamic corpus lifecycle,
//! task-aware retrieval, retrieval-conditioned generation with continual
//! fine-tuning, bilevel MoE training, bilevel/trilevel distributionally robust
//! joint optimization, multi-timescale scheduling, drift-aware evaluation, and
//! a plan-and-execute tool agent over deterministic mock tools.
//!
//! Everything runs on small differentiable surrogate models so the numerical
//! behavior can be checked against analytic solutions and brute-force oracles.

pub mod agent;
pub mod autodiff;
pub mod corpus;
pub mod fusion;
pub mod linalg;
pub mod metrics;
pub mod moe;
pub mod multilevel;
pub mod retrieval;
pub mod scheduler;
pub mod stream;
