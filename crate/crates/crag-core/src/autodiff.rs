//! Minimal reverse-mode autodiff tape over scalars.
//!
//! Two backward passes are provided:
//! - [`Tape::backward`] accumulates plain `f64` adjoints (first-order
//!   gradients),
//! - [`Tape::grad_vars`] accumulates adjoints *as tape nodes*, so the gradient
//!   of a loss with respect to some variables is itself differentiable. That
//!   is what makes truncated unrolling work: an inner gradient-descent step
//!   `p ← p − lr·∇L(p)` is expressed on the tape and the outer objective is
//!   then differentiated straight through it.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    val: f64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a scalar on the tape. Copyable; the value is cached inline.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    val: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, val: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, val });
        Var { tape: self, idx: nodes.len() - 1, val }
    }

    /// New differentiable leaf.
    pub fn var(&self, val: f64) -> Var<'_> {
        self.push(Op::Leaf, val)
    }

    /// Constant leaf (identical to `var`; named for intent at call sites).
    pub fn constant(&self, val: f64) -> Var<'_> {
        self.push(Op::Leaf, val)
    }

    pub fn vars(&self, vals: &[f64]) -> Vec<Var<'_>> {
        vals.iter().map(|&v| self.var(v)).collect()
    }

    pub fn constants(&self, vals: &[f64]) -> Vec<Var<'_>> {
        vals.iter().map(|&v| self.constant(v)).collect()
    }

    /// First-order reverse pass: adjoints of `output` w.r.t. every node.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[output.idx] = 1.0;
        for idx in (0..=output.idx).rev() {
            let a = adj[idx];
            if a == 0.0 {
                continue;
            }
            match nodes[idx].op {
                Op::Leaf => {}
                Op::Add(x, y) => {
                    adj[x] += a;
                    adj[y] += a;
                }
                Op::Sub(x, y) => {
                    adj[x] += a;
                    adj[y] -= a;
                }
                Op::Mul(x, y) => {
                    adj[x] += a * nodes[y].val;
                    adj[y] += a * nodes[x].val;
                }
                Op::Div(x, y) => {
                    adj[x] += a / nodes[y].val;
                    adj[y] -= a * nodes[x].val / (nodes[y].val * nodes[y].val);
                }
                Op::Neg(x) => adj[x] -= a,
                Op::Tanh(x) => {
                    let t = nodes[idx].val;
                    adj[x] += a * (1.0 - t * t);
                }
                Op::Exp(x) => adj[x] += a * nodes[idx].val,
                Op::Ln(x) => adj[x] += a / nodes[x].val,
                Op::Sqrt(x) => adj[x] += a * 0.5 / nodes[idx].val,
            }
        }
        Gradients { adj }
    }

    /// Reverse pass with adjoints built as tape nodes. Returns gradient vars
    /// of `output` with respect to each of `wrt`, in order.
    pub fn grad_vars<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let n = output.idx + 1;
        let ops: Vec<Op> = {
            let nodes = self.nodes.borrow();
            nodes[..n].iter().map(|nd| nd.op).collect()
        };
        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        adj[output.idx] = Some(self.constant(1.0));
        let add_to = |slot: &mut Option<Var<'t>>, v: Var<'t>| {
            *slot = Some(match slot.take() {
                Some(prev) => prev + v,
                None => v,
            });
        };
        for idx in (0..n).rev() {
            let Some(a) = adj[idx] else { continue };
            let this = Var { tape: self, idx, val: self.nodes.borrow()[idx].val };
            match ops[idx] {
                Op::Leaf => {}
                Op::Add(x, y) => {
                    add_to(&mut adj[x], a);
                    add_to(&mut adj[y], a);
                }
                Op::Sub(x, y) => {
                    add_to(&mut adj[x], a);
                    add_to(&mut adj[y], -a);
                }
                Op::Mul(x, y) => {
                    let vx = self.node_var(x);
                    let vy = self.node_var(y);
                    add_to(&mut adj[x], a * vy);
                    add_to(&mut adj[y], a * vx);
                }
                Op::Div(x, y) => {
                    let vx = self.node_var(x);
                    let vy = self.node_var(y);
                    add_to(&mut adj[x], a / vy);
                    add_to(&mut adj[y], -(a * vx) / (vy * vy));
                }
                Op::Neg(x) => add_to(&mut adj[x], -a),
                Op::Tanh(x) => add_to(&mut adj[x], a * (self.constant(1.0) - this * this)),
                Op::Exp(x) => add_to(&mut adj[x], a * this),
                Op::Ln(x) => {
                    let vx = self.node_var(x);
                    add_to(&mut adj[x], a / vx);
                }
                Op::Sqrt(x) => {
                    add_to(&mut adj[x], a * self.constant(0.5) / this);
                }
            }
        }
        wrt.iter()
            .map(|v| adj[v.idx].unwrap_or_else(|| self.constant(0.0)))
            .collect()
    }

    fn node_var(&self, idx: usize) -> Var<'_> {
        Var { tape: self, idx, val: self.nodes.borrow()[idx].val }
    }
}

pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.idx]
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.val
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.push(Op::Tanh(self.idx), self.val.tanh())
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.push(Op::Exp(self.idx), self.val.exp())
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.push(Op::Ln(self.idx), self.val.ln())
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.push(Op::Sqrt(self.idx), self.val.sqrt())
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                let f: fn(f64, f64) -> f64 = $f;
                self.tape.push(Op::$op(self.idx, rhs.idx), f(self.val, rhs.val))
            }
        }
        impl<'t> std::ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.constant(rhs);
                std::ops::$trait::$method(self, c)
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push(Op::Neg(self.idx), -self.val)
    }
}

impl<'t> std::ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

// ---- vector helpers ----

pub fn vdot<'t>(tape: &'t Tape, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = tape.constant(0.0);
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

pub fn vsum<'t>(tape: &'t Tape, a: &[Var<'t>]) -> Var<'t> {
    let mut acc = tape.constant(0.0);
    for x in a {
        acc = acc + *x;
    }
    acc
}

/// Row-major `rows x cols` matrix of vars applied to a vector of vars.
pub fn vmatvec<'t>(
    tape: &'t Tape,
    w: &[Var<'t>],
    rows: usize,
    cols: usize,
    x: &[Var<'t>],
) -> Vec<Var<'t>> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|r| vdot(tape, &w[r * cols..(r + 1) * cols], x)).collect()
}

pub fn vtanh<'t>(a: &[Var<'t>]) -> Vec<Var<'t>> {
    a.iter().map(|v| v.tanh()).collect()
}

/// Stable softmax on the tape; the shift by the max is a constant, which does
/// not change the gradient.
pub fn vsoftmax<'t>(tape: &'t Tape, scores: &[Var<'t>]) -> Vec<Var<'t>> {
    let max = scores.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Var<'t>> = scores.iter().map(|s| (*s - max).exp()).collect();
    let sum = vsum(tape, &exps);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Squared L2 distance between two var vectors.
pub fn vsq_dist<'t>(tape: &'t Tape, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = tape.constant(0.0);
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc
}

pub fn values(vars: &[Var<'_>]) -> Vec<f64> {
    vars.iter().map(|v| v.value()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = |x: &[f64]| (x[0] * x[1]).tanh() + x[0] / x[1] + x[1].exp().ln().sqrt();
        let x0 = [0.7, 1.3];
        let tape = Tape::new();
        let v = tape.vars(&x0);
        let y = (v[0] * v[1]).tanh() + v[0] / v[1] + v[1].exp().ln().sqrt();
        let g = tape.backward(y);
        for i in 0..2 {
            assert_abs_diff_eq!(g.wrt(v[i]), fd(f, &x0, i), epsilon = 1e-6);
        }
    }

    #[test]
    fn grad_vars_supports_second_order() {
        // f(x) = x^3; f' = 3x^2; f'' = 6x.
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = x * x * x;
        let g = tape.grad_vars(y, &[x]);
        assert_abs_diff_eq!(g[0].value(), 12.0, epsilon = 1e-12);
        let gg = tape.backward(g[0]);
        assert_abs_diff_eq!(gg.wrt(x), 12.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_through_inner_gradient_step() {
        // Unrolled step: q(x) = x - lr * d/dx (x - c)^2 = x - 2 lr (x - c).
        // Outer: F(x) = q(x)^2, dF/dx = 2 q (1 - 2 lr).
        let lr = 0.1;
        let c = 3.0;
        let x0 = 1.0;
        let tape = Tape::new();
        let x = tape.var(x0);
        let inner = (x - c).square();
        let gi = tape.grad_vars(inner, &[x]);
        let q = x - lr * gi[0];
        let outer = q.square();
        let g = tape.backward(outer);
        let q_val = x0 - 2.0 * lr * (x0 - c);
        assert_abs_diff_eq!(g.wrt(x), 2.0 * q_val * (1.0 - 2.0 * lr), epsilon = 1e-12);
    }

    #[test]
    fn softmax_vars_match_plain_softmax() {
        let tape = Tape::new();
        let s = tape.vars(&[2.0, 1.0, -0.5]);
        let w = vsoftmax(&tape, &s);
        let expect = crate::linalg::softmax(&[2.0, 1.0, -0.5]);
        for (a, b) in w.iter().zip(&expect) {
            assert_abs_diff_eq!(a.value(), *b, epsilon = 1e-12);
        }
    }
}
