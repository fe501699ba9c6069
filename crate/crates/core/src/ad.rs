//! Recorded-adjoint automatic differentiation with second-order Taylor sweeps.
//!
//! Likelihood code is written once against [`Real`] and runs either on plain
//! `f64` or on [`Var`], which records every operation on a [`Tape`]. A
//! recorded tape supports:
//!
//! * reverse gradients,
//! * Hessian-vector products (reverse over a first-order Taylor sweep),
//! * gradients of `½ dᵀ H d` (reverse over a second-order Taylor sweep),
//!   which is what the exact gradient of a Laplace-approximated marginal
//!   likelihood needs.
//!
//! Unary nodes cache their first three derivatives at record time, so the
//! sweeps never re-evaluate special functions.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::special;

/// Scalar arithmetic shared by `f64` and tape variables.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn exp_m1(self) -> Self;
    /// `e^x − 1 − x`
    fn exp_m1_minus_x(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn lgamma(self) -> Self;
    /// Remainder of Stirling's approximation to `ln Γ`.
    fn stirling_remainder(self) -> Self;
    fn tanh(self) -> Self;
    /// `ln Φ(x)` for the standard normal CDF.
    fn ln_norm_cdf(self) -> Self;

    fn sqrt(self) -> Self {
        self.powf(0.5)
    }
    fn recip(self) -> Self {
        self.powf(-1.0)
    }
    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn exp_m1(self) -> Self {
        f64::exp_m1(self)
    }
    fn exp_m1_minus_x(self) -> Self {
        special::expm1_minus_x(self)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        if p == 0.5 {
            f64::sqrt(self)
        } else if p == -1.0 {
            1.0 / self
        } else {
            f64::powf(self, p)
        }
    }
    fn lgamma(self) -> Self {
        special::ln_gamma(self)
    }
    fn stirling_remainder(self) -> Self {
        special::stirling_remainder(self)[0]
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn ln_norm_cdf(self) -> Self {
        special::ln_norm_cdf(self)[0]
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    /// `scale * x + shift`, scale cached in `d[0]`
    Affine(u32),
    /// Smooth unary map; derivatives cached in the node.
    Unary(u32),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    val: f64,
    // first three derivatives for unary nodes; d[0] doubles as affine scale
    d: [f64; 3],
}

/// Operation record for one scalar function evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Scalar recorded on a [`Tape`]; values without a tape are constants.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.val)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the tape and records `xs` as its inputs, in order.
    pub fn inputs(&self, xs: &[f64]) -> Vec<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.clear();
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                nodes.push(Node { op: Op::Input, val: x, d: [0.0; 3] });
                Var { tape: Some(self), idx: i as u32, val: x }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn n_inputs(nodes: &[Node]) -> usize {
        nodes.iter().take_while(|n| matches!(n.op, Op::Input)).count()
    }

    fn push(&self, op: Op, val: f64, d: [f64; 3]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { op, val, d });
        Var { tape: Some(self), idx, val }
    }

    /// Gradient of `out` with respect to the inputs, written into `grad`.
    pub fn gradient(&self, out: Var<'_>, grad: &mut [f64], ws: &mut SweepBuffers) {
        let nodes = self.nodes.borrow();
        let n_in = Self::n_inputs(&nodes);
        assert_eq!(grad.len(), n_in);
        grad.fill(0.0);
        if out.tape.is_none() {
            return;
        }
        let adj = &mut ws.a0;
        adj.clear();
        adj.resize(nodes.len(), 0.0);
        adj[out.idx as usize] = 1.0;
        for i in (0..=out.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            match node.op {
                Op::Input => {}
                Op::Add(l, r) => {
                    adj[l as usize] += a;
                    adj[r as usize] += a;
                }
                Op::Sub(l, r) => {
                    adj[l as usize] += a;
                    adj[r as usize] -= a;
                }
                Op::Mul(l, r) => {
                    let (lv, rv) = (nodes[l as usize].val, nodes[r as usize].val);
                    adj[l as usize] += a * rv;
                    adj[r as usize] += a * lv;
                }
                Op::Affine(x) | Op::Unary(x) => {
                    adj[x as usize] += a * node.d[0];
                }
            }
        }
        grad.copy_from_slice(&adj[..n_in]);
    }

    /// Hessian-vector product `H·dir` over all inputs.
    pub fn hessian_vector(&self, out: Var<'_>, dir: &[f64], res: &mut [f64], ws: &mut SweepBuffers) {
        self.taylor_adjoint::<1>(out, dir, res, ws);
    }

    /// Gradient of `½ dirᵀ H dir` with respect to the inputs.
    pub fn half_quadratic_gradient(
        &self,
        out: Var<'_>,
        dir: &[f64],
        res: &mut [f64],
        ws: &mut SweepBuffers,
    ) {
        self.taylor_adjoint::<2>(out, dir, res, ws);
    }

    /// Forward Taylor sweep along `dir` to order `K`, then a reverse sweep
    /// seeded on the order-`K` output coefficient.
    fn taylor_adjoint<const K: usize>(
        &self,
        out: Var<'_>,
        dir: &[f64],
        res: &mut [f64],
        ws: &mut SweepBuffers,
    ) {
        let nodes = self.nodes.borrow();
        let n_in = Self::n_inputs(&nodes);
        assert_eq!(dir.len(), n_in);
        assert_eq!(res.len(), n_in);
        res.fill(0.0);
        if out.tape.is_none() {
            return;
        }
        let n = out.idx as usize + 1;
        ws.reset(n);
        let SweepBuffers { x1, x2, a0, a1, a2 } = ws;

        for i in 0..n {
            let node = &nodes[i];
            match node.op {
                Op::Input => {
                    x1[i] = dir[i];
                    x2[i] = 0.0;
                }
                Op::Add(l, r) => {
                    x1[i] = x1[l as usize] + x1[r as usize];
                    if K == 2 {
                        x2[i] = x2[l as usize] + x2[r as usize];
                    }
                }
                Op::Sub(l, r) => {
                    x1[i] = x1[l as usize] - x1[r as usize];
                    if K == 2 {
                        x2[i] = x2[l as usize] - x2[r as usize];
                    }
                }
                Op::Mul(l, r) => {
                    let (l, r) = (l as usize, r as usize);
                    let (l0, r0) = (nodes[l].val, nodes[r].val);
                    x1[i] = l0 * x1[r] + x1[l] * r0;
                    if K == 2 {
                        x2[i] = l0 * x2[r] + x1[l] * x1[r] + x2[l] * r0;
                    }
                }
                Op::Affine(x) => {
                    let s = node.d[0];
                    x1[i] = s * x1[x as usize];
                    if K == 2 {
                        x2[i] = s * x2[x as usize];
                    }
                }
                Op::Unary(x) => {
                    let t1 = x1[x as usize];
                    x1[i] = node.d[0] * t1;
                    if K == 2 {
                        x2[i] = node.d[0] * x2[x as usize] + 0.5 * node.d[1] * t1 * t1;
                    }
                }
            }
        }

        if K == 1 {
            a1[n - 1] = 1.0;
        } else {
            a2[n - 1] = 1.0;
        }
        for i in (0..n).rev() {
            let (b0, b1, b2) = (a0[i], a1[i], if K == 2 { a2[i] } else { 0.0 });
            if b0 == 0.0 && b1 == 0.0 && b2 == 0.0 {
                continue;
            }
            let node = &nodes[i];
            match node.op {
                Op::Input => {}
                Op::Add(l, r) => {
                    for (k, b) in [(l, 1.0), (r, 1.0)] {
                        let k = k as usize;
                        a0[k] += b * b0;
                        a1[k] += b * b1;
                        if K == 2 {
                            a2[k] += b * b2;
                        }
                    }
                }
                Op::Sub(l, r) => {
                    for (k, b) in [(l, 1.0), (r, -1.0)] {
                        let k = k as usize;
                        a0[k] += b * b0;
                        a1[k] += b * b1;
                        if K == 2 {
                            a2[k] += b * b2;
                        }
                    }
                }
                Op::Mul(l, r) => {
                    let (l, r) = (l as usize, r as usize);
                    let (l0, l1, l2) = (nodes[l].val, x1[l], x2[l]);
                    let (r0, r1, r2) = (nodes[r].val, x1[r], x2[r]);
                    a0[l] += b0 * r0 + b1 * r1 + b2 * r2;
                    a1[l] += b1 * r0 + b2 * r1;
                    a0[r] += b0 * l0 + b1 * l1 + b2 * l2;
                    a1[r] += b1 * l0 + b2 * l1;
                    if K == 2 {
                        a2[l] += b2 * r0;
                        a2[r] += b2 * l0;
                    }
                }
                Op::Affine(x) => {
                    let (x, s) = (x as usize, node.d[0]);
                    a0[x] += s * b0;
                    a1[x] += s * b1;
                    if K == 2 {
                        a2[x] += s * b2;
                    }
                }
                Op::Unary(x) => {
                    let x = x as usize;
                    let [d1, d2, d3] = node.d;
                    let (t1, t2) = (x1[x], if K == 2 { x2[x] } else { 0.0 });
                    a0[x] += b0 * d1 + b1 * d2 * t1 + b2 * (d2 * t2 + 0.5 * d3 * t1 * t1);
                    a1[x] += b1 * d1 + b2 * d2 * t1;
                    if K == 2 {
                        a2[x] += b2 * d1;
                    }
                }
            }
        }
        res.copy_from_slice(&a0[..n_in]);
    }
}

/// Reusable sweep storage.
#[derive(Default)]
pub struct SweepBuffers {
    x1: Vec<f64>,
    x2: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

impl SweepBuffers {
    fn reset(&mut self, n: usize) {
        for v in [&mut self.x1, &mut self.x2, &mut self.a0, &mut self.a1, &mut self.a2] {
            v.clear();
            v.resize(n, 0.0);
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(x: f64) -> Self {
        Var { tape: None, idx: u32::MAX, val: x }
    }

    fn unary(self, val: f64, d: [f64; 3]) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => t.push(Op::Unary(self.idx), val, d),
        }
    }

    fn affine(self, scale: f64, shift: f64) -> Self {
        let val = scale * self.val + shift;
        match self.tape {
            None => Var::constant(val),
            Some(t) => t.push(Op::Affine(self.idx), val, [scale, 0.0, 0.0]),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        match (self.tape, rhs.tape) {
            (Some(t), Some(_)) => t.push(Op::Add(self.idx, rhs.idx), self.val + rhs.val, [0.0; 3]),
            (Some(_), None) => self.affine(1.0, rhs.val),
            (None, Some(_)) => rhs.affine(1.0, self.val),
            (None, None) => Var::constant(self.val + rhs.val),
        }
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        match (self.tape, rhs.tape) {
            (Some(t), Some(_)) => t.push(Op::Sub(self.idx, rhs.idx), self.val - rhs.val, [0.0; 3]),
            (Some(_), None) => self.affine(1.0, -rhs.val),
            (None, Some(_)) => rhs.affine(-1.0, self.val),
            (None, None) => Var::constant(self.val - rhs.val),
        }
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        match (self.tape, rhs.tape) {
            (Some(t), Some(_)) => t.push(Op::Mul(self.idx, rhs.idx), self.val * rhs.val, [0.0; 3]),
            (Some(_), None) => self.affine(rhs.val, 0.0),
            (None, Some(_)) => rhs.affine(self.val, 0.0),
            (None, None) => Var::constant(self.val * rhs.val),
        }
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Self) -> Self {
        match rhs.tape {
            None => self.affine(1.0 / rhs.val, 0.0),
            Some(_) => self * rhs.recip(),
        }
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.affine(-1.0, 0.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.affine(1.0, rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.affine(1.0, -rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.affine(rhs, 0.0)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.affine(1.0 / rhs, 0.0)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(x: f64) -> Self {
        Var::constant(x)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, [e, e, e])
    }
    fn ln(self) -> Self {
        let x = self.val;
        let r = 1.0 / x;
        self.unary(x.ln(), [r, -r * r, 2.0 * r * r * r])
    }
    fn ln_1p(self) -> Self {
        let x = self.val;
        let r = 1.0 / (1.0 + x);
        self.unary(x.ln_1p(), [r, -r * r, 2.0 * r * r * r])
    }
    fn exp_m1(self) -> Self {
        let e = self.val.exp();
        self.unary(self.val.exp_m1(), [e, e, e])
    }
    fn exp_m1_minus_x(self) -> Self {
        let x = self.val;
        let e = x.exp();
        self.unary(special::expm1_minus_x(x), [x.exp_m1(), e, e])
    }
    fn powf(self, p: f64) -> Self {
        let x = self.val;
        let v = Real::powf(x, p);
        let d1 = p * x.powf(p - 1.0);
        let d2 = p * (p - 1.0) * x.powf(p - 2.0);
        let d3 = p * (p - 1.0) * (p - 2.0) * x.powf(p - 3.0);
        self.unary(v, [d1, d2, d3])
    }
    fn lgamma(self) -> Self {
        let x = self.val;
        self.unary(
            special::ln_gamma(x),
            [special::digamma(x), special::trigamma(x), special::tetragamma(x)],
        )
    }
    fn stirling_remainder(self) -> Self {
        let [v, d1, d2, d3] = special::stirling_remainder(self.val);
        self.unary(v, [d1, d2, d3])
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        let s = 1.0 - t * t;
        self.unary(t, [s, -2.0 * t * s, s * (6.0 * t * t - 2.0)])
    }
    fn ln_norm_cdf(self) -> Self {
        let [v, d1, d2, d3] = special::ln_norm_cdf(self.val);
        self.unary(v, [d1, d2, d3])
    }
}

/// Dense gradient and Hessian of `f` at `x`, via one reverse sweep and one
/// Hessian-vector sweep per coordinate.
pub fn gradient_hessian<F>(f: F, x: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars = tape.inputs(x);
    let out = f(&vars);
    let mut ws = SweepBuffers::default();
    let n = x.len();
    let mut g = vec![0.0; n];
    tape.gradient(out, &mut g, &mut ws);
    let mut h = vec![vec![0.0; n]; n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        tape.hessian_vector(out, &e, &mut h[j], &mut ws);
    }
    (out.value(), g, h)
}
