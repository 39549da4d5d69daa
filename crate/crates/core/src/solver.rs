//! Discrete Laplacian, Krylov solvers and the elliptic problem drivers.
//!
//! Every equation is stored as `Δu + B(x, u) = 0` on the interior nodes with
//! Dirichlet data on the boundary samples:
//!
//! | problem                           | B(x, s)                              |
//! |-----------------------------------|--------------------------------------|
//! | torsion                           | 1                                    |
//! | power (Kennington)                | s^γ                                  |
//! | perturbed power                   | s^γ − s^((1+γ)/2) g(s)               |
//! | log-concave                       | λ s − s g(s)                         |
//! | source                            | f(x) − s^((1+γ)/(1+2γ)) g(x)         |
//! | perturbed problem `Δv = b + εv`   | −b(x, s) − ε s                       |
//!
//! `solve_semilinear(.., sign, ..)` solves `Δu + sign·b(x, u) = 0`.
//!
//! The Laplacian uses the symmetric cut-cell stencil: an arm ending at a
//! boundary point at distance `d ≤ h` contributes `(u_B − u_P) / (h d)`. The
//! matrix is symmetric negative definite, so `−Δ_h` is solved by conjugate
//! gradients with Jacobi preconditioning.

use crate::domain::{Arm, DomainMask};
use crate::fields::GridField;
use crate::geometry::Point;
use crate::par::{self, Execution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("mask has no interior node")]
    EmptyInterior,
    #[error("right-hand side is not finite at interior node {0}")]
    NonFiniteRhs(usize),
    #[error("linear solve did not converge: residual {residual:e} after {iterations} iterations")]
    LinearNoConvergence { iterations: usize, residual: f64 },
    #[error("Newton stagnated at iteration {iteration}: damping exhausted with residual {residual:e}")]
    Stagnation { iteration: usize, residual: f64 },
    #[error("Newton did not reach tolerance {tol:e} in {iterations} iterations (residual {residual:e})")]
    NewtonNoConvergence { iterations: usize, residual: f64, tol: f64 },
    #[error("iterate left the validity range of {name} at node {node} (value {value})")]
    ExitsValidity { name: String, node: usize, value: f64 },
    #[error("initial guess must be positive on the interior (node {node}, value {value})")]
    NonPositiveInit { node: usize, value: f64 },
    #[error("degenerate problem: solution collapsed to zero (sup {sup:e})")]
    Degenerate { sup: f64 },
    #[error("solution is not positive on the interior (node {node}, value {value})")]
    NonPositiveSolution { node: usize, value: f64 },
    #[error("eigen iteration did not converge after {iterations} iterations")]
    EigenNoConvergence { iterations: usize },
    #[error("need at least {need} interior nodes, mask has {have}")]
    TooFewNodes { need: usize, have: usize },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Compressed-row discrete Laplacian over the interior unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    /// Grid node of each unknown.
    pub nodes: Vec<usize>,
}

impl SparseOperator {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.cols[p], self.vals[p]))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).find(|&(c, _)| c == i).map_or(0.0, |(_, v)| v)).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// `y = A x`.
    pub fn matvec(&self, exec: Execution, x: &[f64], y: &mut [f64]) {
        par::fill(exec, y, |i| {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            acc
        });
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(Execution::default(), x, &mut y);
        y
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (self.get(j, i) - v).abs() <= tol * v.abs().max(1.0)))
    }
}

pub fn assemble_laplacian(mask: &DomainMask) -> Result<SparseOperator, SolverError> {
    let n = mask.interior_count();
    if n == 0 {
        return Err(SolverError::EmptyInterior);
    }
    let h = mask.h();
    let inv_h2 = 1.0 / (h * h);
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(5 * n);
    let mut vals = Vec::with_capacity(5 * n);
    row_ptr.push(0);
    for (i, arms) in mask.arms.iter().enumerate() {
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(5);
        let mut diag = 0.0;
        for arm in arms {
            match *arm {
                Arm::Interior(m) => {
                    entries.push((mask.unknown_of(m).expect("interior neighbour"), inv_h2));
                    diag -= inv_h2;
                }
                Arm::Boundary { dist, .. } => diag -= 1.0 / (h * dist),
            }
        }
        entries.push((i, diag));
        entries.sort_by_key(|e| e.0);
        for (c, v) in entries {
            cols.push(c);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    }
    Ok(SparseOperator { n, row_ptr, cols, vals, nodes: mask.interior.clone() })
}

/// Boundary contribution to `Δ_h u` from the Dirichlet values stored on the samples of `data`.
pub fn dirichlet_term(mask: &DomainMask, data: &GridField) -> Vec<f64> {
    let h = mask.h();
    mask.arms
        .iter()
        .map(|arms| {
            arms.iter()
                .map(|a| match *a {
                    Arm::Boundary { sample, dist } => data.sample(sample) / (h * dist),
                    Arm::Interior(_) => 0.0,
                })
                .sum()
        })
        .collect()
}

/// `Δ_h u` evaluated directly from the stencil arms and the field's stored
/// values, independently of the assembled matrix.
pub fn stencil_laplacian(u: &GridField) -> Vec<f64> {
    let mask = u.mask_arc();
    let h = mask.h();
    mask.interior
        .iter()
        .zip(&mask.arms)
        .map(|(&k, arms)| {
            let up = u.node(k);
            arms.iter()
                .map(|a| match *a {
                    Arm::Interior(m) => (u.node(m) - up) / (h * h),
                    Arm::Boundary { sample, dist } => (u.sample(sample) - up) / (h * dist),
                })
                .sum()
        })
        .collect()
}

fn dot(exec: Execution, a: &[f64], b: &[f64]) -> f64 {
    par::sum(exec, a.len(), |i| a[i] * b[i])
}

fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Set when CG met a direction of non-positive curvature.
    pub indefinite: bool,
}

/// Symmetric operator `y = K x` given as a closure.
pub trait LinearMap: Sync {
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diag(&self) -> Vec<f64>;
    fn dim(&self) -> usize;
}

/// `K = −A − diag(shift)`.
pub struct ShiftedNegLaplacian<'a> {
    pub op: &'a SparseOperator,
    pub shift: &'a [f64],
    pub exec: Execution,
}

impl LinearMap for ShiftedNegLaplacian<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let op = self.op;
        par::fill(self.exec, y, |i| {
            let mut acc = 0.0;
            for p in op.row_ptr[i]..op.row_ptr[i + 1] {
                acc += op.vals[p] * x[op.cols[p]];
            }
            -acc - self.shift[i] * x[i]
        });
    }

    fn diag(&self) -> Vec<f64> {
        self.op.diagonal().iter().zip(self.shift).map(|(d, s)| -d - s).collect()
    }

    fn dim(&self) -> usize {
        self.op.n
    }
}

/// Jacobi-preconditioned conjugate gradients for `K x = b`, stopping when the
/// true residual satisfies `‖b − K x‖_∞ ≤ tol·‖b‖_∞`.
pub fn conjugate_gradient(k: &dyn LinearMap, b: &[f64], x0: Option<&[f64]>, tol: f64, max_iter: usize, exec: Execution) -> LinearOutcome {
    let n = k.dim();
    let bnorm = sup_norm(b);
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    if bnorm == 0.0 {
        return LinearOutcome { x: vec![0.0; n], iterations: 0, residual: 0.0, converged: true, indefinite: false };
    }
    let target = tol * bnorm;
    let dinv: Vec<f64> = k.diag().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = vec![0.0; n];
    let mut q = vec![0.0; n];
    k.apply(&x, &mut q);
    for i in 0..n {
        r[i] = b[i] - q[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = dot(exec, &r, &z);
    let mut res = sup_norm(&r);
    let mut it = 0;
    let mut checkpoint = res;
    let mut stalled = 0;
    while res > target && it < max_iter {
        k.apply(&p, &mut q);
        let pq = dot(exec, &p, &q);
        if !(pq > 0.0) {
            return LinearOutcome { x, iterations: it, residual: res, converged: false, indefinite: true };
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        it += 1;
        res = sup_norm(&r);
        if res <= target || it % 50 == 0 {
            // Refresh with the true residual to avoid drift.
            k.apply(&x, &mut q);
            for i in 0..n {
                r[i] = b[i] - q[i];
            }
            res = sup_norm(&r);
            if res <= target {
                break;
            }
            // Stop when round-off keeps the true residual from improving.
            if res > 0.5 * checkpoint {
                stalled += 1;
                if stalled >= 40 {
                    break;
                }
            } else {
                stalled = 0;
                checkpoint = res;
            }
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(exec, &r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    LinearOutcome { x, iterations: it, residual: res, converged: res <= target, indefinite: false }
}

/// MINRES for symmetric, possibly indefinite `K x = b` with a positive diagonal preconditioner `|diag K|`.
pub fn minres(k: &dyn LinearMap, b: &[f64], tol: f64, max_iter: usize, exec: Execution) -> LinearOutcome {
    let n = k.dim();
    let bnorm = sup_norm(b);
    if bnorm == 0.0 {
        return LinearOutcome { x: vec![0.0; n], iterations: 0, residual: 0.0, converged: true, indefinite: false };
    }
    let target = tol * bnorm;
    let minv: Vec<f64> = k.diag().iter().map(|&d| if d.abs() > 0.0 { 1.0 / d.abs() } else { 1.0 }).collect();
    let mut x = vec![0.0; n];
    let mut r1 = b.to_vec();
    let mut y: Vec<f64> = r1.iter().zip(&minv).map(|(a, m)| a * m).collect();
    let mut beta1 = dot(exec, &r1, &y);
    if beta1 <= 0.0 {
        return LinearOutcome { x, iterations: 0, residual: bnorm, converged: false, indefinite: true };
    }
    beta1 = beta1.sqrt();
    let mut r2 = r1.clone();
    let (mut oldb, mut beta, mut dbar, mut epsln, mut phibar) = (0.0, beta1, 0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut av = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut res = bnorm;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        k.apply(&v, &mut av);
        if it >= 2 {
            for i in 0..n {
                av[i] -= (beta / oldb) * r1[i];
            }
        }
        let alfa = dot(exec, &v, &av);
        for i in 0..n {
            av[i] -= (alfa / beta) * r2[i];
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&av);
        for i in 0..n {
            y[i] = r2[i] * minv[i];
        }
        oldb = beta;
        beta = dot(exec, &r2, &y).max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::MIN_POSITIVE);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let denom = 1.0 / gamma;
        for i in 0..n {
            let w1 = w2[i];
            w2[i] = w[i];
            w[i] = (v[i] - oldeps * w1 - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        if it % 10 == 0 || phibar.abs() < 1e-3 * target || beta == 0.0 {
            k.apply(&x, &mut q);
            res = (0..n).fold(0.0f64, |m, i| m.max((b[i] - q[i]).abs()));
            if res <= target || beta == 0.0 {
                break;
            }
        }
    }
    k.apply(&x, &mut q);
    res = res.min((0..n).fold(0.0f64, |m, i| m.max((b[i] - q[i]).abs())));
    LinearOutcome { x, iterations: it, residual: res, converged: res <= target, indefinite: true }
}

/// CG first, falling back to MINRES on non-positive curvature or stagnation.
pub fn solve_symmetric(k: &dyn LinearMap, b: &[f64], tol: f64, exec: Execution) -> LinearOutcome {
    let max_iter = 20 * k.dim().max(1);
    let cg = conjugate_gradient(k, b, None, tol, max_iter, exec);
    // On a definite operator a stalled CG sits at its round-off floor; MINRES would not do better.
    if cg.converged || !cg.indefinite {
        return cg;
    }
    let mr = minres(k, b, tol, max_iter, exec);
    if mr.converged || mr.residual < cg.residual {
        LinearOutcome { iterations: cg.iterations + mr.iterations, ..mr }
    } else {
        cg
    }
}

type BFn = Arc<dyn Fn(Point, f64) -> f64 + Send + Sync>;
type BzFn = Arc<dyn Fn(Point, f64, Point) -> f64 + Send + Sync>;

/// Nonlinear term `b(x, s)` with its `s`-derivative and validity range `[lo, hi]`.
#[derive(Clone)]
pub struct Nonlinearity {
    pub name: String,
    b: BFn,
    ds: Option<BFn>,
    bz: Option<BzFn>,
    pub lo: f64,
    pub hi: f64,
    /// Caller's claim that `b ≥ 0` on the validity range.
    pub nonnegative: bool,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("name", &self.name)
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("has_derivative", &self.ds.is_some())
            .field("z_dependent", &self.bz.is_some())
            .finish()
    }
}

impl Nonlinearity {
    pub fn new(
        name: impl Into<String>,
        b: impl Fn(Point, f64) -> f64 + Send + Sync + 'static,
        ds: impl Fn(Point, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Nonlinearity {
            name: name.into(),
            b: Arc::new(b),
            ds: Some(Arc::new(ds)),
            bz: None,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            nonnegative: false,
        }
    }

    /// Without a supplied derivative; `ds` falls back to central differences.
    pub fn without_derivative(name: impl Into<String>, b: impl Fn(Point, f64) -> f64 + Send + Sync + 'static) -> Self {
        Nonlinearity {
            name: name.into(),
            b: Arc::new(b),
            ds: None,
            bz: None,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            nonnegative: false,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn with_nonnegative(mut self, claim: bool) -> Self {
        self.nonnegative = claim;
        self
    }

    /// Attaches a gradient-dependent evaluator `b(x, s, z)`.
    pub fn with_z(mut self, bz: impl Fn(Point, f64, Point) -> f64 + Send + Sync + 'static) -> Self {
        self.bz = Some(Arc::new(bz));
        self
    }

    pub fn is_z_dependent(&self) -> bool {
        self.bz.is_some()
    }

    pub fn has_derivative(&self) -> bool {
        self.ds.is_some()
    }

    pub fn valid(&self, s: f64) -> bool {
        s >= self.lo && s <= self.hi
    }

    pub fn eval(&self, x: Point, s: f64) -> f64 {
        (self.b)(x, s)
    }

    pub fn eval_z(&self, x: Point, s: f64, z: Point) -> f64 {
        match &self.bz {
            Some(f) => f(x, s, z),
            None => (self.b)(x, s),
        }
    }

    pub fn ds(&self, x: Point, s: f64) -> f64 {
        match &self.ds {
            Some(d) => d(x, s),
            None => self.fd_ds(x, s),
        }
    }

    /// Central finite difference in `s`, one-sided at the ends of the validity range.
    pub fn fd_ds(&self, x: Point, s: f64) -> f64 {
        let step = 1e-6 * s.abs().max(1e-3);
        let (a, b) = (s - step, s + step);
        if a < self.lo {
            (self.eval(x, b) - self.eval(x, s)) / step
        } else if b > self.hi {
            (self.eval(x, s) - self.eval(x, a)) / step
        } else {
            (self.eval(x, b) - self.eval(x, a)) / (2.0 * step)
        }
    }

    /// Largest relative mismatch between the supplied derivative and central
    /// differences at `probes` random points of `region × [s_lo, s_hi]`.
    pub fn derivative_mismatch(&self, probes: usize, seed: u64, region: [Point; 2], s_range: [f64; 2]) -> f64 {
        let Some(d) = &self.ds else { return 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let x = Point::new(rng.random_range(region[0].x..=region[1].x), rng.random_range(region[0].y..=region[1].y));
            let s = rng.random_range(s_range[0]..=s_range[1]);
            let step = 1e-5 * s.abs().max(1e-2);
            if s - step < self.lo || s + step > self.hi {
                continue;
            }
            let fd = (self.eval(x, s + step) - self.eval(x, s - step)) / (2.0 * step);
            let exact = d(x, s);
            let scale = exact.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((exact - fd).abs() / scale);
        }
        worst
    }

    pub fn constant(c: f64) -> Self {
        Nonlinearity::new(format!("const({c})"), move |_, _| c, |_, _| 0.0)
    }

    /// `s ↦ s^γ` on `s ≥ 0`.
    pub fn power(gamma: f64) -> Self {
        Nonlinearity::new(
            format!("s^{gamma}"),
            move |_, s| if gamma == 0.0 { 1.0 } else { s.powf(gamma) },
            move |_, s| if gamma == 0.0 { 0.0 } else { gamma * s.powf(gamma - 1.0) },
        )
        .with_range(0.0, f64::INFINITY)
        .with_nonnegative(true)
    }

    /// `self + other`.
    pub fn plus(&self, other: &Nonlinearity) -> Nonlinearity {
        self.combine(other, 1.0, "+")
    }

    /// `self − other`.
    pub fn minus(&self, other: &Nonlinearity) -> Nonlinearity {
        self.combine(other, -1.0, "-")
    }

    fn combine(&self, other: &Nonlinearity, sign: f64, op: &str) -> Nonlinearity {
        let (a, b) = (self.clone(), other.clone());
        let (a2, b2) = (self.clone(), other.clone());
        Nonlinearity::new(
            format!("({}){op}({})", self.name, other.name),
            move |x, s| a.eval(x, s) + sign * b.eval(x, s),
            move |x, s| a2.ds(x, s) + sign * b2.ds(x, s),
        )
        .with_range(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    /// `s ↦ self(x, s) + eps·s`.
    pub fn shifted(&self, eps: f64) -> Nonlinearity {
        let (a, a2) = (self.clone(), self.clone());
        Nonlinearity::new(format!("{}+{eps}s", self.name), move |x, s| a.eval(x, s) + eps * s, move |x, s| a2.ds(x, s) + eps)
            .with_range(self.lo, self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Sup norm of the discrete residual at exit.
    pub residual: f64,
    /// Accepted step length of every Newton iteration.
    pub damping: Vec<f64>,
    pub converged: bool,
    pub linear_iterations: usize,
    /// Whether the solution is positive at every interior node.
    pub positive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Clip steps so that iterates stay positive and reject non-positive or collapsed solutions.
    pub require_positive: bool,
    pub linear_tol: f64,
    pub exec: Execution,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-9, max_iter: 60, max_halvings: 30, require_positive: true, linear_tol: 1e-10, exec: Execution::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

fn check_rhs(mask: &DomainMask, rhs: &GridField) -> Result<Vec<f64>, SolverError> {
    let mut out = Vec::with_capacity(mask.interior_count());
    for &k in &mask.interior {
        let v = rhs.node(k);
        if !v.is_finite() {
            return Err(SolverError::NonFiniteRhs(k));
        }
        out.push(v);
    }
    Ok(out)
}

/// Solves `Δu + rhs = 0` with zero Dirichlet data.
pub fn solve_poisson(mask: &Arc<DomainMask>, rhs: &GridField) -> Result<GridField, SolverError> {
    solve_poisson_with(mask, rhs, 1e-10, Execution::default()).map(|(u, _)| u)
}

pub fn solve_poisson_with(
    mask: &Arc<DomainMask>,
    rhs: &GridField,
    tol: f64,
    exec: Execution,
) -> Result<(GridField, SolveReport), SolverError> {
    let op = assemble_laplacian(mask)?;
    let b = check_rhs(mask, rhs)?;
    let zero = vec![0.0; op.n];
    let k = ShiftedNegLaplacian { op: &op, shift: &zero, exec };
    let out = conjugate_gradient(&k, &b, None, tol, 20 * op.n, exec);
    if !out.converged {
        return Err(SolverError::LinearNoConvergence { iterations: out.iterations, residual: out.residual });
    }
    let u = GridField::from_unknowns(mask, &out.x, |_| 0.0).expect("length matches");
    let positive = out.x.iter().all(|&v| v > 0.0);
    let report = SolveReport {
        iterations: 1,
        residual: out.residual,
        damping: vec![1.0],
        converged: true,
        linear_iterations: out.iterations,
        positive,
    };
    Ok((u, report))
}

/// Torsion solution `Δu + 1 = 0`.
pub fn torsion(mask: &Arc<DomainMask>) -> Result<GridField, SolverError> {
    solve_poisson(mask, &GridField::constant(mask, 1.0))
}

/// Residual `Δ_h u + sign·b(x, u)` at interior nodes from the stencil arms.
pub fn semilinear_residual(u: &GridField, b: &Nonlinearity, sign: Sign) -> Vec<f64> {
    let mask = u.mask_arc();
    let lap = stencil_laplacian(u);
    mask.interior
        .iter()
        .zip(lap)
        .map(|(&k, l)| l + sign.factor() * b.eval(mask.grid.node_point(k), u.node(k)))
        .collect()
}

struct NewtonState<'a> {
    op: &'a SparseOperator,
    points: Vec<Point>,
    bc: Vec<f64>,
    b: &'a Nonlinearity,
    sign: f64,
    exec: Execution,
}

impl NewtonState<'_> {
    fn residual(&self, u: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; u.len()];
        self.op.matvec(self.exec, u, &mut r);
        for i in 0..u.len() {
            r[i] += self.bc[i] + self.sign * self.b.eval(self.points[i], u[i]);
        }
        r
    }
}

/// Damped Newton for `Δu + sign·b(x, u) = 0` with zero Dirichlet data.
///
/// The default initial guess is the torsion solution scaled to unit sup norm.
pub fn solve_semilinear(
    mask: &Arc<DomainMask>,
    b: &Nonlinearity,
    sign: Sign,
    init: Option<&GridField>,
    opts: &NewtonOptions,
) -> Result<(GridField, SolveReport), SolverError> {
    let op = assemble_laplacian(mask)?;
    let mut u: Vec<f64> = match init {
        Some(f) => f.interior_values(),
        None => {
            let t = torsion(mask)?;
            let v = t.interior_values();
            let m = sup_norm(&v);
            v.iter().map(|x| x / m).collect()
        }
    };
    if opts.require_positive {
        if let Some((i, &v)) = u.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(SolverError::NonPositiveInit { node: mask.interior[i], value: v });
        }
    }
    let state = NewtonState {
        op: &op,
        points: mask.interior.iter().map(|&k| mask.grid.node_point(k)).collect(),
        bc: vec![0.0; op.n],
        b,
        sign: sign.factor(),
        exec: opts.exec,
    };
    check_validity(mask, b, &u)?;
    let mut f = state.residual(&u);
    let mut fnorm = sup_norm(&f);
    let mut report = SolveReport { iterations: 0, residual: fnorm, damping: Vec::new(), converged: false, linear_iterations: 0, positive: false };
    while fnorm > opts.tol {
        if report.iterations >= opts.max_iter {
            return Err(SolverError::NewtonNoConvergence { iterations: report.iterations, residual: fnorm, tol: opts.tol });
        }
        let shift: Vec<f64> = (0..op.n)
            .map(|i| {
                let d = state.sign * b.ds(state.points[i], u[i]);
                if d.is_finite() { d } else { f64::MAX.sqrt() }
            })
            .collect();
        let k = ShiftedNegLaplacian { op: &op, shift: &shift, exec: opts.exec };
        // Inexact Newton: no need to solve below a tenth of the outer tolerance.
        let rel = opts.linear_tol.max(0.1 * opts.tol / fnorm);
        let lin = solve_symmetric(&k, &f, rel, opts.exec);
        report.linear_iterations += lin.iterations;
        let step = lin.x;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = (0..op.n)
                .map(|i| {
                    let v = u[i] + alpha * step[i];
                    if opts.require_positive { v.max(0.1 * u[i]) } else { v }
                })
                .collect();
            if trial.iter().all(|v| b.valid(*v)) {
                let ft = state.residual(&trial);
                let nt = sup_norm(&ft);
                if nt.is_finite() && nt < fnorm {
                    accepted = Some((trial, ft, nt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, ft, nt)) = accepted else {
            return Err(SolverError::Stagnation { iteration: report.iterations, residual: fnorm });
        };
        u = trial;
        f = ft;
        fnorm = nt;
        report.iterations += 1;
        report.damping.push(alpha);
    }
    report.residual = fnorm;
    report.converged = true;
    report.positive = u.iter().all(|&v| v > 0.0);
    let sup = sup_norm(&u);
    if opts.require_positive {
        if sup <= 1e-8 {
            return Err(SolverError::Degenerate { sup });
        }
        if let Some((i, &v)) = u.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(SolverError::NonPositiveSolution { node: mask.interior[i], value: v });
        }
    }
    let field = GridField::from_unknowns(mask, &u, |_| 0.0).expect("length matches");
    Ok((field, report))
}

fn check_validity(mask: &DomainMask, b: &Nonlinearity, u: &[f64]) -> Result<(), SolverError> {
    match u.iter().position(|v| !b.valid(*v)) {
        Some(i) => Err(SolverError::ExitsValidity { name: b.name.clone(), node: mask.interior[i], value: u[i] }),
        None => Ok(()),
    }
}

/// Solves along a parameter path, each stage starting from the previous solution.
pub fn solve_semilinear_continuation(
    mask: &Arc<DomainMask>,
    family: impl Fn(f64) -> Nonlinearity,
    path: &[f64],
    sign: Sign,
    opts: &NewtonOptions,
) -> Result<(GridField, SolveReport), SolverError> {
    let mut current: Option<GridField> = None;
    let mut total = SolveReport { iterations: 0, residual: 0.0, damping: Vec::new(), converged: false, linear_iterations: 0, positive: false };
    for &t in path {
        let (u, rep) = solve_semilinear(mask, &family(t), sign, current.as_ref(), opts)?;
        total.iterations += rep.iterations;
        total.linear_iterations += rep.linear_iterations;
        total.damping.extend(rep.damping);
        total.residual = rep.residual;
        total.converged = rep.converged;
        total.positive = rep.positive;
        current = Some(u);
    }
    current.map(|u| (u, total)).ok_or_else(|| SolverError::BadParameter("empty continuation path".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub lambda: f64,
    pub rayleigh_quotient: f64,
    pub iterations: usize,
    pub residual: f64,
    pub linear_iterations: usize,
}

/// First Dirichlet eigenpair by inverse power iteration; the eigenfunction
/// is normalized to unit sup norm and positive.
pub fn solve_eigen_first(mask: &Arc<DomainMask>, tol: f64) -> Result<(f64, GridField, EigenReport), SolverError> {
    if mask.interior_count() < 9 {
        return Err(SolverError::TooFewNodes { need: 9, have: mask.interior_count() });
    }
    let exec = Execution::default();
    let op = assemble_laplacian(mask)?;
    let zero = vec![0.0; op.n];
    let k = ShiftedNegLaplacian { op: &op, shift: &zero, exec };
    let rayleigh = |x: &[f64]| {
        let mut y = vec![0.0; x.len()];
        k.apply(x, &mut y);
        dot(exec, x, &y) / dot(exec, x, x)
    };
    let mut x = torsion(mask)?.interior_values();
    let m = sup_norm(&x);
    x.iter_mut().for_each(|v| *v /= m);
    let mut q_prev = rayleigh(&x);
    let mut report = EigenReport { lambda: q_prev, rayleigh_quotient: q_prev, iterations: 0, residual: f64::INFINITY, linear_iterations: 0 };
    let mut ax = vec![0.0; op.n];
    for it in 1..=500 {
        let guess: Vec<f64> = x.iter().map(|v| v / q_prev).collect();
        let lin = conjugate_gradient(&k, &x, Some(&guess), 1e-11, 20 * op.n, exec);
        report.linear_iterations += lin.iterations;
        let mut y = lin.x;
        let m = sup_norm(&y);
        y.iter_mut().for_each(|v| *v /= m);
        let q = rayleigh(&y);
        op.matvec(exec, &y, &mut ax);
        let res = (0..op.n).fold(0.0f64, |acc, i| acc.max((ax[i] + q * y[i]).abs()));
        x = y;
        report.iterations = it;
        report.residual = res;
        report.lambda = q;
        report.rayleigh_quotient = q;
        if (q - q_prev).abs() < tol * q && res <= tol * q {
            if x.iter().any(|&v| v < 0.0) {
                x.iter_mut().for_each(|v| *v = -*v);
            }
            let u = GridField::from_unknowns(mask, &x, |_| 0.0).expect("length matches");
            return Ok((q, u, report));
        }
        q_prev = q;
    }
    Err(SolverError::EigenNoConvergence { iterations: report.iterations })
}

/// Solves the perturbed problem `Δv = b(x, v) + εv` with zero Dirichlet data.
pub fn solve_perturbed(
    mask: &Arc<DomainMask>,
    b: &Nonlinearity,
    eps: f64,
    tol: f64,
) -> Result<(GridField, SolveReport), SolverError> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(SolverError::BadParameter(format!("perturbation {eps} must be nonnegative")));
    }
    let shifted = b.shifted(eps);
    let init = GridField::zeros(mask);
    let opts = NewtonOptions { tol, require_positive: false, ..NewtonOptions::default() };
    solve_semilinear(mask, &shifted, Sign::Minus, Some(&init), &opts)
}
