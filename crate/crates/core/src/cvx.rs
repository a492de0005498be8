//! A small smooth convex-program solver.
//!
//! Programs have a linear objective and constraints `g_i(x) <= 0` where each
//! `g_i` is a [`SmoothFn`]: a constant, an affine part and a sum of a few
//! closed-form terms whose gradients and Hessians are known analytically.
//! [`solve`] runs a log-barrier interior-point method with damped Newton
//! centering steps.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvxError {
    #[error("start point violates constraint {index} (value {value:e})")]
    InfeasibleStart { index: usize, value: f64 },
    #[error("constraint {0} is not convex")]
    NotConvex(usize),
    #[error("dimension mismatch: program has {expected} variables, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// One closed-form nonlinear term of a [`SmoothFn`].
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// `coef * sqrt(x)`; convex for `coef <= 0`.
    Sqrt { var: usize, coef: f64 },
    /// `coef * ln(x)`; convex for `coef <= 0`.
    Ln { var: usize, coef: f64 },
    /// `coef * (x - center)^2`; convex for `coef >= 0`.
    Square { var: usize, center: f64, coef: f64 },
    /// `coef * ln(offset + sum_j a_j / x_j)` with `a_j >= 0`, `offset > 0`;
    /// convex for `coef >= 0`.
    LnSumInv {
        coef: f64,
        offset: f64,
        parts: Vec<(usize, f64)>,
    },
    /// `coef * (extra + sum_j (x_j - c_j)^2) / (den_scale * x_den)`; convex
    /// for `coef >= 0`, `extra >= 0`, `den_scale > 0` on `x_den > 0`.
    QuadOverLin {
        coef: f64,
        num: Vec<(usize, f64)>,
        extra: f64,
        den: usize,
        den_scale: f64,
    },
}

impl Term {
    fn is_convex(&self) -> bool {
        match self {
            Term::Sqrt { coef, .. } | Term::Ln { coef, .. } => *coef <= 0.0,
            Term::Square { coef, .. } => *coef >= 0.0,
            Term::LnSumInv { coef, offset, parts } => {
                *coef >= 0.0 && *offset > 0.0 && parts.iter().all(|(_, a)| *a >= 0.0)
            }
            Term::QuadOverLin {
                coef, extra, den_scale, ..
            } => *coef >= 0.0 && *extra >= 0.0 && *den_scale > 0.0,
        }
    }

    fn vars(&self, out: &mut Vec<usize>) {
        match self {
            Term::Sqrt { var, .. } | Term::Ln { var, .. } | Term::Square { var, .. } => out.push(*var),
            Term::LnSumInv { parts, .. } => out.extend(parts.iter().map(|p| p.0)),
            Term::QuadOverLin { num, den, .. } => {
                out.extend(num.iter().map(|p| p.0));
                out.push(*den);
            }
        }
    }

    /// NaN outside the domain.
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Term::Sqrt { var, coef } => {
                let v = x[*var];
                if v < 0.0 {
                    f64::NAN
                } else {
                    coef * v.sqrt()
                }
            }
            Term::Ln { var, coef } => {
                let v = x[*var];
                if v <= 0.0 {
                    f64::NAN
                } else {
                    coef * v.ln()
                }
            }
            Term::Square { var, center, coef } => {
                let d = x[*var] - center;
                coef * d * d
            }
            Term::LnSumInv { coef, offset, parts } => {
                let mut phi = *offset;
                for &(j, a) in parts {
                    if x[j] <= 0.0 {
                        return f64::NAN;
                    }
                    phi += a / x[j];
                }
                coef * phi.ln()
            }
            Term::QuadOverLin {
                coef,
                num,
                extra,
                den,
                den_scale,
            } => {
                let z = x[*den];
                if z <= 0.0 {
                    return f64::NAN;
                }
                let n: f64 = extra + num.iter().map(|&(j, c)| (x[j] - c) * (x[j] - c)).sum::<f64>();
                coef * n / (den_scale * z)
            }
        }
    }

    fn add_gradient(&self, x: &[f64], scale: f64, g: &mut [f64]) {
        match self {
            Term::Sqrt { var, coef } => g[*var] += scale * coef * 0.5 / x[*var].sqrt(),
            Term::Ln { var, coef } => g[*var] += scale * coef / x[*var],
            Term::Square { var, center, coef } => g[*var] += scale * 2.0 * coef * (x[*var] - center),
            Term::LnSumInv { coef, offset, parts } => {
                let phi = offset + parts.iter().map(|&(j, a)| a / x[j]).sum::<f64>();
                for &(j, a) in parts {
                    g[j] -= scale * coef * a / (x[j] * x[j] * phi);
                }
            }
            Term::QuadOverLin {
                coef,
                num,
                extra,
                den,
                den_scale,
            } => {
                let z = x[*den];
                let mut n = *extra;
                for &(j, c) in num {
                    let d = x[j] - c;
                    n += d * d;
                    g[j] += scale * coef * 2.0 * d / (den_scale * z);
                }
                g[*den] -= scale * coef * n / (den_scale * z * z);
            }
        }
    }

    fn add_hessian(&self, x: &[f64], scale: f64, h: &mut DMatrix<f64>) {
        match self {
            Term::Sqrt { var, coef } => {
                let v = x[*var];
                h[(*var, *var)] -= scale * coef * 0.25 / (v * v.sqrt());
            }
            Term::Ln { var, coef } => {
                let v = x[*var];
                h[(*var, *var)] -= scale * coef / (v * v);
            }
            Term::Square { var, coef, .. } => h[(*var, *var)] += scale * 2.0 * coef,
            Term::LnSumInv { coef, offset, parts } => {
                let phi = offset + parts.iter().map(|&(j, a)| a / x[j]).sum::<f64>();
                for &(j, a) in parts {
                    let xj = x[j];
                    h[(j, j)] += scale * coef * 2.0 * a / (xj * xj * xj * phi);
                    let dj = a / (xj * xj);
                    for &(l, b) in parts {
                        let dl = b / (x[l] * x[l]);
                        h[(j, l)] -= scale * coef * dj * dl / (phi * phi);
                    }
                }
            }
            Term::QuadOverLin {
                coef,
                num,
                extra,
                den,
                den_scale,
            } => {
                let z = x[*den];
                let s = scale * coef / den_scale;
                let mut n = *extra;
                for &(j, c) in num {
                    let d = x[j] - c;
                    n += d * d;
                    h[(j, j)] += s * 2.0 / z;
                    h[(j, *den)] -= s * 2.0 * d / (z * z);
                    h[(*den, j)] -= s * 2.0 * d / (z * z);
                }
                h[(*den, *den)] += s * 2.0 * n / (z * z * z);
            }
        }
    }

    fn scaled(mut self, s: f64) -> Term {
        match &mut self {
            Term::Sqrt { coef, .. }
            | Term::Ln { coef, .. }
            | Term::Square { coef, .. }
            | Term::LnSumInv { coef, .. }
            | Term::QuadOverLin { coef, .. } => *coef *= s,
        }
        self
    }
}

/// `constant + sum a_j x_j + sum terms`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SmoothFn {
    pub constant: f64,
    pub linear: Vec<(usize, f64)>,
    pub terms: Vec<Term>,
}

impl SmoothFn {
    pub fn constant(c: f64) -> Self {
        SmoothFn {
            constant: c,
            ..Default::default()
        }
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_linear(&mut self, var: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.linear.push((var, coef));
        }
        self
    }

    pub fn add_term(&mut self, term: Term) -> &mut Self {
        self.terms.push(term);
        self
    }

    /// `self + other`.
    pub fn add(&mut self, other: &SmoothFn) -> &mut Self {
        self.constant += other.constant;
        self.linear.extend_from_slice(&other.linear);
        self.terms.extend(other.terms.iter().cloned());
        self
    }

    pub fn scaled(&self, s: f64) -> SmoothFn {
        SmoothFn {
            constant: self.constant * s,
            linear: self.linear.iter().map(|&(j, a)| (j, a * s)).collect(),
            terms: self.terms.iter().cloned().map(|t| t.scaled(s)).collect(),
        }
    }

    pub fn is_convex(&self) -> bool {
        self.terms.iter().all(Term::is_convex)
    }

    /// Sorted, deduplicated variable indices this function depends on.
    pub fn support(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.linear.iter().map(|p| p.0).collect();
        for t in &self.terms {
            t.vars(&mut v);
        }
        v.sort_unstable();
        v.dedup();
        v
    }

    /// NaN outside the domain of any term.
    pub fn value(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().map(|&(j, a)| a * x[j]).sum();
        self.constant + lin + self.terms.iter().map(|t| t.value(x)).sum::<f64>()
    }

    /// Adds `scale * grad` into `g`.
    pub fn add_gradient(&self, x: &[f64], scale: f64, g: &mut [f64]) {
        for &(j, a) in &self.linear {
            g[j] += scale * a;
        }
        for t in &self.terms {
            t.add_gradient(x, scale, g);
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.add_gradient(x, 1.0, &mut g);
        g
    }

    /// Adds `scale * hessian` into `h`.
    pub fn add_hessian(&self, x: &[f64], scale: f64, h: &mut DMatrix<f64>) {
        for t in &self.terms {
            t.add_hessian(x, scale, h);
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(x.len(), x.len());
        self.add_hessian(x, 1.0, &mut h);
        h
    }
}

/// `minimize cost . x  subject to  g_i(x) <= 0`.
#[derive(Debug, Clone)]
pub struct Program {
    pub cost: Vec<f64>,
    pub constraints: Vec<SmoothFn>,
}

impl Program {
    pub fn new(n: usize) -> Self {
        Program {
            cost: vec![0.0; n],
            constraints: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.cost.len()
    }

    pub fn add_constraint(&mut self, g: SmoothFn) -> usize {
        self.constraints.push(g);
        self.constraints.len() - 1
    }

    /// `x_var >= lb`.
    pub fn add_lower_bound(&mut self, var: usize, lb: f64) -> usize {
        let mut g = SmoothFn::constant(lb);
        g.add_linear(var, -1.0);
        self.add_constraint(g)
    }

    /// `x_var <= ub`.
    pub fn add_upper_bound(&mut self, var: usize, ub: f64) -> usize {
        let mut g = SmoothFn::constant(-ub);
        g.add_linear(var, 1.0);
        self.add_constraint(g)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest constraint value; NaN if any constraint is out of its domain.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for g in &self.constraints {
            let v = g.value(x);
            if v.is_nan() {
                return f64::NAN;
            }
            m = m.max(v);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierOptions {
    /// Target bound on the duality gap `m / t`.
    pub tol: f64,
    /// Barrier parameter growth factor.
    pub mu: f64,
    /// Armijo fraction.
    pub alpha: f64,
    /// Backtracking factor.
    pub beta: f64,
    pub t0: f64,
    /// Centering stops when `lambda^2 / 2` falls below this.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_centering: usize,
    pub regularization: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            tol: 1e-7,
            mu: 20.0,
            alpha: 0.25,
            beta: 0.5,
            t0: 1.0,
            newton_tol: 1e-9,
            max_newton: 80,
            max_centering: 40,
            regularization: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    /// The line search or factorization stalled; `x` is the last (strictly
    /// feasible) iterate.
    NumericalFailure,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub status: Status,
    pub objective: f64,
    /// `m / t` at the last barrier parameter.
    pub gap_bound: f64,
    /// `|| c + sum lambda_i grad g_i ||_inf` with `lambda_i = 1 / (-t g_i)`.
    pub kkt_residual: f64,
    pub newton_steps: usize,
}

struct Barrier<'a> {
    program: &'a Program,
    supports: Vec<Vec<usize>>,
}

impl<'a> Barrier<'a> {
    fn new(program: &'a Program) -> Self {
        Barrier {
            program,
            supports: program.constraints.iter().map(SmoothFn::support).collect(),
        }
    }

    /// Constraint values, or None if any is nonnegative or undefined.
    fn slacks(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.program.constraints.len());
        for g in &self.program.constraints {
            let v = g.value(x);
            if !(v < 0.0) {
                return None;
            }
            out.push(v);
        }
        Some(out)
    }

    /// Gradient and Hessian of `t c.x - sum ln(-g_i)`.
    fn derivatives(&self, x: &[f64], gvals: &[f64], t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.len();
        let mut grad = DVector::from_iterator(n, self.program.cost.iter().map(|c| t * c));
        let mut hess = DMatrix::zeros(n, n);
        let mut scratch = vec![0.0; n];
        for ((g, &val), sup) in self.program.constraints.iter().zip(gvals).zip(&self.supports) {
            let inv = -1.0 / val;
            for &j in sup {
                scratch[j] = 0.0;
            }
            g.add_gradient(x, 1.0, &mut scratch);
            for &j in sup {
                grad[j] += inv * scratch[j];
            }
            for &a in sup {
                let ga = scratch[a] * inv;
                if ga == 0.0 {
                    continue;
                }
                for &b in sup {
                    hess[(a, b)] += ga * scratch[b] * inv;
                }
            }
            g.add_hessian(x, inv, &mut hess);
        }
        (grad, hess)
    }

    fn kkt_residual(&self, x: &[f64], gvals: &[f64], t: f64) -> f64 {
        let mut r = self.program.cost.clone();
        for (g, &val) in self.program.constraints.iter().zip(gvals) {
            g.add_gradient(x, 1.0 / (-t * val), &mut r);
        }
        r.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Solves `H d = -grad` with symmetric diagonal scaling, adding diagonal
/// regularization when the Cholesky factorization fails.
fn newton_direction(hess: DMatrix<f64>, grad: &DVector<f64>, reg0: f64) -> Option<DVector<f64>> {
    let n = grad.len();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = hess[(i, i)];
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = hess;
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let rhs = DVector::from_iterator(n, (0..n).map(|i| -grad[i] * scale[i]));
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut m = scaled.clone();
        if reg > 0.0 {
            for i in 0..n {
                m[(i, i)] += reg;
            }
        }
        if let Some(ch) = m.cholesky() {
            let y = ch.solve(&rhs);
            if y.iter().all(|v| v.is_finite()) {
                return Some(DVector::from_iterator(n, (0..n).map(|i| y[i] * scale[i])));
            }
        }
        reg = if reg == 0.0 { reg0 } else { reg * 100.0 };
    }
    None
}

const STALL_DECREMENT: f64 = 1e-6;

/// Log-barrier interior-point method. `x0` must be strictly feasible.
pub fn solve(program: &Program, x0: &[f64], opts: &BarrierOptions) -> Result<Solution, CvxError> {
    let n = program.dim();
    if x0.len() != n {
        return Err(CvxError::Dimension {
            expected: n,
            got: x0.len(),
        });
    }
    for (i, g) in program.constraints.iter().enumerate() {
        if !g.is_convex() {
            return Err(CvxError::NotConvex(i));
        }
        let v = g.value(x0);
        if !(v < 0.0) {
            return Err(CvxError::InfeasibleStart { index: i, value: v });
        }
    }

    let barrier = Barrier::new(program);
    let m = program.constraints.len().max(1) as f64;
    let mut x = x0.to_vec();
    let mut gvals = barrier.slacks(&x).expect("checked above");
    let mut t = opts.t0;
    let mut newton_steps = 0;
    let mut status = Status::IterationLimit;

    'outer: for _ in 0..opts.max_centering {
        for _ in 0..opts.max_newton {
            let (grad, hess) = barrier.derivatives(&x, &gvals, t);
            let Some(dx) = newton_direction(hess, &grad, opts.regularization) else {
                status = Status::NumericalFailure;
                break 'outer;
            };
            let slope = grad.dot(&dx);
            let decrement = -slope;
            if !(decrement > 0.0) || decrement * 0.5 <= opts.newton_tol {
                break;
            }
            newton_steps += 1;

            let mut s = 1.0;
            let mut candidate = vec![0.0; n];
            let mut accepted = None;
            while s > 1e-20 {
                for i in 0..n {
                    candidate[i] = x[i] + s * dx[i];
                }
                if let Some(gnew) = barrier.slacks(&candidate) {
                    // Barrier change evaluated as a difference to avoid
                    // cancellation against the large t * c.x term.
                    let lin: f64 = program.cost.iter().zip(dx.iter()).map(|(c, d)| c * d).sum();
                    let log_change: f64 = gnew.iter().zip(&gvals).map(|(a, b)| (a / b).ln()).sum();
                    let change = t * s * lin - log_change;
                    if change <= opts.alpha * s * slope {
                        accepted = Some(gnew);
                        break;
                    }
                }
                s *= opts.beta;
            }
            match accepted {
                Some(gnew) => {
                    x.copy_from_slice(&candidate);
                    gvals = gnew;
                }
                // Rounding noise hides the decrease near the center.
                None if decrement < STALL_DECREMENT => break,
                None => {
                    status = Status::NumericalFailure;
                    break 'outer;
                }
            }
        }
        if m / t < opts.tol {
            status = Status::Optimal;
            break;
        }
        t *= opts.mu;
    }

    Ok(Solution {
        objective: program.objective(&x),
        kkt_residual: barrier.kkt_residual(&x, &gvals, t),
        gap_bound: m / t,
        x,
        status,
        newton_steps,
    })
}
