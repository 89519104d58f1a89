//! Unconstrained minimizers for the small smooth convex subproblems.
//!
//! Both methods stop on a caller-supplied gradient norm, so that affine-constrained
//! problems solved in eliminated coordinates can still test the projected gradient
//! of the original problem.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

/// One evaluation of the objective.
pub struct Eval {
    pub value: f64,
    pub grad: DVector<f64>,
    /// Norm compared against the tolerance.
    pub stop_norm: f64,
}

pub trait SmoothObjective {
    fn dim(&self) -> usize;
    fn value(&self, z: &DVector<f64>) -> f64;
    fn eval(&self, z: &DVector<f64>) -> Eval;
    /// Exact Hessian; only Newton needs it.
    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub z: DVector<f64>,
    pub value: f64,
    pub stop_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Backtracking Armijo search along `d`. A step whose predicted decrease is below
/// the rounding noise of `f` is accepted when it does not increase `f` beyond that noise.
fn backtrack<O: SmoothObjective>(
    obj: &O,
    z: &DVector<f64>,
    f: f64,
    slope: f64,
    d: &DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let noise = 1e-13 * (1.0 + f.abs());
    let mut t = 1.0;
    for _ in 0..MAX_HALVINGS {
        let trial = z + d * t;
        let ft = obj.value(&trial);
        if ft.is_finite() {
            if ft <= f + ARMIJO_C * t * slope {
                return Some((trial, ft));
            }
            if (t * slope).abs() < noise && ft <= f + noise {
                return Some((trial, ft));
            }
        }
        t *= 0.5;
    }
    None
}

/// Damped Newton with exact Hessian and Armijo backtracking.
pub fn newton<O: SmoothObjective>(obj: &O, z0: DVector<f64>, opts: MinimizeOptions) -> Minimum {
    let mut z = z0;
    let mut e = obj.eval(&z);
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if e.stop_norm < opts.tol {
            break;
        }
        iterations += 1;
        let h = obj.hessian(&z);
        let d = match newton_direction(&h, &e.grad) {
            Some(d) => d,
            None => -e.grad.clone(),
        };
        let mut slope = e.grad.dot(&d);
        let d = if slope < 0.0 {
            d
        } else {
            slope = -e.grad.norm_squared();
            -e.grad.clone()
        };
        match backtrack(obj, &z, e.value, slope, &d) {
            Some((next, _)) => {
                z = next;
                e = obj.eval(&z);
            }
            None => break,
        }
    }
    Minimum {
        converged: e.stop_norm < opts.tol,
        value: e.value,
        stop_norm: e.stop_norm,
        z,
        iterations,
    }
}

/// Solve `H d = -g`, adding a diagonal shift if the Cholesky factorization fails.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let scale = h.diagonal().amax().max(1e-12);
    let mut shift = 0.0;
    for _ in 0..12 {
        let mut hs = h.clone();
        for i in 0..n {
            hs[(i, i)] += shift;
        }
        if let Some(ch) = hs.cholesky() {
            return Some(-ch.solve(g));
        }
        shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
    }
    None
}

/// Limited-memory BFGS with backtracking line search.
pub fn lbfgs<O: SmoothObjective>(
    obj: &O,
    z0: DVector<f64>,
    opts: MinimizeOptions,
    memory: usize,
) -> Minimum {
    let mut z = z0;
    let mut e = obj.eval(&z);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if e.stop_norm < opts.tol {
            break;
        }
        iterations += 1;
        // two-loop recursion
        let mut q = e.grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| s.dot(y) / y.norm_squared())
            .unwrap_or_else(|| 1.0 / e.grad.norm().max(1.0));
        let mut d = q * gamma;
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&d);
            d += s * (a - b);
        }
        d.neg_mut();
        let mut slope = e.grad.dot(&d);
        if slope >= 0.0 {
            history.clear();
            d = -e.grad.clone() / e.grad.norm().max(1.0);
            slope = e.grad.dot(&d);
        }
        let Some((next, _)) = backtrack(obj, &z, e.value, slope, &d) else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let next_e = obj.eval(&next);
        let s = &next - &z;
        let y = &next_e.grad - &e.grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        z = next;
        e = next_e;
    }
    Minimum {
        converged: e.stop_norm < opts.tol,
        value: e.value,
        stop_norm: e.stop_norm,
        z,
        iterations,
    }
}
