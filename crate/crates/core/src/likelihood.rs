//! Binomial BTL likelihood over observed judge-item-pair cells.
//!
//! For cell `(k, i, j)` the linear predictor is
//! `eta = gamma_k (mu_i - mu_j) + U_k (V_i - V_j)^T`, the win probability of
//! item `i` is `sigmoid(eta)`, and the negative log-likelihood is
//! `sum n [ -ybar eta + log(1 + exp eta) ]`.

use nalgebra::{DMatrix, DVector};

use crate::data::AggregatedCounts;
use crate::decomposition::{HjaParams, Layout};
use crate::error::{HjaError, Result};

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear predictor without bounds checks.
#[inline]
pub fn eta(p: &HjaParams, k: usize, i: usize, j: usize) -> f64 {
    let mut e = p.gamma[k] * (p.mu[i] - p.mu[j]);
    for m in 0..p.u.ncols() {
        e += p.u[(k, m)] * (p.v[(i, m)] - p.v[(j, m)]);
    }
    e
}

fn check_triple(p: &HjaParams, k: usize, i: usize, j: usize) -> Result<()> {
    if k >= p.n_judges() || i >= p.n_items() || j >= p.n_items() {
        return Err(HjaError::IndexOutOfRange(format!(
            "triple ({k}, {i}, {j}) outside {} judges x {} items",
            p.n_judges(),
            p.n_items()
        )));
    }
    Ok(())
}

/// Probability that judge `k` prefers item `i` over item `j`.
pub fn predict_prob(p: &HjaParams, k: usize, i: usize, j: usize) -> Result<f64> {
    check_triple(p, k, i, j)?;
    Ok(sigmoid(eta(p, k, i, j)))
}

/// Nonzero entries of the ambient gradient of `eta_kij`, as `(flat index, value)`.
///
/// Holds `3 + 3r` entries: `gamma_k`, `mu_i`, `mu_j`, `U_k.`, `V_i.`, `V_j.`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictorGradient {
    pub entries: Vec<(usize, f64)>,
}

impl LinearPredictorGradient {
    pub fn dense(&self, dim: usize) -> DVector<f64> {
        let mut g = DVector::zeros(dim);
        for &(idx, val) in &self.entries {
            g[idx] += val;
        }
        g
    }
}

pub fn linear_predictor_gradient(
    p: &HjaParams,
    k: usize,
    i: usize,
    j: usize,
) -> Result<LinearPredictorGradient> {
    check_triple(p, k, i, j)?;
    Ok(eta_gradient(p, Layout::of(p), k, i, j))
}

pub(crate) fn eta_gradient(
    p: &HjaParams,
    layout: Layout,
    k: usize,
    i: usize,
    j: usize,
) -> LinearPredictorGradient {
    let r = layout.r;
    let mut entries = Vec::with_capacity(3 + 3 * r);
    entries.push((layout.gamma(k), p.mu[i] - p.mu[j]));
    entries.push((layout.mu(i), p.gamma[k]));
    entries.push((layout.mu(j), -p.gamma[k]));
    for m in 0..r {
        entries.push((layout.u(k, m), p.v[(i, m)] - p.v[(j, m)]));
    }
    for m in 0..r {
        entries.push((layout.v(i, m), p.u[(k, m)]));
    }
    for m in 0..r {
        entries.push((layout.v(j, m), -p.u[(k, m)]));
    }
    LinearPredictorGradient { entries }
}

/// Unnormalized negative log-likelihood, summed in sorted cell order.
pub fn nll(p: &HjaParams, counts: &AggregatedCounts) -> f64 {
    counts
        .cells()
        .iter()
        .map(|c| {
            let e = eta(p, c.k, c.i, c.j);
            -c.y * e + c.n * softplus(e)
        })
        .sum()
}

/// Gradient with the same shape as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub gamma: DVector<f64>,
    pub mu: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl ParamGradient {
    pub fn flatten(&self) -> DVector<f64> {
        HjaParams {
            gamma: self.gamma.clone(),
            mu: self.mu.clone(),
            u: self.u.clone(),
            v: self.v.clone(),
        }
        .flatten()
    }
}

/// Exact gradient `sum n (p - ybar) grad eta`.
pub fn nll_gradient(p: &HjaParams, counts: &AggregatedCounts) -> ParamGradient {
    let (kk, nn, r) = (p.n_judges(), p.n_items(), p.rank());
    let mut g = ParamGradient {
        gamma: DVector::zeros(kk),
        mu: DVector::zeros(nn),
        u: DMatrix::zeros(kk, r),
        v: DMatrix::zeros(nn, r),
    };
    for c in counts.cells() {
        let (k, i, j) = (c.k, c.i, c.j);
        let resid = c.n * sigmoid(eta(p, k, i, j)) - c.y;
        g.gamma[k] += resid * (p.mu[i] - p.mu[j]);
        g.mu[i] += resid * p.gamma[k];
        g.mu[j] -= resid * p.gamma[k];
        for m in 0..r {
            g.u[(k, m)] += resid * (p.v[(i, m)] - p.v[(j, m)]);
            g.v[(i, m)] += resid * p.u[(k, m)];
            g.v[(j, m)] -= resid * p.u[(k, m)];
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cell, IdMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_item(n: f64, y: f64) -> AggregatedCounts {
        AggregatedCounts::from_cells(IdMap::synthetic(1, 2), [Cell { k: 0, i: 0, j: 1, n, y }]).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let p = sigmoid(-50.0);
        assert!(p > 0.0 && p < 1e-21);
        assert!(sigmoid(50.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0 && softplus(800.0).is_finite());
        assert!(softplus(-700.0) > 0.0 && softplus(-700.0) < 1e-300);
    }

    #[test]
    fn predict_prob_log3() {
        let mut p = HjaParams::neutral(1, 2, 0);
        p.mu = DVector::from_vec(vec![0.5 * 3f64.ln(), -0.5 * 3f64.ln()]);
        assert!((predict_prob(&p, 0, 0, 1).unwrap() - 0.75).abs() < 1e-15);
        assert!(predict_prob(&p, 1, 0, 1).is_err());
    }

    #[test]
    fn nll_closed_forms() {
        let p = HjaParams::neutral(1, 2, 0);
        assert!((nll(&p, &two_item(1.0, 1.0)) - 2f64.ln()).abs() < 1e-15);

        let mut p = HjaParams::neutral(1, 2, 0);
        p.mu = DVector::from_vec(vec![0.5 * 3f64.ln(), -0.5 * 3f64.ln()]);
        let expect = 100.0 * (-0.75 * 3f64.ln() + 4f64.ln());
        assert!((nll(&p, &two_item(100.0, 75.0)) - expect).abs() < 1e-10);
        assert!((expect - 56.23).abs() < 0.01);
    }

    #[test]
    fn gradient_single_triple_hand_case() {
        // gamma = 0 puts eta at 0 while mu_i - mu_j = 0.6
        let mut p = HjaParams::neutral(1, 2, 0);
        p.gamma[0] = 0.0;
        p.mu = DVector::from_vec(vec![0.3, -0.3]);
        let g = nll_gradient(&p, &two_item(1.0, 1.0));
        assert!((g.gamma[0] - (-0.5 * 0.6)).abs() < 1e-15);
        assert_eq!(g.mu[0], 0.0);
        assert_eq!(g.mu[1], 0.0);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = HjaParams::neutral(2, 4, 1);
        p.mu = DVector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
        p.u = DMatrix::from_fn(2, 1, |_, _| rng.random::<f64>());
        p.v = DMatrix::from_fn(4, 1, |_, _| rng.random::<f64>());
        let mut cells = Vec::new();
        for k in 0..2 {
            for i in 0..4 {
                for j in i + 1..4 {
                    let n = 10.0;
                    cells.push(Cell { k, i, j, n, y: n * sigmoid(eta(&p, k, i, j)) });
                }
            }
        }
        let counts = AggregatedCounts::from_cells(IdMap::synthetic(2, 4), cells).unwrap();
        assert!(nll_gradient(&p, &counts).flatten().amax() < 1e-12);
    }

    #[test]
    fn sparse_gradient_matches_declared_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = HjaParams::neutral(3, 5, 2);
        p.gamma = DVector::from_fn(3, |_, _| rng.random::<f64>() + 0.5);
        p.mu = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
        p.u = DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>() - 0.5);
        p.v = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>() - 0.5);
        let layout = Layout::of(&p);
        let g = linear_predictor_gradient(&p, 1, 0, 3).unwrap();
        assert_eq!(g.entries.len(), 3 + 3 * 2);
        let dense = g.dense(layout.dim());
        let x = p.flatten();
        let h = 1e-6;
        for idx in 0..layout.dim() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (eta(&HjaParams::unflatten(layout, &xp), 1, 0, 3)
                - eta(&HjaParams::unflatten(layout, &xm), 1, 0, 3))
                / (2.0 * h);
            assert!((fd - dense[idx]).abs() < 1e-8, "index {idx}");
            let declared = g.entries.iter().any(|&(e, _)| e == idx);
            if !declared {
                assert!(fd.abs() < 1e-10);
            }
        }
    }
}
