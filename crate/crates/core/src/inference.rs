//! Plug-in Fisher information, the tangent chart of the constraint manifold, and
//! delta-method Wald intervals.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{check_connectivity, AggregatedCounts, GraphReport};
use crate::decomposition::{HjaParams, Layout};
use crate::error::{HjaError, Result};
use crate::likelihood::{eta, eta_gradient, sigmoid};
use crate::linalg::{null_space, sym_eigenvalues};
use crate::solver::FitResult;

/// Relative eigenvalue floor below which the chart information counts as singular.
pub const SINGULAR_REL_TOL: f64 = 1e-10;
/// Leverage targets are rejected at or below this norm.
pub const LEVERAGE_SMOOTH_MIN: f64 = 1e-8;
const NULL_SPACE_REL_TOL: f64 = 1e-10;

/// Per-observation Fisher information in the ambient `(gamma, mu, U, V)` coordinates.
#[derive(Debug, Clone)]
pub struct FisherInfo {
    pub ambient: DMatrix<f64>,
    pub n_total: f64,
    pub graph: GraphReport,
}

/// `sum (n_kij / n) p (1 - p) g g^T`, accumulated cell by cell in sorted order.
pub fn fisher_info(params: &HjaParams, counts: &AggregatedCounts) -> FisherInfo {
    let layout = Layout::of(params);
    let dim = layout.dim();
    let n_total = counts.n_total();
    let mut ambient = DMatrix::zeros(dim, dim);
    for c in counts.cells() {
        let p = sigmoid(eta(params, c.k, c.i, c.j));
        let w = c.n / n_total * p * (1.0 - p);
        let g = eta_gradient(params, layout, c.k, c.i, c.j);
        for &(a, ga) in &g.entries {
            for &(b, gb) in &g.entries {
                ambient[(a, b)] += w * ga * gb;
            }
        }
    }
    FisherInfo { ambient, n_total, graph: check_connectivity(counts) }
}

#[derive(Debug, Clone)]
pub struct TangentBasis {
    /// Orthonormal columns spanning the null space of the constraint Jacobian.
    pub basis: DMatrix<f64>,
    pub d_free: usize,
}

/// Number of free parameters of the rank-`r` model.
pub fn free_dimension(n_judges: usize, n_items: usize, rank: usize) -> usize {
    (n_judges - 1) + (n_items - 1) + rank * (n_judges + n_items - rank - 3)
}

/// Jacobian of every canonical equality constraint at `params`.
///
/// Rows: `1^T mu`, `V^T 1`, `1^T U`, `1^T gamma`, `mu^T V`, the upper triangle of
/// `V^T V` with its diagonal, and the strict upper triangle of `U^T U`. With
/// `fix_gamma`, one extra row per judge pins `gamma_k`.
pub fn constraint_jacobian(params: &HjaParams, fix_gamma: bool) -> DMatrix<f64> {
    let l = Layout::of(params);
    let (kk, nn, r) = (l.k, l.n, l.r);
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let blank = || DVector::zeros(l.dim());

    let mut row = blank();
    for i in 0..nn {
        row[l.mu(i)] = 1.0;
    }
    rows.push(row);
    for m in 0..r {
        let mut row = blank();
        for i in 0..nn {
            row[l.v(i, m)] = 1.0;
        }
        rows.push(row);
    }
    for m in 0..r {
        let mut row = blank();
        for k in 0..kk {
            row[l.u(k, m)] = 1.0;
        }
        rows.push(row);
    }
    let mut row = blank();
    for k in 0..kk {
        row[l.gamma(k)] = 1.0;
    }
    rows.push(row);
    for m in 0..r {
        let mut row = blank();
        for i in 0..nn {
            row[l.mu(i)] = params.v[(i, m)];
            row[l.v(i, m)] = params.mu[i];
        }
        rows.push(row);
    }
    for a in 0..r {
        for b in a..r {
            let mut row = blank();
            for i in 0..nn {
                row[l.v(i, a)] += params.v[(i, b)];
                row[l.v(i, b)] += params.v[(i, a)];
            }
            rows.push(row);
        }
    }
    for a in 0..r {
        for b in a + 1..r {
            let mut row = blank();
            for k in 0..kk {
                row[l.u(k, a)] += params.u[(k, b)];
                row[l.u(k, b)] += params.u[(k, a)];
            }
            rows.push(row);
        }
    }
    if fix_gamma {
        for k in 0..kk {
            let mut row = blank();
            row[l.gamma(k)] = 1.0;
            rows.push(row);
        }
    }
    DMatrix::from_fn(rows.len(), l.dim(), |a, b| rows[a][b])
}

pub fn tangent_basis(params: &HjaParams) -> Result<TangentBasis> {
    tangent_basis_with(params, false)
}

/// Tangent basis, optionally with every `gamma_k` held fixed (the pooled model).
pub fn tangent_basis_with(params: &HjaParams, fix_gamma: bool) -> Result<TangentBasis> {
    params.check_dims()?;
    let (kk, nn, r) = (params.n_judges(), params.n_items(), params.rank());
    let c = constraint_jacobian(params, fix_gamma);
    let expected_rank = 2 + 3 * r + r * r + if fix_gamma { kk - 1 } else { 0 };
    let (basis, rank) = null_space(&c, NULL_SPACE_REL_TOL);
    if rank != expected_rank {
        return Err(HjaError::Chart(format!(
            "constraint Jacobian has rank {rank}, expected {expected_rank}"
        )));
    }
    let d_free = basis.ncols();
    debug_assert_eq!(
        d_free,
        free_dimension(kk, nn, r) - if fix_gamma { kk - 1 } else { 0 }
    );
    Ok(TangentBasis { basis, d_free })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    ConsensusContrast { i: usize, j: usize },
    JudgeContrast { k: usize, i: usize, j: usize },
    Gamma { k: usize },
    PairwiseProb { k: usize, i: usize, j: usize },
    ScoreEntry { k: usize, i: usize },
    Leverage { k: usize },
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::ConsensusContrast { i, j } => write!(f, "consensus_contrast({i},{j})"),
            Self::JudgeContrast { k, i, j } => write!(f, "judge_contrast({k},{i},{j})"),
            Self::Gamma { k } => write!(f, "gamma({k})"),
            Self::PairwiseProb { k, i, j } => write!(f, "pairwise_prob({k},{i},{j})"),
            Self::ScoreEntry { k, i } => write!(f, "score_entry({k},{i})"),
            Self::Leverage { k } => write!(f, "leverage({k})"),
        }
    }
}

impl TargetSpec {
    fn check(&self, p: &HjaParams) -> Result<()> {
        let (kk, nn) = (p.n_judges(), p.n_items());
        let (ks, is): (Vec<usize>, Vec<usize>) = match *self {
            Self::ConsensusContrast { i, j } => (vec![], vec![i, j]),
            Self::JudgeContrast { k, i, j } | Self::PairwiseProb { k, i, j } => (vec![k], vec![i, j]),
            Self::Gamma { k } | Self::Leverage { k } => (vec![k], vec![]),
            Self::ScoreEntry { k, i } => (vec![k], vec![i]),
        };
        if ks.iter().any(|&k| k >= kk) || is.iter().any(|&i| i >= nn) {
            return Err(HjaError::IndexOutOfRange(format!("target {self} outside {kk} judges x {nn} items")));
        }
        Ok(())
    }

    /// Point estimate and ambient gradient at `p`.
    pub fn evaluate(&self, p: &HjaParams) -> Result<(f64, DVector<f64>)> {
        self.check(p)?;
        let l = Layout::of(p);
        let r = l.r;
        let mut a = DVector::zeros(l.dim());
        let value = match *self {
            Self::ConsensusContrast { i, j } => {
                a[l.mu(i)] += 1.0;
                a[l.mu(j)] -= 1.0;
                p.mu[i] - p.mu[j]
            }
            Self::JudgeContrast { k, i, j } => {
                a = eta_gradient(p, l, k, i, j).dense(l.dim());
                eta(p, k, i, j)
            }
            Self::Gamma { k } => {
                a[l.gamma(k)] = 1.0;
                p.gamma[k]
            }
            Self::PairwiseProb { k, i, j } => {
                let q = sigmoid(eta(p, k, i, j));
                a = eta_gradient(p, l, k, i, j).dense(l.dim()) * (q * (1.0 - q));
                q
            }
            Self::ScoreEntry { k, i } => {
                a[l.gamma(k)] = p.mu[i];
                a[l.mu(i)] = p.gamma[k];
                let mut s = p.gamma[k] * p.mu[i];
                for m in 0..r {
                    a[l.u(k, m)] = p.v[(i, m)];
                    a[l.v(i, m)] = p.u[(k, m)];
                    s += p.u[(k, m)] * p.v[(i, m)];
                }
                s
            }
            Self::Leverage { k } => {
                let w: DVector<f64> = &p.v * p.u.row(k).transpose();
                let h = w.norm();
                if h <= LEVERAGE_SMOOTH_MIN {
                    return Err(HjaError::NonSmoothTarget(format!(
                        "leverage of judge {k} is {h:e}; the norm is not differentiable there"
                    )));
                }
                for m in 0..r {
                    a[l.u(k, m)] = w.dot(&p.v.column(m)) / h;
                    for i in 0..l.n {
                        a[l.v(i, m)] = w[i] * p.u[(k, m)] / h;
                    }
                }
                h
            }
        };
        Ok((value, a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub target: String,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Two-sided standard normal quantile for confidence `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(HjaError::Validation(format!("confidence level {level} outside (0, 1)")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// Shared factorization for many interval requests at one fitted point.
#[derive(Debug, Clone)]
pub struct InferenceEngine {
    params: HjaParams,
    /// `B (B^T I B)^{-1} B^T / n`.
    covariance: DMatrix<f64>,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl InferenceEngine {
    pub fn new(params: &HjaParams, counts: &AggregatedCounts) -> Result<Self> {
        Self::with_options(params, counts, false)
    }

    /// With `fix_gamma`, inference treats `gamma` as known, as in the pooled model.
    pub fn with_options(params: &HjaParams, counts: &AggregatedCounts, fix_gamma: bool) -> Result<Self> {
        let info = fisher_info(params, counts);
        let basis = tangent_basis_with(params, fix_gamma)?;
        Self::from_parts(params, &info, &basis)
    }

    pub fn from_parts(params: &HjaParams, info: &FisherInfo, basis: &TangentBasis) -> Result<Self> {
        let b = &basis.basis;
        if b.nrows() != info.ambient.nrows() {
            return Err(HjaError::DimensionMismatch(format!(
                "basis has {} rows, information is {}-dimensional",
                b.nrows(),
                info.ambient.nrows()
            )));
        }
        let mut chart = b.transpose() * &info.ambient * b;
        chart = (&chart + chart.transpose()) * 0.5;
        let eig = sym_eigenvalues(&chart);
        let (min_eig, max_eig) = match (eig.first(), eig.last()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => (0.0, 0.0),
        };
        if chart.nrows() > 0 && !(max_eig > 0.0 && min_eig >= SINGULAR_REL_TOL * max_eig) {
            return Err(HjaError::SingularInformation {
                min_eig,
                max_eig,
                graph: Some(Box::new(info.graph.clone())),
            });
        }
        let inv = match chart.clone().cholesky() {
            Some(ch) => ch.inverse(),
            None => {
                return Err(HjaError::SingularInformation {
                    min_eig,
                    max_eig,
                    graph: Some(Box::new(info.graph.clone())),
                })
            }
        };
        let covariance = b * inv * b.transpose() / info.n_total;
        Ok(Self { params: params.clone(), covariance, min_eig, max_eig })
    }

    pub fn params(&self) -> &HjaParams {
        &self.params
    }

    /// Standard error of a smooth function with ambient gradient `a`.
    pub fn se(&self, a: &DVector<f64>) -> f64 {
        a.dot(&(&self.covariance * a)).max(0.0).sqrt()
    }

    pub fn interval(&self, target: TargetSpec, level: f64) -> Result<Interval> {
        let z = normal_quantile(level)?;
        let (estimate, a) = target.evaluate(&self.params)?;
        let se = self.se(&a);
        Ok(Interval {
            target: target.to_string(),
            estimate,
            se,
            lower: estimate - z * se,
            upper: estimate + z * se,
            level,
        })
    }

    /// Intervals for every `S_ki`, row-major in `(k, i)`.
    pub fn score_intervals(&self, level: f64) -> Result<Vec<Interval>> {
        let (kk, nn) = (self.params.n_judges(), self.params.n_items());
        let mut out = Vec::with_capacity(kk * nn);
        for k in 0..kk {
            for i in 0..nn {
                out.push(self.interval(TargetSpec::ScoreEntry { k, i }, level)?);
            }
        }
        Ok(out)
    }
}

/// Wald interval for one target at a fitted point.
pub fn target_ci(
    fit: &FitResult,
    info: &FisherInfo,
    basis: &TangentBasis,
    target: TargetSpec,
    level: f64,
) -> Result<Interval> {
    InferenceEngine::from_parts(&fit.params, info, basis)?.interval(target, level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverageRow {
    pub judge: usize,
    pub h: f64,
    pub rho: f64,
}

/// Residual leverage `h_k = ||(U V^T)_k||` and its size relative to the consensus term.
pub fn leverage_diagnostics(params: &HjaParams, eps: f64) -> Vec<LeverageRow> {
    let uvt = params.uvt();
    let mu_norm = params.mu.norm();
    (0..params.n_judges())
        .map(|k| {
            let h = uvt.row(k).norm();
            LeverageRow { judge: k, h, rho: h / (params.gamma[k].abs() * mu_norm + eps) }
        })
        .collect()
}

/// Judge with the largest relative leverage, if any is positive.
pub fn high_leverage_judge(rows: &[LeverageRow]) -> Option<usize> {
    rows.iter()
        .filter(|r| r.rho > 0.0)
        .max_by(|a, b| a.rho.total_cmp(&b.rho))
        .map(|r| r.judge)
}
