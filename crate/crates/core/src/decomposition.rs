//! Consensus-plus-heterogeneity geometry of the score matrix.
//!
//! A row-centered `K x N` score matrix is written `S = gamma mu^T + U V^T`. The
//! canonical representative satisfies
//!
//! * `1^T mu = 0`, `V^T 1 = 0` (centering)
//! * `1^T U = 0`, `1^T gamma = K` (scaling)
//! * `mu^T V = 0` (orthogonality)
//! * `V^T V / N = I`, `U^T U / K = D` diagonal, strictly decreasing and positive
//! * the first non-negligible entry of each column of `U` is positive.
//!
//! [`decompose`] constructs it from `S`, [`reanchor`] restores it after block
//! updates without changing `S`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GuardKind, HjaError, Result};
use crate::linalg::{anchor_signs, max_abs, thin_svd, MatrixExport, SIGN_EPS};

pub const DEFAULT_CONSTRAINT_TOL: f64 = 1e-8;
pub const DEFAULT_DELTA_MU: f64 = 1e-6;
pub const DEFAULT_DELTA_SIGMA: f64 = 1e-8;
/// Auto-rank keeps singular values above this fraction of the largest.
pub const AUTO_RANK_REL_TOL: f64 = 1e-10;

/// Largest identifiable heterogeneity rank, `min(K - 1, N - 2)`.
pub fn max_rank(n_judges: usize, n_items: usize) -> usize {
    n_judges.saturating_sub(1).min(n_items.saturating_sub(2))
}

pub fn check_rank(rank: usize, n_judges: usize, n_items: usize) -> Result<()> {
    let max = max_rank(n_judges, n_items);
    if rank > max {
        return Err(HjaError::RankTooLarge {
            requested: rank,
            max,
        });
    }
    Ok(())
}

/// Parameters `(gamma, mu, U, V)`; the rank is the column count of `U` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct HjaParams {
    pub gamma: DVector<f64>,
    pub mu: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl HjaParams {
    pub fn new(
        gamma: DVector<f64>,
        mu: DVector<f64>,
        u: DMatrix<f64>,
        v: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self { gamma, mu, u, v };
        p.check_dims()?;
        Ok(p)
    }

    /// `gamma = 1`, `mu = 0`, zero factors of the given rank.
    pub fn neutral(n_judges: usize, n_items: usize, rank: usize) -> Self {
        Self {
            gamma: DVector::from_element(n_judges, 1.0),
            mu: DVector::zeros(n_items),
            u: DMatrix::zeros(n_judges, rank),
            v: DMatrix::zeros(n_items, rank),
        }
    }

    pub fn check_dims(&self) -> Result<()> {
        let (k, n) = (self.gamma.len(), self.mu.len());
        if self.u.nrows() != k || self.v.nrows() != n || self.u.ncols() != self.v.ncols() {
            return Err(HjaError::DimensionMismatch(format!(
                "gamma {k}, mu {n}, U {:?}, V {:?}",
                self.u.shape(),
                self.v.shape()
            )));
        }
        Ok(())
    }

    pub fn n_judges(&self) -> usize {
        self.gamma.len()
    }

    pub fn n_items(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Dimension of the flattened `(gamma, mu, U, V)` vector.
    pub fn ambient_dim(&self) -> usize {
        let (k, n, r) = (self.n_judges(), self.n_items(), self.rank());
        k + n + r * (k + n)
    }

    /// Heterogeneity term `U V^T`.
    pub fn uvt(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// `gamma mu^T + U V^T` without dimension checks.
    pub fn score_matrix(&self) -> DMatrix<f64> {
        &self.gamma * self.mu.transpose() + self.uvt()
    }

    /// Flatten in ambient order: gamma, mu, U row-major, V row-major.
    pub fn flatten(&self) -> DVector<f64> {
        let layout = Layout::of(self);
        let mut x = DVector::zeros(layout.dim());
        for k in 0..layout.k {
            x[layout.gamma(k)] = self.gamma[k];
            for m in 0..layout.r {
                x[layout.u(k, m)] = self.u[(k, m)];
            }
        }
        for i in 0..layout.n {
            x[layout.mu(i)] = self.mu[i];
            for m in 0..layout.r {
                x[layout.v(i, m)] = self.v[(i, m)];
            }
        }
        x
    }

    pub fn unflatten(layout: Layout, x: &DVector<f64>) -> Self {
        Self {
            gamma: DVector::from_fn(layout.k, |k, _| x[layout.gamma(k)]),
            mu: DVector::from_fn(layout.n, |i, _| x[layout.mu(i)]),
            u: DMatrix::from_fn(layout.k, layout.r, |k, m| x[layout.u(k, m)]),
            v: DMatrix::from_fn(layout.n, layout.r, |i, m| x[layout.v(i, m)]),
        }
    }

    pub fn export(&self) -> ParamsExport {
        ParamsExport {
            gamma: self.gamma.iter().copied().collect(),
            mu: self.mu.iter().copied().collect(),
            u: MatrixExport::from(&self.u),
            v: MatrixExport::from(&self.v),
            rank: self.rank(),
        }
    }
}

/// Index layout of the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub n: usize,
    pub r: usize,
}

impl Layout {
    pub fn of(p: &HjaParams) -> Self {
        Self {
            k: p.n_judges(),
            n: p.n_items(),
            r: p.rank(),
        }
    }

    pub fn dim(&self) -> usize {
        self.k + self.n + self.r * (self.k + self.n)
    }

    pub fn gamma(&self, k: usize) -> usize {
        k
    }

    pub fn mu(&self, i: usize) -> usize {
        self.k + i
    }

    pub fn u(&self, k: usize, m: usize) -> usize {
        self.k + self.n + k * self.r + m
    }

    pub fn v(&self, i: usize, m: usize) -> usize {
        self.k + self.n + self.k * self.r + i * self.r + m
    }
}

/// Serialized parameters: vectors plus row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsExport {
    pub gamma: Vec<f64>,
    pub mu: Vec<f64>,
    pub u: MatrixExport,
    pub v: MatrixExport,
    pub rank: usize,
}

impl ParamsExport {
    pub fn to_params(&self) -> Result<HjaParams> {
        let bad = || HjaError::Format("matrix data does not match its dimensions".into());
        HjaParams::new(
            DVector::from_vec(self.gamma.clone()),
            DVector::from_vec(self.mu.clone()),
            self.u.to_matrix().ok_or_else(bad)?,
            self.v.to_matrix().ok_or_else(bad)?,
        )
    }
}

/// A `K x N` score matrix whose rows sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(DMatrix<f64>);

impl ScoreMatrix {
    /// Wrap `s`, checking every row sum is within `tol` of zero.
    pub fn new(s: DMatrix<f64>, tol: f64) -> Result<Self> {
        for (k, row) in s.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if sum.abs() > tol {
                return Err(HjaError::Validation(format!(
                    "row {k} of the score matrix sums to {sum:e}, not 0"
                )));
            }
        }
        Ok(Self(s))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

pub fn compose(params: &HjaParams) -> Result<ScoreMatrix> {
    params.check_dims()?;
    Ok(ScoreMatrix(params.score_matrix()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Fixed(usize),
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecomposeWarning {
    /// Adjacent singular values at or around the cut are closer than the tolerance.
    AmbiguousRank { index: usize, gap: f64 },
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub params: HjaParams,
    /// Full spectrum of the heterogeneous residual, decreasing.
    pub singular_values: Vec<f64>,
    pub warnings: Vec<DecomposeWarning>,
}

/// Recover the canonical `(gamma, mu, U, V)` from a row-centered score matrix.
pub fn decompose(s: &ScoreMatrix, rank: RankChoice, tol: f64) -> Result<Decomposition> {
    let s = s.matrix();
    let (kk, nn) = s.shape();
    let col_sums: DVector<f64> = s.row_sum().transpose();
    if col_sums.norm() <= tol {
        return Err(HjaError::DegenerateConsensus);
    }
    let mu = &col_sums / kk as f64;
    let gamma = s * &mu / mu.norm_squared();
    let residual = s - &gamma * mu.transpose();
    let (p, sigma, q) = thin_svd(&residual);

    let r_max = max_rank(kk, nn);
    let r = match rank {
        RankChoice::Fixed(r) => {
            check_rank(r, kk, nn)?;
            r
        }
        RankChoice::Auto => {
            // relative to the whole matrix so an exactly consensus-only S gives rank 0
            let scale = s.norm();
            sigma
                .iter()
                .take_while(|&&x| x > AUTO_RANK_REL_TOL * scale)
                .count()
                .min(r_max)
        }
    };

    let mut warnings = Vec::new();
    let scale = sigma.first().copied().unwrap_or(0.0).max(1.0);
    // gaps among the kept values and across the cut
    let last = (r + 1).min(sigma.len());
    for idx in 1..last {
        let gap = sigma[idx - 1] - sigma[idx];
        if gap <= tol * scale {
            warnings.push(DecomposeWarning::AmbiguousRank { index: idx, gap });
        }
    }
    if !warnings.is_empty() {
        log::warn!("decompose: near-repeated singular values at the rank-{r} cut");
    }

    let sqrt_n = (nn as f64).sqrt();
    let mut u = DMatrix::from_fn(kk, r, |row, c| p[(row, c)] * sigma[c] / sqrt_n);
    let mut v = DMatrix::from_fn(nn, r, |row, c| q[(row, c)] * sqrt_n);
    anchor_signs(&mut u, &mut v);

    Ok(Decomposition {
        params: HjaParams { gamma, mu, u, v },
        singular_values: sigma,
        warnings,
    })
}

/// Residual magnitudes of each canonical constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// `|1^T mu|`
    pub centering_mu: f64,
    /// `max |V^T 1|`
    pub centering_v: f64,
    /// `|1^T gamma - K|`
    pub scaling_gamma: f64,
    /// `max |1^T U|`
    pub scaling_u: f64,
    /// `max |mu^T V|`
    pub orthogonality: f64,
    /// `max |V^T V / N - I|`
    pub anchoring_v: f64,
    /// Largest off-diagonal entry of `U^T U / K`.
    pub anchoring_u_offdiag: f64,
    /// Diagonal of `U^T U / K` strictly decreasing and positive.
    pub anchoring_order: bool,
    /// First non-negligible entry of every `U` column positive.
    pub sign_convention: bool,
    pub tol: f64,
    pub passed: bool,
}

impl ConstraintReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.centering_mu,
            self.centering_v,
            self.scaling_gamma,
            self.scaling_u,
            self.orthogonality,
            self.anchoring_v,
            self.anchoring_u_offdiag,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Passes the affine and orthogonality identities, ignoring the anchoring block.
    pub fn linear_constraints_hold(&self) -> bool {
        [
            self.centering_mu,
            self.centering_v,
            self.scaling_gamma,
            self.scaling_u,
            self.orthogonality,
        ]
        .into_iter()
        .all(|x| x <= self.tol)
    }
}

pub fn check_constraints(params: &HjaParams, tol: f64) -> ConstraintReport {
    let (kk, nn, r) = (params.n_judges(), params.n_items(), params.rank());
    let centering_mu = params.mu.sum().abs();
    let centering_v = params.v.row_sum().amax();
    let scaling_gamma = (params.gamma.sum() - kk as f64).abs();
    let scaling_u = params.u.row_sum().amax();
    let orthogonality = (params.mu.transpose() * &params.v).amax();
    let vtv = params.v.transpose() * &params.v / nn as f64;
    let anchoring_v = max_abs(&(vtv - DMatrix::identity(r, r)));
    let utu = params.u.transpose() * &params.u / kk as f64;
    let mut anchoring_u_offdiag: f64 = 0.0;
    for a in 0..r {
        for b in 0..r {
            if a != b {
                anchoring_u_offdiag = anchoring_u_offdiag.max(utu[(a, b)].abs());
            }
        }
    }
    let diag: Vec<f64> = (0..r).map(|m| utu[(m, m)]).collect();
    let anchoring_order =
        diag.windows(2).all(|w| w[0] > w[1]) && diag.last().map_or(true, |&d| d > 0.0);
    let sign_convention = (0..r).all(|m| {
        params
            .u
            .column(m)
            .iter()
            .find(|x| x.abs() > SIGN_EPS)
            .map_or(true, |&x| x > 0.0)
    });
    let mut report = ConstraintReport {
        centering_mu,
        centering_v,
        scaling_gamma,
        scaling_u,
        orthogonality,
        anchoring_v,
        anchoring_u_offdiag,
        anchoring_order,
        sign_convention,
        tol,
        passed: false,
    };
    report.passed = report.max_residual() <= tol && anchoring_order && sign_convention;
    report
}

/// Restore the canonical representative after block updates, preserving `S`.
///
/// The input must already satisfy the affine constraints `1^T gamma = K`,
/// `1^T U = 0`, `1^T mu = 0`, `V^T 1 = 0`. Fails when `||mu|| < delta_mu` or when
/// the `r`-th singular value of the projected heterogeneity term is below `delta_sigma`.
pub fn reanchor(tentative: &HjaParams, delta_mu: f64, delta_sigma: f64) -> Result<HjaParams> {
    tentative.check_dims()?;
    let (kk, nn, r) = (
        tentative.n_judges(),
        tentative.n_items(),
        tentative.rank(),
    );
    let mu = tentative.mu.clone();
    let mu_sq = mu.norm_squared();
    if mu_sq.sqrt() < delta_mu {
        return Err(HjaError::Reanchor(GuardKind::Norm));
    }
    if r == 0 {
        return Ok(HjaParams {
            gamma: tentative.gamma.clone(),
            mu,
            u: DMatrix::zeros(kk, 0),
            v: DMatrix::zeros(nn, 0),
        });
    }
    let a: DVector<f64> = tentative.v.transpose() * &mu / mu_sq;
    let v_bar = &tentative.v - &mu * a.transpose();
    let gamma = &tentative.gamma + &tentative.u * &a;
    let h_bar = &tentative.u * v_bar.transpose();
    let (p, sigma, q) = thin_svd(&h_bar);
    if sigma.len() < r || sigma[r - 1] < delta_sigma {
        return Err(HjaError::Reanchor(GuardKind::Spectral));
    }
    let sqrt_n = (nn as f64).sqrt();
    let mut u = DMatrix::from_fn(kk, r, |row, c| p[(row, c)] * sigma[c] / sqrt_n);
    let mut v = DMatrix::from_fn(nn, r, |row, c| q[(row, c)] * sqrt_n);
    anchor_signs(&mut u, &mut v);
    Ok(HjaParams { gamma, mu, u, v })
}
