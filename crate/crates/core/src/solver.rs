//! Constrained maximum likelihood: proximal alternating block updates with
//! re-anchoring, the spectral initializer, and the baseline estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{check_connectivity, components_of, AggregatedCounts, Cell};
use crate::decomposition::{
    check_rank, decompose, reanchor, HjaParams, RankChoice, ScoreMatrix, DEFAULT_CONSTRAINT_TOL,
    DEFAULT_DELTA_MU, DEFAULT_DELTA_SIGMA,
};
use crate::error::{HjaError, Result};
use crate::likelihood::{nll, sigmoid, softplus};
use crate::linalg::thin_svd;
use crate::optim::{lbfgs, newton, Eval, MinimizeOptions, Minimum, SmoothObjective};

/// Guard failures tolerated before the solver gives up.
pub const MAX_GUARD_FAILURES: usize = 20;
/// Ridge weight used when a BTL maximum likelihood estimate does not exist.
pub const BTL_RIDGE: f64 = 0.01;
const MAX_INNER_ITERS: usize = 200;
const LBFGS_MEMORY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    Newton,
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rank: usize,
    pub tau: f64,
    pub tau_growth: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub inner_tol: f64,
    pub delta_mu: f64,
    pub delta_sigma: f64,
    pub seed: u64,
    pub inner_solver: InnerSolver,
    /// Fit even when some judge's comparison graph is disconnected.
    pub allow_disconnected: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            tau: 30.0,
            tau_growth: 10.0,
            tol: 1e-8,
            max_iters: 500,
            inner_tol: 1e-9,
            delta_mu: DEFAULT_DELTA_MU,
            delta_sigma: DEFAULT_DELTA_SIGMA,
            seed: 0,
            inner_solver: InnerSolver::Newton,
            allow_disconnected: false,
        }
    }
}

impl SolverConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self { rank, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HjaError::Validation(msg.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.tau_growth > 1.0 && self.tau_growth.is_finite()) {
            return bad("tau_growth must exceed 1");
        }
        if !(self.tol > 0.0) || !(self.inner_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.delta_mu >= 0.0) || !(self.delta_sigma >= 0.0) {
            return bad("guard thresholds must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: HjaParams,
    /// Objective at the initializer followed by one entry per accepted iteration.
    pub nll_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub guard_failures: usize,
    pub final_nll: f64,
    /// Final proximal weight after any guard-triggered growth.
    pub tau: f64,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Bradley-Terry fits

/// Smooth BTL objective over a centered score vector, optionally ridge-penalized.
struct BtlObjective<'a> {
    cells: &'a [Cell],
    n_items: usize,
    ridge: f64,
}

impl BtlObjective<'_> {
    fn grad(&self, s: &DVector<f64>) -> DVector<f64> {
        let mut g = s * self.ridge;
        for c in self.cells {
            let resid = c.n * sigmoid(s[c.i] - s[c.j]) - c.y;
            g[c.i] += resid;
            g[c.j] -= resid;
        }
        g
    }
}

impl SmoothObjective for BtlObjective<'_> {
    fn dim(&self) -> usize {
        self.n_items
    }

    fn value(&self, s: &DVector<f64>) -> f64 {
        let data: f64 = self
            .cells
            .iter()
            .map(|c| {
                let e = s[c.i] - s[c.j];
                c.n * softplus(e) - c.y * e
            })
            .sum();
        data + 0.5 * self.ridge * s.norm_squared()
    }

    fn eval(&self, s: &DVector<f64>) -> Eval {
        let grad = self.grad(s);
        Eval { value: self.value(s), stop_norm: grad.norm(), grad }
    }

    /// Weighted Laplacian plus `11^T / N`, which leaves centered steps unchanged.
    fn hessian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_items;
        let mut h = DMatrix::from_element(n, n, 1.0 / n as f64);
        for i in 0..n {
            h[(i, i)] += self.ridge;
        }
        for c in self.cells {
            let p = sigmoid(s[c.i] - s[c.j]);
            let w = c.n * p * (1.0 - p);
            h[(c.i, c.i)] += w;
            h[(c.j, c.j)] += w;
            h[(c.i, c.j)] -= w;
            h[(c.j, c.i)] -= w;
        }
        h
    }
}

/// The BTL MLE exists iff the directed "has beaten" graph is strongly connected.
fn btl_mle_exists(cells: &[Cell], n_items: usize) -> bool {
    let mut fwd = vec![Vec::new(); n_items];
    let mut bwd = vec![Vec::new(); n_items];
    for c in cells {
        if c.y > 0.0 {
            fwd[c.i].push(c.j);
            bwd[c.j].push(c.i);
        }
        if c.n - c.y > 0.0 {
            fwd[c.j].push(c.i);
            bwd[c.i].push(c.j);
        }
    }
    let reaches_all = |adj: &[Vec<usize>]| {
        let mut seen = vec![false; n_items];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n_items <= 1 || (reaches_all(&fwd) && reaches_all(&bwd))
}

fn btl_on_cells(cells: &[Cell], n_items: usize, inner_tol: f64, judge: Option<String>) -> Result<DVector<f64>> {
    let components = components_of(n_items, cells.iter().map(|c| (c.i, c.j)));
    if components.len() > 1 {
        return Err(HjaError::Connectivity { judge, components });
    }
    let ridge = if btl_mle_exists(cells, n_items) {
        0.0
    } else {
        log::info!(
            "BTL maximum likelihood estimate does not exist for {}; using ridge {BTL_RIDGE}",
            judge.as_deref().unwrap_or("pooled data")
        );
        BTL_RIDGE
    };
    let obj = BtlObjective { cells, n_items, ridge };
    let opts = MinimizeOptions { tol: inner_tol, max_iter: MAX_INNER_ITERS };
    let mut s = newton(&obj, DVector::zeros(n_items), opts).z;
    let mean = s.mean();
    s.add_scalar_mut(-mean);
    Ok(s)
}

/// Centered BTL scores on judge-summed counts.
pub fn fit_pooled_btl(counts: &AggregatedCounts) -> Result<DVector<f64>> {
    btl_on_cells(&counts.pooled(), counts.n_items(), 1e-9, None)
}

/// Centered BTL scores from judge `k` alone.
pub fn fit_judgewise_btl(counts: &AggregatedCounts, k: usize) -> Result<DVector<f64>> {
    if k >= counts.n_judges() {
        return Err(HjaError::IndexOutOfRange(format!("judge {k} of {}", counts.n_judges())));
    }
    let label = counts.id_map().judges[k].clone();
    btl_on_cells(counts.judge_cells(k), counts.n_items(), 1e-9, Some(label))
}

/// Judgewise BTL rows, falling back to `pooled` for judges whose graph is disconnected.
fn judgewise_matrix(
    counts: &AggregatedCounts,
    pooled: &DVector<f64>,
    warnings: &mut Vec<String>,
) -> Result<DMatrix<f64>> {
    let (kk, nn) = (counts.n_judges(), counts.n_items());
    let mut s = DMatrix::zeros(kk, nn);
    for k in 0..kk {
        let row = match fit_judgewise_btl(counts, k) {
            Ok(row) => row,
            Err(HjaError::Connectivity { .. }) => {
                let msg = format!(
                    "judge {} has a disconnected comparison graph; using pooled scores for its row",
                    counts.id_map().judges[k]
                );
                log::warn!("{msg}");
                warnings.push(msg);
                pooled.clone()
            }
            Err(e) => return Err(e),
        };
        s.row_mut(k).copy_from(&row.transpose());
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Initialization

#[derive(Debug, Clone)]
pub struct Initialization {
    pub params: HjaParams,
    pub warnings: Vec<String>,
}

/// Spectral initializer from pooled and judgewise BTL fits.
pub fn initialize(counts: &AggregatedCounts, rank: usize) -> Result<HjaParams> {
    Ok(initialize_with(counts, rank, DEFAULT_DELTA_MU, DEFAULT_DELTA_SIGMA)?.params)
}

pub fn initialize_with(
    counts: &AggregatedCounts,
    rank: usize,
    delta_mu: f64,
    delta_sigma: f64,
) -> Result<Initialization> {
    let (kk, nn) = (counts.n_judges(), counts.n_items());
    check_rank(rank, kk, nn)?;
    let mu0 = fit_pooled_btl(counts)?;
    let mut warnings = Vec::new();
    let s_tilde = judgewise_matrix(counts, &mu0, &mut warnings)?;

    let mut resid = s_tilde;
    for mut row in resid.row_iter_mut() {
        row -= mu0.transpose();
    }
    for mut col in resid.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let (p, sigma, q) = thin_svd(&resid);

    let mut r = rank;
    loop {
        let u0 = DMatrix::from_fn(kk, r, |row, c| p[(row, c)] * sigma[c].sqrt());
        let v0 = DMatrix::from_fn(nn, r, |row, c| q[(row, c)] * sigma[c].sqrt());
        let tentative = HjaParams { gamma: DVector::from_element(kk, 1.0), mu: mu0.clone(), u: u0, v: v0 };
        match reanchor(&tentative, delta_mu, delta_sigma) {
            Ok(params) => return Ok(Initialization { params, warnings }),
            Err(HjaError::Reanchor(kind)) if r > 0 => {
                let msg = format!("initial re-anchoring failed ({kind}) at rank {r}; retrying at rank {}", r - 1);
                log::warn!("{msg}");
                warnings.push(msg);
                r -= 1;
            }
            Err(e) => return Err(e),
        }
    }
}

// ---------------------------------------------------------------------------
// Block subproblems

/// One proximal block subproblem over a `rows x cols` matrix variable `W` whose
/// column sums are fixed. The last row is eliminated, so the free coordinates are
/// rows `0..rows-1` in row-major order.
///
/// Each cell contributes `eta = sum_t sign_t * W[row_t] . f` for a fixed feature `f`.
struct BlockProblem {
    rows: usize,
    cols: usize,
    col_sums: Vec<f64>,
    anchor: DMatrix<f64>,
    tau: f64,
    /// `(n, y)` per cell.
    weights: Vec<(f64, f64)>,
    /// Up to two `(row, sign)` terms per cell.
    terms: Vec<[(usize, f64); 2]>,
    n_terms: usize,
    features: DMatrix<f64>,
}

impl BlockProblem {
    fn judge(p: &HjaParams, counts: &AggregatedCounts, tau: f64) -> Self {
        let (kk, r) = (p.n_judges(), p.rank());
        let cells = counts.cells();
        let features = DMatrix::from_fn(cells.len(), r + 1, |c, m| {
            let (i, j) = (cells[c].i, cells[c].j);
            if m == 0 {
                p.mu[i] - p.mu[j]
            } else {
                p.v[(i, m - 1)] - p.v[(j, m - 1)]
            }
        });
        let mut anchor = DMatrix::zeros(kk, r + 1);
        anchor.column_mut(0).copy_from(&p.gamma);
        anchor.view_mut((0, 1), (kk, r)).copy_from(&p.u);
        let mut col_sums = vec![0.0; r + 1];
        col_sums[0] = kk as f64;
        Self {
            rows: kk,
            cols: r + 1,
            col_sums,
            anchor,
            tau,
            weights: cells.iter().map(|c| (c.n, c.y)).collect(),
            terms: cells.iter().map(|c| [(c.k, 1.0), (0, 0.0)]).collect(),
            n_terms: 1,
            features,
        }
    }

    fn item(p: &HjaParams, counts: &AggregatedCounts, tau: f64) -> Self {
        let (nn, r) = (p.n_items(), p.rank());
        let cells = counts.cells();
        let features = DMatrix::from_fn(cells.len(), r + 1, |c, m| {
            let k = cells[c].k;
            if m == 0 {
                p.gamma[k]
            } else {
                p.u[(k, m - 1)]
            }
        });
        let mut anchor = DMatrix::zeros(nn, r + 1);
        anchor.column_mut(0).copy_from(&p.mu);
        anchor.view_mut((0, 1), (nn, r)).copy_from(&p.v);
        Self {
            rows: nn,
            cols: r + 1,
            col_sums: vec![0.0; r + 1],
            anchor,
            tau,
            weights: cells.iter().map(|c| (c.n, c.y)).collect(),
            terms: cells.iter().map(|c| [(c.i, 1.0), (c.j, -1.0)]).collect(),
            n_terms: 2,
            features,
        }
    }

    fn full(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let (rows, cols) = (self.rows, self.cols);
        let mut w = DMatrix::zeros(rows, cols);
        for c in 0..cols {
            let mut acc = 0.0;
            for row in 0..rows - 1 {
                let x = z[row * cols + c];
                w[(row, c)] = x;
                acc += x;
            }
            w[(rows - 1, c)] = self.col_sums[c] - acc;
        }
        w
    }

    fn reduce(&self, w: &DMatrix<f64>) -> DVector<f64> {
        let cols = self.cols;
        DVector::from_fn((self.rows - 1) * cols, |idx, _| w[(idx / cols, idx % cols)])
    }

    fn eta(&self, w: &DMatrix<f64>, c: usize) -> f64 {
        let mut e = 0.0;
        for &(row, sign) in &self.terms[c][..self.n_terms] {
            let mut dot = 0.0;
            for m in 0..self.cols {
                dot += w[(row, m)] * self.features[(c, m)];
            }
            e += sign * dot;
        }
        e
    }

    fn objective(&self, w: &DMatrix<f64>) -> f64 {
        let data: f64 = (0..self.weights.len())
            .map(|c| {
                let (n, y) = self.weights[c];
                let e = self.eta(w, c);
                n * softplus(e) - y * e
            })
            .sum();
        data + 0.5 * self.tau * (w - &self.anchor).norm_squared()
    }

    /// Gradient with respect to the full matrix variable.
    fn full_gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = (w - &self.anchor) * self.tau;
        for c in 0..self.weights.len() {
            let (n, y) = self.weights[c];
            let resid = n * sigmoid(self.eta(w, c)) - y;
            for &(row, sign) in &self.terms[c][..self.n_terms] {
                for m in 0..self.cols {
                    g[(row, m)] += sign * resid * self.features[(c, m)];
                }
            }
        }
        g
    }
}

/// Frobenius norm of the gradient projected onto the column-sum-preserving subspace.
fn projected_norm(g: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for col in g.column_iter() {
        let mean = col.mean();
        total += col.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    }
    total.sqrt()
}

impl SmoothObjective for BlockProblem {
    fn dim(&self) -> usize {
        (self.rows - 1) * self.cols
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        self.objective(&self.full(z))
    }

    fn eval(&self, z: &DVector<f64>) -> Eval {
        let w = self.full(z);
        let g = self.full_gradient(&w);
        let last = self.rows - 1;
        let cols = self.cols;
        let grad = DVector::from_fn(last * cols, |idx, _| {
            let (row, c) = (idx / cols, idx % cols);
            g[(row, c)] - g[(last, c)]
        });
        Eval { value: self.objective(&w), stop_norm: projected_norm(&g), grad }
    }

    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let w = self.full(z);
        let (rows, cols) = (self.rows, self.cols);
        let dim_full = rows * cols;
        let mut h = DMatrix::zeros(dim_full, dim_full);
        for d in 0..dim_full {
            h[(d, d)] = self.tau;
        }
        for c in 0..self.weights.len() {
            let (n, _) = self.weights[c];
            let p = sigmoid(self.eta(&w, c));
            let wt = n * p * (1.0 - p);
            for &(ra, sa) in &self.terms[c][..self.n_terms] {
                for &(rb, sb) in &self.terms[c][..self.n_terms] {
                    let s = wt * sa * sb;
                    for a in 0..cols {
                        let fa = self.features[(c, a)] * s;
                        for b in 0..cols {
                            h[(ra * cols + a, rb * cols + b)] += fa * self.features[(c, b)];
                        }
                    }
                }
            }
        }
        // chain rule through the eliminated last row: Z^T H Z
        let last = rows - 1;
        let red = last * cols;
        DMatrix::from_fn(red, red, |x, y| {
            let (a, b) = (x % cols, y % cols);
            h[(x, y)] - h[(x, last * cols + b)] - h[(last * cols + a, y)]
                + h[(last * cols + a, last * cols + b)]
        })
    }
}

fn minimize(problem: &BlockProblem, solver: InnerSolver, inner_tol: f64) -> Minimum {
    let z0 = problem.reduce(&problem.anchor);
    let opts = MinimizeOptions { tol: inner_tol, max_iter: MAX_INNER_ITERS };
    match solver {
        InnerSolver::Newton => newton(problem, z0, opts),
        InnerSolver::Lbfgs => lbfgs(problem, z0, opts, LBFGS_MEMORY),
    }
}

/// One judge-block and one item-block proximal update, before re-anchoring.
fn block_sweep(theta: &HjaParams, counts: &AggregatedCounts, tau: f64, config: &SolverConfig) -> HjaParams {
    let r = theta.rank();
    let mut next = theta.clone();

    let judge = BlockProblem::judge(theta, counts, tau);
    let wj = judge.full(&minimize(&judge, config.inner_solver, config.inner_tol).z);
    next.gamma = wj.column(0).into_owned();
    next.u = wj.columns(1, r).into_owned();

    let item = BlockProblem::item(&next, counts, tau);
    let wi = item.full(&minimize(&item, config.inner_solver, config.inner_tol).z);
    next.mu = wi.column(0).into_owned();
    next.v = wi.columns(1, r).into_owned();
    next
}

// ---------------------------------------------------------------------------
// Outer loop

/// Fit the model at `config.rank`, starting from the spectral initializer.
pub fn fit(counts: &AggregatedCounts, config: &SolverConfig) -> Result<FitResult> {
    config.validate()?;
    check_rank(config.rank, counts.n_judges(), counts.n_items())?;
    if counts.is_empty() {
        return Err(HjaError::Validation("no comparisons to fit".into()));
    }
    let report = check_connectivity(counts);
    if !report.pooled_connected {
        return Err(HjaError::Connectivity { judge: None, components: report.pooled_components });
    }
    if !config.allow_disconnected {
        if let Some(&k) = report.disconnected_judges().first() {
            return Err(HjaError::Connectivity {
                judge: Some(counts.id_map().judges[k].clone()),
                components: report.components[k].clone(),
            });
        }
    }
    let init = initialize_with(counts, config.rank, config.delta_mu, config.delta_sigma)?;
    let mut result = fit_from(counts, init.params, config)?;
    let mut warnings = init.warnings;
    warnings.append(&mut result.warnings);
    result.warnings = warnings;
    Ok(result)
}

/// Run the outer iterations from a canonical starting point.
pub fn fit_from(counts: &AggregatedCounts, start: HjaParams, config: &SolverConfig) -> Result<FitResult> {
    config.validate()?;
    start.check_dims()?;
    if start.n_judges() != counts.n_judges() || start.n_items() != counts.n_items() {
        return Err(HjaError::DimensionMismatch(format!(
            "start has {} judges x {} items, data has {} x {}",
            start.n_judges(),
            start.n_items(),
            counts.n_judges(),
            counts.n_items()
        )));
    }
    let mut theta = start;
    let mut current = nll(&theta, counts);
    let mut trace = vec![current];
    let mut tau = config.tau;
    let mut guard_failures = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut warnings = Vec::new();

    while iterations < config.max_iters {
        let tentative = block_sweep(&theta, counts, tau, config);
        let next = match reanchor(&tentative, config.delta_mu, config.delta_sigma) {
            Ok(p) => p,
            Err(HjaError::Reanchor(kind)) => {
                guard_failures += 1;
                if guard_failures > MAX_GUARD_FAILURES {
                    return Err(HjaError::SolverStalled { guard_failures });
                }
                tau *= config.tau_growth;
                log::debug!("re-anchoring failed ({kind}); tau raised to {tau}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let value = nll(&next, counts);
        if !value.is_finite() {
            return Err(HjaError::SolverStalled { guard_failures });
        }
        if value > current {
            // only rounding can raise the objective; the previous iterate stands
            if (value - current) / (1.0 + current.abs()) < config.tol {
                converged = true;
                break;
            }
            let msg = format!("objective increased by {:e}; stopping", value - current);
            log::warn!("{msg}");
            warnings.push(msg);
            break;
        }
        iterations += 1;
        let rel = (current - value) / (1.0 + current.abs());
        theta = next;
        current = value;
        trace.push(value);
        if rel < config.tol {
            converged = true;
            break;
        }
    }
    if !converged && warnings.is_empty() {
        let msg = format!("stopped after {iterations} iterations without meeting tol");
        log::debug!("{msg}");
        warnings.push(msg);
    }
    Ok(FitResult {
        params: theta,
        nll_trace: trace,
        converged,
        iterations,
        guard_failures,
        final_nll: current,
        tau,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Pooled,
    SensitivityOnly,
    BtlSvd,
}

/// Fit a baseline estimator. `config.rank` is the heterogeneity rank for `BtlSvd`
/// and is ignored by the other two.
pub fn fit_baseline(counts: &AggregatedCounts, kind: BaselineKind, config: &SolverConfig) -> Result<HjaParams> {
    let (kk, nn) = (counts.n_judges(), counts.n_items());
    match kind {
        BaselineKind::Pooled => {
            let mu = fit_pooled_btl(counts)?;
            Ok(HjaParams { gamma: DVector::from_element(kk, 1.0), mu, u: DMatrix::zeros(kk, 0), v: DMatrix::zeros(nn, 0) })
        }
        BaselineKind::SensitivityOnly => {
            let cfg = SolverConfig { rank: 0, ..config.clone() };
            Ok(fit(counts, &cfg)?.params)
        }
        BaselineKind::BtlSvd => {
            let r = config.rank;
            check_rank(r, kk, nn)?;
            let pooled = fit_pooled_btl(counts)?;
            let s = judgewise_matrix(counts, &pooled, &mut Vec::new())?;
            let (p, sigma, q) = thin_svd(&s);
            let keep = (r + 1).min(sigma.len());
            let truncated = DMatrix::from_fn(kk, nn, |row, col| {
                (0..keep).map(|m| p[(row, m)] * sigma[m] * q[(col, m)]).sum()
            });
            let s = ScoreMatrix::new(truncated, 1e-6)?;
            Ok(decompose(&s, RankChoice::Fixed(r), DEFAULT_CONSTRAINT_TOL)?.params)
        }
    }
}
