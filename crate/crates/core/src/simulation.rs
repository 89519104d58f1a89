//! Synthetic ground truth, balanced comparison designs, outcome sampling, recovery
//! metrics, and the recovery study driver.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AggregatedCounts, Cell, IdMap};
use crate::decomposition::{check_rank, reanchor, HjaParams};
use crate::error::{HjaError, Result};
use crate::inference::InferenceEngine;
use crate::likelihood::{eta, sigmoid};
use crate::linalg::anchor_signs;
use crate::solver::{fit, fit_baseline, BaselineKind, SolverConfig};

/// Mix a master seed with stream coordinates into an independent 64-bit seed.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(master) ^ a) ^ b.rotate_left(17))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthSpec {
    pub n_items: usize,
    pub n_judges: usize,
    pub rank: usize,
    pub het_scale: f64,
    pub seed: u64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self { n_items: 8, n_judges: 4, rank: 1, het_scale: 1.0, seed: 0 }
    }
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Draw ground-truth parameters.
///
/// For `het_scale > 0` the draw is passed through re-anchoring, which keeps `S`
/// and returns the canonical representative. For `het_scale = 0` the factors are zero.
pub fn generate_truth(spec: &TruthSpec) -> Result<HjaParams> {
    let (kk, nn, r) = (spec.n_judges, spec.n_items, spec.rank);
    check_rank(r, kk, nn)?;
    if !(spec.het_scale >= 0.0) {
        return Err(HjaError::Validation("heterogeneity scale must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut mu = DVector::from_fn(nn, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mean = mu.mean();
    mu.add_scalar_mut(-mean);

    let e = DVector::from_fn(kk, |_, _| rng.sample::<f64, _>(Exp1));
    let mut gamma = &e * (kk as f64 / e.sum());
    // exact 1^T gamma = K after rounding
    let drift = gamma.sum() - kk as f64;
    gamma[kk - 1] -= drift;

    let mut v = DMatrix::from_fn(nn, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut u = DMatrix::from_fn(kk, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    if r == 0 || spec.het_scale == 0.0 {
        return Ok(HjaParams {
            gamma,
            mu,
            u: DMatrix::zeros(kk, r),
            v: DMatrix::zeros(nn, r),
        });
    }

    center_columns(&mut v);
    let a = v.transpose() * &mu / mu.norm_squared();
    v -= &mu * a.transpose();
    let qv = v.qr().q();
    center_columns(&mut u);
    let qu = u.qr().q();

    let root_h = spec.het_scale.sqrt();
    let strengths: Vec<f64> = (0..r).map(|m| (r - m) as f64).collect();
    let (sqrt_n, sqrt_k) = ((nn as f64).sqrt(), (kk as f64).sqrt());
    let mut v = DMatrix::from_fn(nn, r, |row, c| qv[(row, c)] * sqrt_n * strengths[c] * root_h);
    let mut u = DMatrix::from_fn(kk, r, |row, c| qu[(row, c)] * sqrt_k * strengths[c] * root_h);
    center_columns(&mut v);
    center_columns(&mut u);
    anchor_signs(&mut u, &mut v);
    reanchor(&HjaParams { gamma, mu, u, v }, 0.0, 0.0)
}

/// Comparison counts per `(k, i, j)` cell with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Design {
    pub n_judges: usize,
    pub n_items: usize,
    pub cells: Vec<(usize, usize, usize, u64)>,
}

impl Design {
    pub fn total(&self) -> u64 {
        self.cells.iter().map(|c| c.3).sum()
    }
}

/// Spread `n_cmp` comparisons over all judge-pair cells as evenly as possible.
pub fn allocate_comparisons(n_cmp: u64, n_judges: usize, n_items: usize, seed: u64) -> Design {
    let mut keys = Vec::new();
    for k in 0..n_judges {
        for i in 0..n_items {
            for j in i + 1..n_items {
                keys.push((k, i, j));
            }
        }
    }
    let c = keys.len() as u64;
    if c == 0 {
        return Design { n_judges, n_items, cells: Vec::new() };
    }
    let base = n_cmp / c;
    let extra = (n_cmp % c) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![base; keys.len()];
    for idx in sample(&mut rng, keys.len(), extra) {
        counts[idx] += 1;
    }
    let cells = keys
        .into_iter()
        .zip(counts)
        .filter(|&(_, n)| n > 0)
        .map(|((k, i, j), n)| (k, i, j, n))
        .collect();
    Design { n_judges, n_items, cells }
}

/// Binomial outcomes for every design cell under `truth`.
pub fn sample_outcomes(truth: &HjaParams, design: &Design, seed: u64) -> Result<AggregatedCounts> {
    if truth.n_judges() != design.n_judges || truth.n_items() != design.n_items {
        return Err(HjaError::DimensionMismatch("design and truth disagree on dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<Cell> = design
        .cells
        .iter()
        .map(|&(k, i, j, n)| {
            let p = sigmoid(eta(truth, k, i, j));
            let y = rng.sample(Binomial::new(n, p).expect("probability in [0, 1]"));
            Cell { k, i, j, n: n as f64, y: y as f64 }
        })
        .collect();
    AggregatedCounts::from_cells(IdMap::synthetic(design.n_judges, design.n_items), cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub spearman: f64,
    pub ndcg: f64,
    pub coverage: Option<f64>,
    pub sign_acc: f64,
}

/// Ranks starting at 1, ties receiving the average of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && x[order[end + 1]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = avg;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman correlation; zero when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Item indices from highest to lowest score, ties broken by index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// NDCG over the full list, with relevance `2^(N - true rank) - 1`.
pub fn ndcg(estimate: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len();
    let mut rel = vec![0.0; n];
    for (pos, &item) in ranking(truth).iter().enumerate() {
        rel[item] = 2f64.powi((n - (pos + 1)) as i32) - 1.0;
    }
    let dcg = |order: &[usize]| -> f64 {
        order.iter().enumerate().map(|(l, &item)| rel[item] / ((l + 2) as f64).log2()).sum()
    };
    let ideal = dcg(&ranking(truth));
    if ideal == 0.0 {
        1.0
    } else {
        dcg(&ranking(estimate)) / ideal
    }
}

fn sign3(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of within-judge item pairs whose score order agrees.
pub fn sign_accuracy(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let (kk, nn) = truth.shape();
    let mut agree = 0usize;
    let mut total = 0usize;
    for k in 0..kk {
        for i in 0..nn {
            for j in i + 1..nn {
                total += 1;
                if sign3(est[(k, i)] - est[(k, j)]) == sign3(truth[(k, i)] - truth[(k, j)]) {
                    agree += 1;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

/// Recovery metrics. `bounds` holds `(lower, upper)` per score entry, row-major in `(k, i)`.
pub fn compute_metrics(est: &HjaParams, truth: &HjaParams, bounds: Option<&[(f64, f64)]>) -> Result<MetricReport> {
    if est.n_judges() != truth.n_judges() || est.n_items() != truth.n_items() {
        return Err(HjaError::DimensionMismatch("estimate and truth disagree on dimensions".into()));
    }
    let (s_hat, s) = (est.score_matrix(), truth.score_matrix());
    let (kk, nn) = s.shape();
    let mse = (&s_hat - &s).norm_squared() / (kk * nn) as f64;
    let coverage = match bounds {
        None => None,
        Some(b) => {
            if b.len() != kk * nn {
                return Err(HjaError::DimensionMismatch(format!("{} intervals for {} entries", b.len(), kk * nn)));
            }
            let hits = (0..kk * nn)
                .filter(|&idx| {
                    let x = s[(idx / nn, idx % nn)];
                    b[idx].0 <= x && x <= b[idx].1
                })
                .count();
            Some(hits as f64 / (kk * nn) as f64)
        }
    };
    Ok(MetricReport {
        mse,
        spearman: spearman(est.mu.as_slice(), truth.mu.as_slice()),
        ndcg: ndcg(est.mu.as_slice(), truth.mu.as_slice()),
        coverage,
        sign_acc: sign_accuracy(&s_hat, &s),
    })
}

// ---------------------------------------------------------------------------
// Recovery study

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hja,
    PooledBtl,
    SensitivityOnly,
    BtlSvd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Hja, Method::PooledBtl, Method::SensitivityOnly, Method::BtlSvd];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Hja => "hja",
            Method::PooledBtl => "pooled_btl",
            Method::SensitivityOnly => "sensitivity_only",
            Method::BtlSvd => "btl_svd",
        }
    }

    pub fn has_intervals(&self) -> bool {
        !matches!(self, Method::BtlSvd)
    }
}

impl std::str::FromStr for Method {
    type Err = HjaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ja" | "ja_ranking" => return Ok(Method::SensitivityOnly),
            "btl" => return Ok(Method::PooledBtl),
            _ => {}
        }
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HjaError::Validation(format!("unknown method {s:?}")))
    }
}

/// Which quantity varies across the study grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyGrid {
    /// Comparison budgets at the heterogeneity scale of the truth spec.
    NCmp(Vec<u64>),
    /// Heterogeneity scales at a fixed budget.
    HetScale { values: Vec<f64>, n_cmp: u64 },
}

impl StudyGrid {
    pub fn len(&self) -> usize {
        match self {
            StudyGrid::NCmp(v) => v.len(),
            StudyGrid::HetScale { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, idx: usize, base_h: f64) -> (f64, u64, f64) {
        match self {
            StudyGrid::NCmp(v) => (v[idx] as f64, v[idx], base_h),
            StudyGrid::HetScale { values, n_cmp } => (values[idx], *n_cmp, values[idx]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub grid: StudyGrid,
    pub n_seeds: usize,
    pub seed: u64,
    pub truth: TruthSpec,
    /// Heterogeneity rank used by the HJA and truncated-SVD fits.
    pub fit_rank: usize,
    pub solver: SolverConfig,
    pub methods: Vec<Method>,
    pub level: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            grid: StudyGrid::NCmp(vec![400, 800, 1200, 1600, 2000, 2500, 3000]),
            n_seeds: 50,
            seed: 0,
            truth: TruthSpec::default(),
            fit_rank: 1,
            solver: SolverConfig::default(),
            methods: Method::ALL.to_vec(),
            level: 0.95,
        }
    }
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRecord {
    pub grid_index: usize,
    pub grid_value: f64,
    pub replicate: usize,
    pub method: Method,
    /// `None` when the fit failed.
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
}

/// One simulated dataset and its ground truth.
pub struct Replicate {
    pub truth: HjaParams,
    pub counts: AggregatedCounts,
}

pub fn simulate_replicate(truth_spec: &TruthSpec, n_cmp: u64, seed: u64) -> Result<Replicate> {
    let spec = TruthSpec { seed: derive_seed(seed, 0, 0), ..*truth_spec };
    let truth = generate_truth(&spec)?;
    let design = allocate_comparisons(n_cmp, spec.n_judges, spec.n_items, derive_seed(seed, 1, 0));
    let counts = sample_outcomes(&truth, &design, derive_seed(seed, 2, 0))?;
    Ok(Replicate { truth, counts })
}

/// Fit one method and score it against the truth.
pub fn evaluate_method(
    method: Method,
    rep: &Replicate,
    fit_rank: usize,
    solver: &SolverConfig,
    level: f64,
) -> Result<MetricReport> {
    let counts = &rep.counts;
    let (params, engine) = match method {
        Method::Hja => {
            let cfg = SolverConfig { rank: fit_rank, ..solver.clone() };
            let params = fit(counts, &cfg)?.params;
            let engine = InferenceEngine::new(&params, counts);
            (params, Some(engine))
        }
        Method::SensitivityOnly => {
            let params = fit_baseline(counts, BaselineKind::SensitivityOnly, solver)?;
            let engine = InferenceEngine::new(&params, counts);
            (params, Some(engine))
        }
        Method::PooledBtl => {
            let params = fit_baseline(counts, BaselineKind::Pooled, solver)?;
            let engine = InferenceEngine::with_options(&params, counts, true);
            (params, Some(engine))
        }
        Method::BtlSvd => {
            let cfg = SolverConfig { rank: fit_rank, ..solver.clone() };
            (fit_baseline(counts, BaselineKind::BtlSvd, &cfg)?, None)
        }
    };
    let bounds = match engine {
        Some(engine) => Some(
            engine?
                .score_intervals(level)?
                .into_iter()
                .map(|iv| (iv.lower, iv.upper))
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    compute_metrics(&params, &rep.truth, bounds.as_deref())
}

/// Run every grid point, replicate and method. Records come back in grid, replicate,
/// method order regardless of scheduling.
pub fn run_recovery_cells(cfg: &StudyConfig) -> Vec<StudyRecord> {
    let jobs: Vec<(usize, usize)> = (0..cfg.grid.len())
        .flat_map(|g| (0..cfg.n_seeds).map(move |s| (g, s)))
        .collect();
    jobs.par_iter()
        .flat_map_iter(|&(g, rep_idx)| {
            let (grid_value, n_cmp, h) = cfg.grid.point(g, cfg.truth.het_scale);
            let spec = TruthSpec { het_scale: h, ..cfg.truth };
            let seed = derive_seed(cfg.seed, g as u64, rep_idx as u64);
            let rep = simulate_replicate(&spec, n_cmp, seed);
            cfg.methods
                .iter()
                .map(|&method| {
                    let outcome = rep
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|rep| {
                            evaluate_method(method, rep, cfg.fit_rank, &cfg.solver, cfg.level)
                                .map_err(|e| e.to_string())
                        });
                    let (metrics, error) = match outcome {
                        Ok(m) => (Some(m), None),
                        Err(e) => (None, Some(e)),
                    };
                    StudyRecord { grid_index: g, grid_value, replicate: rep_idx, method, metrics, error }
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub const METRIC_NAMES: [&str; 5] = ["mse", "spearman", "ndcg", "coverage", "sign_acc"];

fn metric_value(m: &MetricReport, name: &str) -> Option<f64> {
    match name {
        "mse" => Some(m.mse),
        "spearman" => Some(m.spearman),
        "ndcg" => Some(m.ndcg),
        "coverage" => m.coverage,
        "sign_acc" => Some(m.sign_acc),
        _ => None,
    }
}

/// Mean and `1.96 sd / sqrt(n)` of a sample; `None` for an empty sample.
pub fn mean_err95(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, 1.96 * var.sqrt() / n.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub method: Method,
    pub grid_value: f64,
    pub metric: &'static str,
    pub mean: Option<f64>,
    pub err95: Option<f64>,
    pub n_ok: usize,
}

/// Aggregate replicate records into one row per method, grid point and metric.
pub fn summarize(cfg: &StudyConfig, records: &[StudyRecord]) -> Vec<StudyRow> {
    let mut rows = Vec::new();
    for g in 0..cfg.grid.len() {
        let grid_value = cfg.grid.point(g, cfg.truth.het_scale).0;
        for &method in &cfg.methods {
            for metric in METRIC_NAMES {
                let xs: Vec<f64> = records
                    .iter()
                    .filter(|r| r.grid_index == g && r.method == method)
                    .filter_map(|r| r.metrics.as_ref().and_then(|m| metric_value(m, metric)))
                    .collect();
                let stats = mean_err95(&xs);
                rows.push(StudyRow {
                    method,
                    grid_value,
                    metric,
                    mean: stats.map(|s| s.0),
                    err95: stats.map(|s| s.1),
                    n_ok: xs.len(),
                });
            }
        }
    }
    rows
}

pub fn run_recovery_study(cfg: &StudyConfig) -> Result<Vec<StudyRow>> {
    if cfg.grid.is_empty() || cfg.n_seeds == 0 || cfg.methods.is_empty() {
        return Err(HjaError::Validation("study needs a grid, seeds and methods".into()));
    }
    check_rank(cfg.truth.rank, cfg.truth.n_judges, cfg.truth.n_items)?;
    check_rank(cfg.fit_rank, cfg.truth.n_judges, cfg.truth.n_items)?;
    let records = run_recovery_cells(cfg);
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        log::warn!("{failures} of {} fits failed and were excluded", records.len());
    }
    Ok(summarize(cfg, &records))
}

pub fn write_study_csv<W: Write>(mut out: W, rows: &[StudyRow]) -> Result<()> {
    writeln!(out, "method,grid_value,metric,mean,err95,n_ok")?;
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method.name(),
            r.grid_value,
            r.metric,
            fmt(r.mean),
            fmt(r.err95),
            r.n_ok
        )?;
    }
    Ok(())
}
