//! Heterogeneity-rank selection by BIC or cross-validated likelihood, plus the
//! residual spectrum as a diagnostic.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate_with, check_connectivity, fold_assignment, AggregatedCounts, ComparisonRecord, IdMap};
use crate::decomposition::{check_rank, max_rank, HjaParams};
use crate::error::{HjaError, Result};
use crate::likelihood::nll;
use crate::linalg::thin_svd;
use crate::solver::{fit, fit_pooled_btl, FitResult, SolverConfig};

pub const DEFAULT_FOLDS: usize = 5;

/// Degrees of freedom of the heterogeneity term, `r (K + N - r - 3)`.
pub fn heterogeneity_dof(n_judges: usize, n_items: usize, rank: usize) -> usize {
    rank * (n_judges + n_items - rank - 3)
}

/// `2 L + d_r log n` at the fitted parameters.
pub fn bic(fit: &FitResult, counts: &AggregatedCounts) -> f64 {
    bic_value(&fit.params, counts)
}

fn bic_value(params: &HjaParams, counts: &AggregatedCounts) -> f64 {
    let d = heterogeneity_dof(counts.n_judges(), counts.n_items(), params.rank()) as f64;
    2.0 * nll(params, counts) + d * counts.n_total().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Bic,
    Cv,
}

impl std::str::FromStr for SelectionMethod {
    type Err = HjaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bic" => Ok(Self::Bic),
            "cv" => Ok(Self::Cv),
            other => Err(HjaError::Validation(format!("unknown rank method {other:?}; expected bic or cv"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub chosen_rank: usize,
    /// BIC or mean validation NLL per candidate rank; `None` where the fit failed.
    pub per_rank_scores: BTreeMap<usize, Option<f64>>,
    pub method: SelectionMethod,
    /// Folds skipped because their training graph was disconnected.
    pub skipped_folds: Vec<usize>,
}

pub enum SelectionInput<'a> {
    Records(&'a [ComparisonRecord]),
    Counts(&'a AggregatedCounts),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    pub method: SelectionMethod,
    pub r_max: usize,
    pub folds: usize,
    pub seed: u64,
}

/// Smallest score wins; ties go to the smaller rank.
fn argmin_rank(scores: &BTreeMap<usize, Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&r, s) in scores {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((r, s));
            }
        }
    }
    best.map(|(r, _)| r)
}

/// Fit at exactly `rank`; a fit that had to lower its rank counts as a failure.
fn fit_exact(counts: &AggregatedCounts, rank: usize, config: &SolverConfig) -> Result<FitResult> {
    let cfg = SolverConfig { rank, ..config.clone() };
    let result = fit(counts, &cfg)?;
    if result.params.rank() != rank {
        return Err(HjaError::Selection(format!("fit at rank {rank} returned rank {}", result.params.rank())));
    }
    Ok(result)
}

pub fn select_rank(data: SelectionInput<'_>, opts: &SelectionOptions, config: &SolverConfig) -> Result<RankSelection> {
    match opts.method {
        SelectionMethod::Bic => {
            let owned;
            let counts = match data {
                SelectionInput::Counts(c) => c,
                SelectionInput::Records(r) => {
                    owned = crate::data::aggregate(r)?;
                    &owned
                }
            };
            select_bic(counts, opts.r_max, config)
        }
        SelectionMethod::Cv => {
            let owned;
            let records = match data {
                SelectionInput::Records(r) => r,
                SelectionInput::Counts(c) => {
                    owned = expand_counts(c);
                    &owned
                }
            };
            select_cv(records, opts, config)
        }
    }
}

pub fn select_bic(counts: &AggregatedCounts, r_max: usize, config: &SolverConfig) -> Result<RankSelection> {
    check_rank(r_max, counts.n_judges(), counts.n_items())?;
    let scores: BTreeMap<usize, Option<f64>> = (0..=r_max)
        .into_par_iter()
        .map(|r| {
            let score = match fit_exact(counts, r, config) {
                Ok(f) => Some(bic(&f, counts)),
                Err(e) => {
                    log::warn!("rank {r} fit failed: {e}");
                    None
                }
            };
            (r, score)
        })
        .collect();
    let chosen_rank = argmin_rank(&scores).ok_or_else(|| HjaError::Selection("every candidate rank failed".into()))?;
    Ok(RankSelection { chosen_rank, per_rank_scores: scores, method: SelectionMethod::Bic, skipped_folds: Vec::new() })
}

/// Unit records reproducing aggregated counts; half wins become ties.
fn expand_counts(counts: &AggregatedCounts) -> Vec<ComparisonRecord> {
    let map = counts.id_map();
    let mut out = Vec::new();
    for c in counts.cells() {
        let wins = c.y.floor();
        let tie = c.y - wins > 0.0;
        let losses = c.n - wins - if tie { 1.0 } else { 0.0 };
        let rec = |outcome: f64| ComparisonRecord {
            judge: map.judges[c.k].clone(),
            item_a: map.items[c.i].clone(),
            item_b: map.items[c.j].clone(),
            outcome,
        };
        out.extend((0..wins as usize).map(|_| rec(1.0)));
        if tie {
            out.push(rec(0.5));
        }
        out.extend((0..losses.round() as usize).map(|_| rec(0.0)));
    }
    out
}

fn training_graph_ok(counts: &AggregatedCounts, config: &SolverConfig) -> bool {
    let report = check_connectivity(counts);
    report.pooled_connected && (config.allow_disconnected || report.all_judges_connected())
}

pub fn select_cv(records: &[ComparisonRecord], opts: &SelectionOptions, config: &SolverConfig) -> Result<RankSelection> {
    if opts.folds < 2 {
        return Err(HjaError::Validation("cross-validation needs at least 2 folds".into()));
    }
    if records.len() < opts.folds {
        return Err(HjaError::Validation(format!("{} records cannot fill {} folds", records.len(), opts.folds)));
    }
    let map = IdMap::from_records(records);
    check_rank(opts.r_max, map.n_judges(), map.n_items())?;
    let assignment = fold_assignment(records.len(), opts.folds, opts.seed);

    let mut train_sets = Vec::new();
    let mut skipped_folds = Vec::new();
    for f in 0..opts.folds {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (rec, &a) in records.iter().zip(&assignment) {
            if a == f {
                val.push(rec.clone());
            } else {
                train.push(rec.clone());
            }
        }
        let train = aggregate_with(&train, &map)?;
        let val = aggregate_with(&val, &map)?;
        if val.is_empty() || !training_graph_ok(&train, config) {
            log::warn!("fold {f} skipped: training comparison graph is disconnected");
            skipped_folds.push(f);
            continue;
        }
        train_sets.push((train, val));
    }
    if train_sets.is_empty() {
        return Err(HjaError::Selection("every fold was skipped".into()));
    }

    let jobs: Vec<(usize, usize)> = (0..=opts.r_max)
        .flat_map(|r| (0..train_sets.len()).map(move |f| (r, f)))
        .collect();
    let losses: Vec<(usize, Option<f64>)> = jobs
        .par_iter()
        .map(|&(r, f)| {
            let (train, val) = &train_sets[f];
            let loss = fit_exact(train, r, config)
                .map(|fit| nll(&fit.params, val) / val.n_total())
                .map_err(|e| log::debug!("rank {r} fold {f}: {e}"))
                .ok();
            (r, loss)
        })
        .collect();
    let mut scores = BTreeMap::new();
    for r in 0..=opts.r_max {
        let per_fold: Vec<Option<f64>> = losses.iter().filter(|(rr, _)| *rr == r).map(|(_, l)| *l).collect();
        let score = per_fold
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        scores.insert(r, score);
    }
    let chosen_rank = argmin_rank(&scores).ok_or_else(|| HjaError::Selection("every candidate rank failed".into()))?;
    Ok(RankSelection { chosen_rank, per_rank_scores: scores, method: SelectionMethod::Cv, skipped_folds })
}

/// Largest admissible rank for the data's dimensions.
pub fn default_r_max(counts: &AggregatedCounts) -> usize {
    max_rank(counts.n_judges(), counts.n_items())
}

/// Singular values of judgewise BTL scores minus the rank-0 fit, decreasing.
pub fn spectral_scree(counts: &AggregatedCounts, config: &SolverConfig) -> Result<Vec<f64>> {
    let (kk, nn) = (counts.n_judges(), counts.n_items());
    let pooled = fit_pooled_btl(counts)?;
    let mut s = nalgebra::DMatrix::zeros(kk, nn);
    for k in 0..kk {
        let row = match crate::solver::fit_judgewise_btl(counts, k) {
            Ok(row) => row,
            Err(HjaError::Connectivity { .. }) => pooled.clone(),
            Err(e) => return Err(e),
        };
        s.row_mut(k).copy_from(&row.transpose());
    }
    let cfg = SolverConfig { rank: 0, allow_disconnected: true, ..config.clone() };
    let s0 = fit(counts, &cfg)?.params.score_matrix();
    Ok(thin_svd(&(s - s0)).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dof_examples() {
        assert_eq!(heterogeneity_dof(4, 8, 1), 8);
        assert_eq!(heterogeneity_dof(20, 6, 2), 42);
        assert_eq!(heterogeneity_dof(5, 5, 0), 0);
    }

    #[test]
    fn ties_prefer_smaller_rank() {
        let scores: BTreeMap<usize, Option<f64>> = [(0, Some(3.0)), (1, Some(2.0)), (2, Some(2.0)), (3, None)].into();
        assert_eq!(argmin_rank(&scores), Some(1));
        let none: BTreeMap<usize, Option<f64>> = [(0, None)].into();
        assert_eq!(argmin_rank(&none), None);
    }

    #[test]
    fn expansion_preserves_counts() {
        let recs = vec![
            ComparisonRecord::new("j", "a", "b", 1.0).unwrap(),
            ComparisonRecord::new("j", "a", "b", 0.5).unwrap(),
            ComparisonRecord::new("j", "b", "a", 1.0).unwrap(),
            ComparisonRecord::new("j", "a", "c", 0.0).unwrap(),
        ];
        let counts = crate::data::aggregate(&recs).unwrap();
        let back = crate::data::aggregate(&expand_counts(&counts)).unwrap();
        assert_eq!(back.cells(), counts.cells());
    }
}
