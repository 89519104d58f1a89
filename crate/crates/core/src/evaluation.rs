//! Real-data protocols: hold-out pairwise accuracy, robustness to injected noisy
//! judges, and accuracy on near-tie item pairs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate_with, split_records, AggregatedCounts, Cell, ComparisonRecord, IdMap};
use crate::decomposition::{max_rank, HjaParams};
use crate::error::{HjaError, Result};
use crate::selection::{select_cv, SelectionMethod, SelectionOptions, DEFAULT_FOLDS};
use crate::simulation::{allocate_comparisons, derive_seed, ranking, Method};
use crate::solver::{fit, fit_baseline, BaselineKind, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub test_fraction: f64,
    pub noisy_grid: Vec<usize>,
    pub report_steps: Vec<usize>,
    pub near_tie_max_pairs: usize,
    pub near_tie_min_records: usize,
    pub seeds: Vec<u64>,
    pub cv_folds: usize,
    /// Upper bound on candidate HJA ranks; defaults to the largest admissible rank.
    pub r_max: Option<usize>,
    pub methods: Vec<Method>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            noisy_grid: (1..=10).collect(),
            report_steps: vec![1, 5, 10],
            near_tie_max_pairs: 20,
            near_tie_min_records: 20,
            seeds: (0..20).collect(),
            cv_folds: DEFAULT_FOLDS,
            r_max: None,
            methods: vec![Method::Hja, Method::SensitivityOnly, Method::PooledBtl],
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(HjaError::Validation("test_fraction must lie in (0, 1)".into()));
        }
        if self.seeds.is_empty() || self.methods.is_empty() {
            return Err(HjaError::Validation("protocols need seeds and methods".into()));
        }
        if let Some(s) = self.report_steps.iter().find(|s| **s != 0 && !self.noisy_grid.contains(s)) {
            return Err(HjaError::Validation(format!("report step {s} is not on the noisy-judge grid")));
        }
        Ok(())
    }
}

/// Fraction of non-tie test records whose direction matches the fitted scores.
/// A zero score difference earns half credit. Records with unknown labels are skipped.
pub fn holdout_accuracy(params: &HjaParams, test: &[ComparisonRecord], id_map: &IdMap) -> Result<f64> {
    let s = params.score_matrix();
    let mut correct = 0.0;
    let mut total = 0usize;
    for rec in test.iter().filter(|r| !r.is_tie()) {
        let (Some(k), Some(a), Some(b)) = (id_map.judge(&rec.judge), id_map.item(&rec.item_a), id_map.item(&rec.item_b))
        else {
            continue;
        };
        if k >= s.nrows() || a >= s.ncols() || b >= s.ncols() {
            continue;
        }
        let diff = s[(k, a)] - s[(k, b)];
        total += 1;
        if diff == 0.0 {
            correct += 0.5;
        } else if (diff > 0.0) == (rec.outcome > 0.5) {
            correct += 1.0;
        }
    }
    if total == 0 {
        return Err(HjaError::EmptyTestSet);
    }
    Ok(correct / total as f64)
}

/// Append `m` fair-coin judges on a balanced design sized to the median judge volume.
///
/// Noisy judge `idx` depends only on `(seed, idx)`, so a larger `m` extends a smaller one.
pub fn inject_noisy_judges(counts: &AggregatedCounts, m: usize, seed: u64) -> Result<AggregatedCounts> {
    if m == 0 {
        return Ok(counts.clone());
    }
    let mut volumes = counts.judge_volumes();
    volumes.sort_by(f64::total_cmp);
    let volume = match volumes.len() {
        0 => 0.0,
        n if n % 2 == 1 => volumes[n / 2],
        n => 0.5 * (volumes[n / 2 - 1] + volumes[n / 2]),
    }
    .round() as u64;
    let base_k = counts.n_judges();
    let nn = counts.n_items();
    let mut id_map = counts.id_map().clone();
    let mut cells: Vec<Cell> = counts.cells().to_vec();
    for idx in 0..m {
        let label = format!("noisy_{seed}_{idx}");
        if id_map.judge(&label).is_some() {
            return Err(HjaError::Validation(format!("judge label {label} already present")));
        }
        let k = id_map.push_judge(&label);
        debug_assert_eq!(k, base_k + idx);
        let design = allocate_comparisons(volume, 1, nn, derive_seed(seed, idx as u64, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, idx as u64, 1));
        for (_, i, j, n) in design.cells {
            let y = rng.sample(Binomial::new(n, 0.5).expect("valid binomial"));
            cells.push(Cell { k, i, j, n: n as f64, y: y as f64 });
        }
    }
    AggregatedCounts::from_cells(id_map, cells)
}

/// Fraction of rank positions at which two consensus rankings agree.
pub fn ranking_accuracy(base: &[usize], other: &[usize]) -> f64 {
    if base.is_empty() {
        return 1.0;
    }
    base.iter().zip(other).filter(|(a, b)| a == b).count() as f64 / base.len() as f64
}

/// Fit one of the Table-1 estimators. HJA uses `hja_rank`.
pub fn fit_method(method: Method, counts: &AggregatedCounts, hja_rank: usize, solver: &SolverConfig) -> Result<HjaParams> {
    match method {
        Method::Hja => Ok(fit(counts, &SolverConfig { rank: hja_rank, ..solver.clone() })?.params),
        Method::SensitivityOnly => fit_baseline(counts, BaselineKind::SensitivityOnly, solver),
        Method::PooledBtl => fit_baseline(counts, BaselineKind::Pooled, solver),
        Method::BtlSvd => fit_baseline(counts, BaselineKind::BtlSvd, &SolverConfig { rank: hja_rank, ..solver.clone() }),
    }
}

/// HJA rank by cross-validated likelihood on `records`.
pub fn cv_rank(records: &[ComparisonRecord], config: &ProtocolConfig, solver: &SolverConfig, seed: u64) -> Result<usize> {
    let map = IdMap::from_records(records);
    let r_cap = max_rank(map.n_judges(), map.n_items());
    let opts = SelectionOptions {
        method: SelectionMethod::Cv,
        r_max: config.r_max.unwrap_or(r_cap).min(r_cap),
        folds: config.cv_folds,
        seed,
    };
    Ok(select_cv(records, &opts, solver)?.chosen_rank)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessPoint {
    pub method: Method,
    pub step: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
}

/// Ranking stability as noisy judges are added to the full data.
pub fn robustness_study(
    records: &[ComparisonRecord],
    config: &ProtocolConfig,
    solver: &SolverConfig,
) -> Result<Vec<RobustnessPoint>> {
    config.validate()?;
    let solver = SolverConfig { allow_disconnected: true, ..solver.clone() };
    let map = IdMap::from_records(records);
    let counts = aggregate_with(records, &map)?;
    let rank = if config.methods.iter().any(|m| matches!(m, Method::Hja | Method::BtlSvd)) {
        cv_rank(records, config, &solver, config.seeds[0])?
    } else {
        0
    };
    let mut bases = Vec::new();
    for &method in &config.methods {
        let params = fit_method(method, &counts, rank, &solver)?;
        bases.push((method, ranking(params.mu.as_slice())));
    }
    let jobs: Vec<(usize, usize, u64)> = (0..bases.len())
        .flat_map(|b| config.noisy_grid.iter().flat_map(move |&m| config.seeds.iter().map(move |&s| (b, m, s))))
        .collect();
    let points = jobs
        .par_iter()
        .map(|&(b, step, seed)| {
            let (method, base) = &bases[b];
            let accuracy = inject_noisy_judges(&counts, step, seed)
                .and_then(|noisy| fit_method(*method, &noisy, rank, &solver))
                .map(|p| ranking_accuracy(base, &ranking(p.mu.as_slice())))
                .map_err(|e| log::warn!("{} at step {step}, seed {seed}: {e}", method.name()))
                .ok();
            RobustnessPoint { method: *method, step, seed, accuracy }
        })
        .collect();
    Ok(points)
}

/// Selected near-tie pairs split into closest, mid and farthest thirds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearTieSlices {
    /// `(i, j, pooled win rate of i)` sorted by distance of the rate from one half.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tertiles: [Vec<(usize, usize)>; 3],
}

pub const TERTILE_NAMES: [&str; 3] = ["closest", "mid", "farthest"];

/// Choose near-tie pairs from the pooled training counts.
pub fn near_tie_pairs(train: &AggregatedCounts, config: &ProtocolConfig) -> Result<NearTieSlices> {
    let mut pairs: Vec<(usize, usize, f64)> = train
        .pooled()
        .into_iter()
        .filter(|c| c.n >= config.near_tie_min_records as f64)
        .map(|c| (c.i, c.j, c.y / c.n))
        .collect();
    pairs.sort_by(|a, b| {
        (a.2 - 0.5).abs().total_cmp(&(b.2 - 0.5).abs()).then((a.0, a.1).cmp(&(b.0, b.1)))
    });
    pairs.truncate(config.near_tie_max_pairs);
    if pairs.len() < 3 {
        return Err(HjaError::InsufficientNearTiePairs { found: pairs.len() });
    }
    // contiguous thirds, earlier thirds taking the remainder
    let n = pairs.len();
    let sizes = [n / 3 + usize::from(n % 3 > 0), n / 3 + usize::from(n % 3 > 1), n / 3];
    let mut tertiles: [Vec<(usize, usize)>; 3] = Default::default();
    let mut start = 0;
    for (t, size) in sizes.into_iter().enumerate() {
        tertiles[t] = pairs[start..start + size].iter().map(|p| (p.0, p.1)).collect();
        start += size;
    }
    Ok(NearTieSlices { pairs, tertiles })
}

/// Hold-out accuracy per near-tie tertile and over all remaining test records.
/// Slices without scorable test records yield `None`.
pub fn near_tie_study(
    slices: &NearTieSlices,
    test: &[ComparisonRecord],
    id_map: &IdMap,
    params: &HjaParams,
) -> Vec<(&'static str, Option<f64>)> {
    let pair_of = |r: &ComparisonRecord| -> Option<(usize, usize)> {
        let (a, b) = (id_map.item(&r.item_a)?, id_map.item(&r.item_b)?);
        Some((a.min(b), a.max(b)))
    };
    let mut out = Vec::new();
    for (t, name) in TERTILE_NAMES.iter().enumerate() {
        let subset: Vec<ComparisonRecord> = test
            .iter()
            .filter(|r| pair_of(r).is_some_and(|p| slices.tertiles[t].contains(&p)))
            .cloned()
            .collect();
        out.push((*name, holdout_accuracy(params, &subset, id_map).ok()));
    }
    let selected: Vec<(usize, usize)> = slices.tertiles.iter().flatten().copied().collect();
    let rest: Vec<ComparisonRecord> =
        test.iter().filter(|r| pair_of(r).is_none_or(|p| !selected.contains(&p))).cloned().collect();
    out.push(("other", holdout_accuracy(params, &rest, id_map).ok()));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitOutcome {
    pub method: Method,
    pub seed: u64,
    pub holdout: Option<f64>,
    pub near_tie: Vec<(&'static str, Option<f64>)>,
}

/// Hold-out and near-tie accuracy for every method on one train/test split.
pub fn split_study(
    records: &[ComparisonRecord],
    config: &ProtocolConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<Vec<SplitOutcome>> {
    let solver = SolverConfig { allow_disconnected: true, ..solver.clone() };
    let map = IdMap::from_records(records);
    let (train, test) = split_records(records, config.test_fraction, seed)?;
    let train_counts = aggregate_with(&train, &map)?;
    let slices = near_tie_pairs(&train_counts, config)
        .map_err(|e| log::warn!("near-tie slices unavailable for seed {seed}: {e}"))
        .ok();
    let rank = if config.methods.iter().any(|m| matches!(m, Method::Hja | Method::BtlSvd)) {
        cv_rank(&train, config, &solver, seed)?
    } else {
        0
    };
    config
        .methods
        .iter()
        .map(|&method| {
            let params = fit_method(method, &train_counts, rank, &solver)?;
            Ok(SplitOutcome {
                method,
                seed,
                holdout: holdout_accuracy(&params, &test, &map).ok(),
                near_tie: slices.as_ref().map(|s| near_tie_study(s, &test, &map, &params)).unwrap_or_default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolRow {
    pub dataset: String,
    pub method: Method,
    pub protocol: &'static str,
    pub slice: String,
    pub mean: f64,
    pub sd: f64,
    pub n_seeds: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Run all three protocols and summarize them in Table-1 layout.
pub fn evaluate_dataset(
    dataset: &str,
    records: &[ComparisonRecord],
    config: &ProtocolConfig,
    solver: &SolverConfig,
) -> Result<Vec<ProtocolRow>> {
    config.validate()?;
    if records.is_empty() {
        return Err(HjaError::Validation("no records to evaluate".into()));
    }
    let robustness = robustness_study(records, config, solver)?;
    let splits: Vec<SplitOutcome> = config
        .seeds
        .par_iter()
        .map(|&seed| split_study(records, config, solver, seed))
        .collect::<Vec<Result<Vec<SplitOutcome>>>>()
        .into_iter()
        .filter_map(|r| r.map_err(|e| log::warn!("split failed: {e}")).ok())
        .flatten()
        .collect();

    let mut rows = Vec::new();
    let mut push = |method: Method, protocol: &'static str, slice: String, xs: Vec<f64>| {
        if !xs.is_empty() {
            let (mean, sd) = mean_sd(&xs);
            rows.push(ProtocolRow { dataset: dataset.to_string(), method, protocol, slice, mean, sd, n_seeds: xs.len() });
        }
    };
    for &method in &config.methods {
        for &step in &config.report_steps {
            let xs = if step == 0 {
                vec![1.0; config.seeds.len()]
            } else {
                robustness
                    .iter()
                    .filter(|p| p.method == method && p.step == step)
                    .filter_map(|p| p.accuracy)
                    .collect()
            };
            push(method, "robustness", format!("step_{step}"), xs);
        }
        let ours: Vec<&SplitOutcome> = splits.iter().filter(|s| s.method == method).collect();
        push(method, "holdout", "all".into(), ours.iter().filter_map(|s| s.holdout).collect());
        for name in TERTILE_NAMES.iter().chain(std::iter::once(&"other")) {
            let xs = ours
                .iter()
                .flat_map(|s| s.near_tie.iter())
                .filter(|(n, _)| n == name)
                .filter_map(|(_, v)| *v)
                .collect();
            push(method, "near_tie", name.to_string(), xs);
        }
    }
    Ok(rows)
}

pub fn write_protocol_csv<W: Write>(mut out: W, rows: &[ProtocolRow]) -> Result<()> {
    writeln!(out, "dataset,method,protocol,slice,mean,sd,n_seeds")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.dataset, r.method.name(), r.protocol, r.slice, r.mean, r.sd, r.n_seeds)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn rec(j: &str, a: &str, b: &str, o: f64) -> ComparisonRecord {
        ComparisonRecord::new(j, a, b, o).unwrap()
    }

    #[test]
    fn holdout_half_credit_and_ties() {
        let map = IdMap::from_labels(vec!["j".into()], vec!["a".into(), "b".into()]).unwrap();
        let flat = HjaParams::neutral(1, 2, 0);
        let test = vec![rec("j", "a", "b", 1.0), rec("j", "a", "b", 0.0), rec("j", "b", "a", 0.5)];
        assert_eq!(holdout_accuracy(&flat, &test, &map).unwrap(), 0.5);
        let mut p = HjaParams::neutral(1, 2, 0);
        p.mu = DVector::from_vec(vec![1.0, -1.0]);
        let agree = vec![rec("j", "a", "b", 1.0), rec("j", "b", "a", 0.0)];
        assert_eq!(holdout_accuracy(&p, &agree, &map).unwrap(), 1.0);
        assert!(matches!(holdout_accuracy(&p, &[rec("j", "a", "b", 0.5)], &map), Err(HjaError::EmptyTestSet)));
    }

    #[test]
    fn tertiles_follow_distance_order() {
        let cells = vec![
            Cell { k: 0, i: 0, j: 1, n: 100.0, y: 60.0 },
            Cell { k: 0, i: 0, j: 2, n: 100.0, y: 50.0 },
            Cell { k: 0, i: 1, j: 2, n: 100.0, y: 51.0 },
        ];
        let counts = AggregatedCounts::from_cells(IdMap::synthetic(1, 3), cells).unwrap();
        let s = near_tie_pairs(&counts, &ProtocolConfig::default()).unwrap();
        assert_eq!(s.tertiles, [vec![(0, 2)], vec![(1, 2)], vec![(0, 1)]]);
    }

    #[test]
    fn ranking_accuracy_counts_positions() {
        assert_eq!(ranking_accuracy(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 5, 4]), 4.0 / 6.0);
    }
}
