//! Simulation-scale behaviour of the estimators and protocols.

mod common;

use common::*;
use hja::data::split_records;
use hja::evaluation::{evaluate_dataset, near_tie_pairs, near_tie_study, robustness_study, ProtocolConfig};
use hja::selection::{select_bic, spectral_scree};
use hja::simulation::{
    derive_seed, run_recovery_cells, run_recovery_study, simulate_replicate, spearman, summarize, Method,
    StudyConfig, StudyGrid, TruthSpec, METRIC_NAMES,
};
use hja::solver::{fit, SolverConfig};
use hja::IdMap;
use rayon::prelude::*;

#[test]
fn bic_keeps_rank_zero_on_consensus_data() {
    let spec = TruthSpec { rank: 0, het_scale: 0.0, ..TruthSpec::default() };
    let chosen: Vec<usize> = (0..50u64)
        .into_par_iter()
        .map(|s| {
            let rep = simulate_replicate(&spec, 5000, derive_seed(51, s, 0)).unwrap();
            select_bic(&rep.counts, 3, &SolverConfig::default()).unwrap().chosen_rank
        })
        .collect();
    let zeros = chosen.iter().filter(|&&r| r == 0).count();
    assert!(zeros >= 45, "rank 0 chosen {zeros}/50 times: {chosen:?}");
}

#[test]
fn consensus_order_is_recovered_at_volume() {
    let spec = TruthSpec::default();
    // the 45-of-50 rate checked on ten times as many replicates
    let rho: Vec<f64> = (0..500u64)
        .into_par_iter()
        .map(|s| {
            let rep = simulate_replicate(&spec, 3000, derive_seed(53, s, 0)).unwrap();
            let est = fit(&rep.counts, &SolverConfig::default()).unwrap().params;
            spearman(est.mu.as_slice(), rep.truth.mu.as_slice())
        })
        .collect();
    let good = rho.iter().filter(|&&r| r > 0.95).count();
    assert!(good >= 450, "Spearman above 0.95 on {good}/500 seeds");
}

#[test]
fn scree_shows_one_dominant_direction() {
    let spec = TruthSpec { het_scale: 4.0, ..TruthSpec::default() };
    let rep = simulate_replicate(&spec, 20_000, 57).unwrap();
    let sv = spectral_scree(&rep.counts, &SolverConfig::default()).unwrap();
    assert!(sv.windows(2).all(|w| w[0] >= w[1]));
    assert!(sv[0] / sv[1] > 5.0, "{sv:?}");
}

#[test]
fn study_rows_cover_grid_methods_and_metrics() {
    let cfg = StudyConfig {
        grid: StudyGrid::NCmp(vec![400, 800]),
        n_seeds: 3,
        seed: 59,
        ..StudyConfig::default()
    };
    let rows = run_recovery_study(&cfg).unwrap();
    assert_eq!(rows.len(), 2 * Method::ALL.len() * METRIC_NAMES.len());
    for row in &rows {
        if row.metric == "coverage" && !row.method.has_intervals() {
            assert_eq!(row.n_ok, 0);
        } else {
            assert_eq!(row.n_ok, 3, "{row:?}");
        }
    }
}

#[test]
fn hja_beats_pooled_under_strong_heterogeneity() {
    let cfg = StudyConfig {
        grid: StudyGrid::HetScale { values: vec![2.0], n_cmp: 800 },
        n_seeds: 50,
        seed: 61,
        truth: TruthSpec { het_scale: 2.0, ..TruthSpec::default() },
        methods: vec![Method::Hja, Method::PooledBtl],
        ..StudyConfig::default()
    };
    let rows = summarize(&cfg, &run_recovery_cells(&cfg));
    let mse = |m: Method| rows.iter().find(|r| r.method == m && r.metric == "mse").unwrap().mean.unwrap();
    assert!(mse(Method::Hja) < mse(Method::PooledBtl), "{} vs {}", mse(Method::Hja), mse(Method::PooledBtl));
}

#[test]
fn redundant_direction_stays_within_error_bars() {
    let cfg = StudyConfig {
        grid: StudyGrid::HetScale { values: vec![0.0], n_cmp: 3000 },
        n_seeds: 50,
        seed: 63,
        truth: TruthSpec { rank: 0, het_scale: 0.0, ..TruthSpec::default() },
        methods: vec![Method::Hja, Method::SensitivityOnly],
        ..StudyConfig::default()
    };
    let rows = summarize(&cfg, &run_recovery_cells(&cfg));
    let stat = |m: Method| {
        let r = rows.iter().find(|r| r.method == m && r.metric == "mse").unwrap();
        (r.mean.unwrap(), r.err95.unwrap())
    };
    let (hja, hja_err) = stat(Method::Hja);
    let (sens, sens_err) = stat(Method::SensitivityOnly);
    assert!(
        (hja - sens).abs() <= hja_err + sens_err,
        "HJA {hja:.4} +- {hja_err:.4} vs sensitivity-only {sens:.4} +- {sens_err:.4}"
    );
}

fn mt_bench_shaped(seed: u64) -> Vec<hja::ComparisonRecord> {
    let truth = heterogeneous_truth(20, 6, 1, 1.0, seed);
    sample_records(&truth, 9700, seed)
}

#[test]
fn far_pairs_are_easier_than_near_ties() {
    let records = mt_bench_shaped(67);
    let map = IdMap::from_records(&records);
    let config = ProtocolConfig::default();
    let mut closest = vec![Vec::new(); 3];
    let mut farthest = vec![Vec::new(); 3];
    for seed in 0..5 {
        let (train, test) = split_records(&records, 0.2, seed).unwrap();
        let counts = hja::data::aggregate_with(&train, &map).unwrap();
        let slices = near_tie_pairs(&counts, &config).unwrap();
        for (m, method) in [Method::Hja, Method::SensitivityOnly, Method::PooledBtl].into_iter().enumerate() {
            let params = hja::evaluation::fit_method(method, &counts, 1, &SolverConfig::default()).unwrap();
            let acc = near_tie_study(&slices, &test, &map, &params);
            closest[m].push(acc[0].1.unwrap());
            farthest[m].push(acc[2].1.unwrap());
        }
    }
    for m in 0..3 {
        assert!(mean(&farthest[m]) >= mean(&closest[m]), "method {m}: {:?} vs {:?}", farthest[m], closest[m]);
    }
}

#[test]
fn robustness_curve_shape_and_ordering() {
    let truth = heterogeneous_truth(4, 8, 1, 2.0, 71);
    let records = sample_records(&truth, 2000, 71);
    let config = ProtocolConfig {
        noisy_grid: vec![0, 5, 10],
        report_steps: vec![5, 10],
        seeds: (0..5).collect(),
        methods: vec![Method::Hja, Method::PooledBtl],
        ..ProtocolConfig::default()
    };
    let points = robustness_study(&records, &config, &SolverConfig::default()).unwrap();
    assert_eq!(points.len(), 2 * 3 * 5);
    for p in points.iter().filter(|p| p.step == 0) {
        assert_eq!(p.accuracy, Some(1.0));
    }
    let at = |m: Method| {
        let xs: Vec<f64> = points.iter().filter(|p| p.method == m && p.step == 10).filter_map(|p| p.accuracy).collect();
        mean(&xs)
    };
    assert!(at(Method::PooledBtl) <= at(Method::Hja));
}

#[test]
fn evaluation_table_is_complete() {
    let truth = heterogeneous_truth(4, 8, 1, 1.0, 73);
    let records = sample_records(&truth, 3000, 73);
    let config = ProtocolConfig {
        noisy_grid: vec![1, 2],
        report_steps: vec![1, 2],
        seeds: vec![0, 1],
        near_tie_min_records: 5,
        ..ProtocolConfig::default()
    };
    let rows = evaluate_dataset("synthetic", &records, &config, &SolverConfig::default()).unwrap();
    for method in &config.methods {
        let ours: Vec<_> = rows.iter().filter(|r| r.method == *method).collect();
        let slices: Vec<&str> = ours.iter().map(|r| r.slice.as_str()).collect();
        assert_eq!(slices, ["step_1", "step_2", "all", "closest", "mid", "farthest", "other"], "{method:?}");
        assert!(ours.iter().all(|r| (0.0..=1.0).contains(&r.mean) && r.n_seeds == 2));
    }
    let mut buf = Vec::new();
    hja::evaluation::write_protocol_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert!(text.starts_with("dataset,method,protocol,slice,mean,sd,n_seeds\n"));
}
