mod common;

use common::*;
use hja::data::{aggregate_with, check_connectivity, parse_records, serialize_records};
use hja::decomposition::{check_constraints, DEFAULT_DELTA_MU, DEFAULT_DELTA_SIGMA};
use hja::evaluation::{holdout_accuracy, inject_noisy_judges, near_tie_pairs, ProtocolConfig};
use hja::inference::{InferenceEngine, TangentBasis, TargetSpec};
use hja::likelihood::{linear_predictor_gradient, nll, sigmoid, softplus};
use hja::selection::heterogeneity_dof;
use hja::simulation::{allocate_comparisons, compute_metrics, generate_truth, sign_accuracy, spearman, TruthSpec};
use hja::solver::{fit, SolverConfig};
use hja::{compose, decompose, reanchor, ComparisonRecord, IdMap, InputFormat, RankChoice};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn label() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,6}"
}

fn records(max: usize) -> impl Strategy<Value = Vec<ComparisonRecord>> {
    let judges = prop::sample::select(vec!["j0", "j1", "j2"]);
    let items = prop::sample::select(vec!["a", "b", "c", "d", "e"]);
    let outcome = prop::sample::select(vec![0.0, 0.5, 1.0]);
    prop::collection::vec((judges, items.clone(), items, outcome), 1..max).prop_map(|rows| {
        rows.into_iter()
            .filter(|(_, a, b, _)| a != b)
            .map(|(k, a, b, y)| ComparisonRecord::new(k, a, b, y).unwrap())
            .collect()
    })
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (3usize..=6, 5usize..=9, any::<u64>()).prop_flat_map(|(k, n, seed)| {
        let r_max = (k - 1).min(n - 2).min(2);
        (Just(k), Just(n), 0..=r_max, Just(seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_orientation(recs in records(60)) {
        prop_assume!(!recs.is_empty());
        let map = IdMap::from_records(&recs);
        let flipped: Vec<ComparisonRecord> = recs
            .iter()
            .map(|r| ComparisonRecord::new(r.judge.clone(), r.item_b.clone(), r.item_a.clone(), 1.0 - r.outcome).unwrap())
            .collect();
        let a = aggregate_with(&recs, &map).unwrap();
        let b = aggregate_with(&flipped, &map).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.n_total(), recs.len() as f64);
        let summed: f64 = a.cells().iter().map(|c| c.n).sum();
        prop_assert_eq!(summed, recs.len() as f64);
        prop_assert!(a.cells().iter().all(|c| c.i < c.j && c.y >= 0.0 && c.y <= c.n));
    }

    #[test]
    fn serialize_then_parse_is_identity(
        rows in prop::collection::vec((label(), label(), label(), prop::sample::select(vec![0.0, 0.5, 1.0])), 1..30),
        jsonl in any::<bool>(),
    ) {
        let recs: Vec<ComparisonRecord> = rows
            .into_iter()
            .filter(|(_, a, b, _)| a != b)
            .map(|(k, a, b, y)| ComparisonRecord::new(k, a, b, y).unwrap())
            .collect();
        let format = if jsonl { InputFormat::Jsonl } else { InputFormat::Csv };
        let text = serialize_records(&recs, format).unwrap();
        let (back, stats) = parse_records(text.as_bytes(), format).unwrap();
        prop_assert_eq!(stats.total(), 0);
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn complete_designs_are_connected(k in 1usize..5, n in 2usize..9, n_cmp in 0u64..500, seed in any::<u64>()) {
        let cells = k * n * (n - 1) / 2;
        let design = allocate_comparisons(n_cmp.max(cells as u64), k, n, seed);
        let truth = generate_truth(&TruthSpec { n_judges: k, n_items: n, rank: 0, het_scale: 0.0, seed }).unwrap();
        let counts = hja::simulation::sample_outcomes(&truth, &design, seed).unwrap();
        prop_assert!(check_connectivity(&counts).all_judges_connected());
    }

    #[test]
    fn allocation_is_exact_and_balanced(k in 1usize..6, n in 2usize..10, n_cmp in 0u64..5000, seed in any::<u64>()) {
        let design = allocate_comparisons(n_cmp, k, n, seed);
        prop_assert_eq!(design.total(), n_cmp);
        let c = (k * n * (n - 1) / 2) as u64;
        prop_assert_eq!(design.cells.len() as u64, c.min(n_cmp));
        // cells left out of the design hold zero comparisons
        let lo = if design.cells.len() as u64 == c { design.cells.iter().map(|c| c.3).min().unwrap() } else { 0 };
        let hi = design.cells.iter().map(|c| c.3).max().unwrap_or(0);
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(&design, &allocate_comparisons(n_cmp, k, n, seed));
    }

    #[test]
    fn reanchor_preserves_scores_and_canonicalizes((k, n, r, seed) in shape()) {
        let x = random_affine(&mut rng(seed), k, n, r);
        let y = reanchor(&x, DEFAULT_DELTA_MU, DEFAULT_DELTA_SIGMA).unwrap();
        let diff = (y.score_matrix() - x.score_matrix()).amax();
        prop_assert!(diff < 1e-10, "score change {diff}");
        prop_assert!(check_constraints(&y, 1e-8).passed);
        let counts = random_counts(&mut rng(seed ^ 1), k, n, 0.6);
        let (a, b) = (nll(&x, &counts), nll(&y, &counts));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn column_sign_flips_leave_scores_and_nll((k, n, r, seed) in shape(), col in 0usize..2) {
        prop_assume!(r > 0);
        let p = random_canonical(&mut rng(seed), k, n, r);
        let mut q = p.clone();
        let c = col % r;
        q.u.column_mut(c).neg_mut();
        q.v.column_mut(c).neg_mut();
        prop_assert!((p.score_matrix() - q.score_matrix()).amax() < 1e-12);
        let counts = random_counts(&mut rng(seed ^ 2), k, n, 0.7);
        prop_assert!((nll(&p, &counts) - nll(&q, &counts)).abs() < 1e-9);
    }

    #[test]
    fn decompose_is_idempotent_and_rank_bounded((k, n, r, seed) in shape()) {
        let p = random_canonical(&mut rng(seed), k, n, r);
        let s = compose(&p).unwrap();
        let once = decompose(&s, RankChoice::Auto, 1e-10).unwrap().params;
        let again = decompose(&compose(&once).unwrap(), RankChoice::Auto, 1e-10).unwrap().params;
        prop_assert!(once.rank() <= (k - 1).min(n - 2));
        prop_assert_eq!(once.rank(), again.rank());
        prop_assert!(param_distance(&once, &again) < 1e-9);
    }

    #[test]
    fn predictor_gradient_is_sparse((k, n, r, seed) in shape(), triple in (0usize..6, 0usize..9, 0usize..9)) {
        let p = random_ambient(&mut rng(seed), k, n, r);
        let (kk, i, j) = (triple.0 % k, triple.1 % n, triple.2 % n);
        prop_assume!(i != j);
        let g = linear_predictor_gradient(&p, kk, i, j).unwrap();
        prop_assert_eq!(g.entries.len(), 3 + 3 * r);
        let mut idx: Vec<usize> = g.entries.iter().map(|e| e.0).collect();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), 3 + 3 * r);
    }

    #[test]
    fn link_functions_stay_finite(x in -700.0f64..700.0) {
        let sp = softplus(x);
        prop_assert!(sp.is_finite() && sp >= 0.0 && sp >= x);
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generated_truth_is_canonical(seed in any::<u64>(), h in 0.0f64..3.0, r in 0usize..=2) {
        let spec = TruthSpec { n_judges: 4, n_items: 8, rank: r, het_scale: h, seed };
        let t = generate_truth(&spec).unwrap();
        prop_assert!((t.gamma.sum() - 4.0).abs() < 1e-12);
        prop_assert!((t.v.transpose() * &t.mu).amax() < 1e-12 || r == 0);
        prop_assert!(check_constraints(&t, 1e-8).passed);
        prop_assert_eq!(t, generate_truth(&spec).unwrap());
    }

    #[test]
    fn metric_sanity(seed in any::<u64>()) {
        let p = random_canonical(&mut rng(seed), 4, 6, 1);
        let x = p.mu.as_slice();
        prop_assert!((spearman(x, x) - 1.0).abs() < 1e-12);
        let bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); 24];
        let m = compute_metrics(&p, &p, Some(&bounds)).unwrap();
        prop_assert_eq!(m.coverage, Some(1.0));
        prop_assert_eq!(m.mse, 0.0);

        let q = random_canonical(&mut rng(seed ^ 3), 4, 6, 1);
        let (est, truth) = (q.score_matrix(), p.score_matrix());
        let s = sign_accuracy(&est, &truth);
        let flipped = sign_accuracy(&(-est), &truth);
        prop_assert!((s + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heterogeneity_dof_is_nonnegative_and_concave(k in 2usize..30, n in 3usize..30) {
        let r_max = (k - 1).min(n - 2);
        let d: Vec<i64> = (0..=r_max).map(|r| heterogeneity_dof(k, n, r) as i64).collect();
        prop_assert_eq!(d[0], 0);
        prop_assert!(d.iter().all(|&x| x >= 0));
        for w in d.windows(3) {
            prop_assert!(w[2] - w[1] <= w[1] - w[0]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn holdout_accuracy_is_a_permutation_invariant_fraction(seed in any::<u64>()) {
        let truth = heterogeneous_truth(3, 5, 1, 1.0, seed);
        let mut test = sample_records(&truth, 120, seed);
        let map = IdMap::synthetic(3, 5);
        let est = random_canonical(&mut rng(seed ^ 4), 3, 5, 1);
        let acc = holdout_accuracy(&est, &test, &map).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        test.shuffle(&mut rng(seed ^ 5));
        prop_assert!((holdout_accuracy(&est, &test, &map).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn noisy_judges_are_appended(m in 0usize..4, seed in any::<u64>()) {
        let base = random_counts(&mut rng(seed), 3, 5, 0.8);
        prop_assume!(!base.is_empty());
        let out = inject_noisy_judges(&base, m, seed).unwrap();
        prop_assert_eq!(out.n_judges(), base.n_judges() + m);
        let kept: Vec<_> = out.cells().iter().filter(|c| c.k < base.n_judges()).cloned().collect();
        prop_assert_eq!(kept.as_slice(), base.cells());
        prop_assert_eq!(&out.id_map().judges[..3], &base.id_map().judges[..]);
        if m == 0 {
            prop_assert_eq!(&out, &base);
        }
    }

    #[test]
    fn near_tie_tertiles_partition_the_pairs(seed in any::<u64>()) {
        let counts = random_counts(&mut rng(seed), 3, 7, 0.9);
        let config = ProtocolConfig { near_tie_min_records: 5, ..ProtocolConfig::default() };
        let slices = near_tie_pairs(&counts, &config);
        prop_assume!(slices.is_ok());
        let slices = slices.unwrap();
        let mut all: Vec<(usize, usize)> = slices.tertiles.iter().flatten().copied().collect();
        let n = all.len();
        prop_assert_eq!(n, slices.pairs.len());
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        let sizes: Vec<usize> = slices.tertiles.iter().map(|t| t.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let dist: Vec<f64> = slices.pairs.iter().map(|p| (p.2 - 0.5).abs()).collect();
        prop_assert!(dist.windows(2).all(|w| w[0] <= w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn standard_errors_ignore_the_chart_and_scale_with_volume(seed in 0u64..10_000, r in 0usize..=1) {
        let truth = heterogeneous_truth(3, 6, r, 1.0, seed);
        let design = allocate_comparisons(1500, 3, 6, seed);
        let counts = hja::simulation::sample_outcomes(&truth, &design, seed).unwrap();
        let f = fit(&counts, &SolverConfig::with_rank(r));
        prop_assume!(f.is_ok());
        let params = f.unwrap().params;
        let engine = InferenceEngine::new(&params, &counts);
        prop_assume!(engine.is_ok());
        let engine = engine.unwrap();

        let info = hja::inference::fisher_info(&params, &counts);
        let basis = hja::inference::tangent_basis(&params).unwrap();
        let d = basis.d_free;
        let mut g = rng(seed ^ 6);
        let q = DMatrix::from_fn(d, d, |_, _| normal(&mut g)).qr().q();
        let rotated = TangentBasis { basis: &basis.basis * q, d_free: d };
        let other = InferenceEngine::from_parts(&params, &info, &rotated).unwrap();

        let doubled = InferenceEngine::new(&params, &counts.scaled(2.0)).unwrap();
        for target in [TargetSpec::ConsensusContrast { i: 0, j: 1 }, TargetSpec::ScoreEntry { k: 1, i: 2 }, TargetSpec::Gamma { k: 0 }] {
            let se = engine.interval(target, 0.95).unwrap().se;
            let se_rot = other.interval(target, 0.95).unwrap().se;
            let se_dbl = doubled.interval(target, 0.95).unwrap().se;
            prop_assert!((se - se_rot).abs() <= 1e-8 * se.max(1e-12), "{target}: {se} vs {se_rot}");
            prop_assert!((se_dbl * 2f64.sqrt() - se).abs() <= 1e-8 * se.max(1e-12), "{target}: {se} vs {se_dbl}");
        }
    }
}
