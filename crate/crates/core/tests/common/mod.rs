#![allow(dead_code)]

use hja::data::{AggregatedCounts, Cell, ComparisonRecord, IdMap};
use hja::linalg::thin_svd;
use hja::simulation::{allocate_comparisons, generate_truth, TruthSpec};
use hja::HjaParams;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Canonical parameters assembled from the constraints by hand: centered `mu`,
/// `V` orthogonal to `mu` with `V^T V = N I`, `U` with orthogonal centered columns
/// of strictly decreasing norm and a positive leading entry.
pub fn random_canonical(rng: &mut ChaCha8Rng, k: usize, n: usize, r: usize) -> HjaParams {
    let mut mu = DVector::from_fn(n, |_, _| normal(rng));
    mu.add_scalar_mut(-mu.mean());
    let mut gamma = DVector::from_fn(k, |_, _| 0.3 + rng.random::<f64>());
    gamma *= k as f64 / gamma.sum();

    let mut v = DMatrix::from_fn(n, r, |_, _| normal(rng));
    center_columns(&mut v);
    let a = v.transpose() * &mu / mu.norm_squared();
    v -= &mu * a.transpose();
    let qv = v.qr().q();
    let mut u = DMatrix::from_fn(k, r, |_, _| normal(rng));
    center_columns(&mut u);
    let qu = u.qr().q();

    let sqrt_n = (n as f64).sqrt();
    let mut norms: Vec<f64> = (0..r).map(|_| 0.5 + 2.0 * rng.random::<f64>()).collect();
    norms.sort_by(|a, b| b.total_cmp(a));
    for m in 1..r {
        // keep the spectrum well separated
        norms[m] = norms[m].min(0.8 * norms[m - 1]);
    }
    let mut u = DMatrix::from_fn(k, r, |row, c| qu[(row, c)] * norms[c]);
    let mut v = DMatrix::from_fn(n, r, |row, c| qv[(row, c)] * sqrt_n);
    for c in 0..r {
        let lead = u.column(c).iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        if lead < 0.0 {
            u.column_mut(c).neg_mut();
            v.column_mut(c).neg_mut();
        }
    }
    HjaParams { gamma, mu, u, v }
}

/// Parameters that satisfy only the affine constraints.
pub fn random_affine(rng: &mut ChaCha8Rng, k: usize, n: usize, r: usize) -> HjaParams {
    let mut mu = DVector::from_fn(n, |_, _| normal(rng));
    mu.add_scalar_mut(-mu.mean());
    let mut gamma = DVector::from_fn(k, |_, _| normal(rng));
    gamma.add_scalar_mut(1.0 - gamma.mean());
    let mut u = DMatrix::from_fn(k, r, |_, _| normal(rng));
    center_columns(&mut u);
    let mut v = DMatrix::from_fn(n, r, |_, _| normal(rng));
    center_columns(&mut v);
    HjaParams { gamma, mu, u, v }
}

/// Unconstrained parameters with every entry standard normal.
pub fn random_ambient(rng: &mut ChaCha8Rng, k: usize, n: usize, r: usize) -> HjaParams {
    HjaParams {
        gamma: DVector::from_fn(k, |_, _| normal(rng)),
        mu: DVector::from_fn(n, |_, _| normal(rng)),
        u: DMatrix::from_fn(k, r, |_, _| normal(rng)),
        v: DMatrix::from_fn(n, r, |_, _| normal(rng)),
    }
}

/// Counts on a random subset of cells with integer or half-integer wins.
pub fn random_counts(rng: &mut ChaCha8Rng, k: usize, n: usize, density: f64) -> AggregatedCounts {
    let mut cells = Vec::new();
    for kk in 0..k {
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < density {
                    let cnt = rng.random_range(1..=20) as f64;
                    let y = (rng.random_range(0..=(2 * cnt as u32)) as f64) / 2.0;
                    cells.push(Cell { k: kk, i, j, n: cnt, y });
                }
            }
        }
    }
    AggregatedCounts::from_cells(IdMap::synthetic(k, n), cells).unwrap()
}

/// Individual records drawn from the model on a near-balanced design.
pub fn sample_records(truth: &HjaParams, n_cmp: u64, seed: u64) -> Vec<ComparisonRecord> {
    let (kk, nn) = (truth.n_judges(), truth.n_items());
    let s = truth.score_matrix();
    let design = allocate_comparisons(n_cmp, kk, nn, seed);
    let mut rng = rng(seed ^ 0x5eed);
    let mut out = Vec::new();
    for (k, i, j, n) in design.cells {
        let p = 1.0 / (1.0 + (-(s[(k, i)] - s[(k, j)])).exp());
        for _ in 0..n {
            let outcome = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            // alternate orientation so both label orders occur
            let rec = if rng.random::<bool>() {
                ComparisonRecord::new(&format!("judge_{k}"), &format!("item_{i}"), &format!("item_{j}"), outcome)
            } else {
                ComparisonRecord::new(&format!("judge_{k}"), &format!("item_{j}"), &format!("item_{i}"), 1.0 - outcome)
            };
            out.push(rec.unwrap());
        }
    }
    out
}

pub fn heterogeneous_truth(k: usize, n: usize, r: usize, h: f64, seed: u64) -> HjaParams {
    generate_truth(&TruthSpec { n_items: n, n_judges: k, rank: r, het_scale: h, seed }).unwrap()
}

/// Textbook BTL maximum likelihood by damped Newton on the first `N - 1` scores
/// with the last pinned to zero, then centered.
pub fn btl_oracle(n_items: usize, pairs: &[(usize, usize, f64, f64)]) -> DVector<f64> {
    let m = n_items - 1;
    let loss = |s: &DVector<f64>| -> f64 {
        pairs
            .iter()
            .map(|&(i, j, n, y)| {
                let d = s[i] - s[j];
                n * (d.max(0.0) + (-d.abs()).exp().ln_1p()) - y * d
            })
            .sum()
    };
    let mut s: DVector<f64> = DVector::zeros(n_items);
    for _ in 0..200 {
        let mut g: DVector<f64> = DVector::zeros(m);
        let mut h: DMatrix<f64> = DMatrix::zeros(m, m);
        for &(i, j, n, y) in pairs {
            let p = 1.0 / (1.0 + (-(s[i] - s[j])).exp());
            let w = n * p * (1.0 - p);
            let r = n * p - y;
            for (a, sign_a) in [(i, 1.0), (j, -1.0)] {
                if a < m {
                    g[a] += sign_a * r;
                    for (b, sign_b) in [(i, 1.0), (j, -1.0)] {
                        if b < m {
                            h[(a, b)] += sign_a * sign_b * w;
                        }
                    }
                }
            }
        }
        if g.amax() < 1e-12 {
            break;
        }
        let step = h.cholesky().expect("oracle Hessian positive definite").solve(&g);
        let current = loss(&s);
        let mut t = 1.0;
        loop {
            let mut trial = s.clone();
            for a in 0..m {
                trial[a] -= t * step[a];
            }
            if loss(&trial) <= current || t < 1e-10 {
                s = trial;
                break;
            }
            t *= 0.5;
        }
    }
    s.add_scalar_mut(-s.mean());
    s
}

/// Pool counts over judges as `(i, j, n, y)`.
pub fn pooled_pairs(counts: &AggregatedCounts) -> Vec<(usize, usize, f64, f64)> {
    counts.pooled().iter().map(|c| (c.i, c.j, c.n, c.y)).collect()
}

/// Max-abs distance between two parameter sets, allowing each `(U, V)` column
/// pair to flip sign.
pub fn param_distance(a: &HjaParams, b: &HjaParams) -> f64 {
    let mut d = (&a.gamma - &b.gamma).amax().max((&a.mu - &b.mu).amax());
    for c in 0..a.rank() {
        let same = (a.u.column(c) - b.u.column(c)).amax().max((a.v.column(c) - b.v.column(c)).amax());
        let flip = (a.u.column(c) + b.u.column(c)).amax().max((a.v.column(c) + b.v.column(c)).amax());
        d = d.max(same.min(flip));
    }
    d
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Singular values, used to sanity check generated spectra.
pub fn spectrum(m: &DMatrix<f64>) -> Vec<f64> {
    thin_svd(m).1
}
