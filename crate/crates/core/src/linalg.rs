//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

/// Entries with magnitude at or below this are treated as zero when anchoring signs.
pub const SIGN_EPS: f64 = 1e-12;

/// Thin SVD `m = P diag(sigma) Q^T` with singular values in decreasing order.
///
/// `P` is `rows x p`, `Q` is `cols x p` with `p = min(rows, cols)`. The LAPACK-style
/// result from nalgebra is checked for reconstruction and orthogonality; on the rare
/// inputs where it is inaccurate, a one-sided Jacobi SVD is used instead.
pub fn thin_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let p = rows.min(cols);
    if p == 0 {
        return (DMatrix::zeros(rows, 0), Vec::new(), DMatrix::zeros(cols, 0));
    }
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&c| svd.singular_values[c]).collect();
    let pm = DMatrix::from_fn(rows, p, |r, c| u[(r, order[c])]);
    let qm = DMatrix::from_fn(cols, p, |r, c| v_t[(order[c], r)]);
    if svd_is_accurate(m, &pm, &sigma, &qm) {
        return (pm, sigma, qm);
    }
    log::debug!("nalgebra SVD inaccurate on a {rows}x{cols} input; using Jacobi");
    if rows >= cols {
        jacobi_svd(m)
    } else {
        let (q, s, p) = jacobi_svd(&m.transpose());
        (p, s, q)
    }
}

fn svd_is_accurate(m: &DMatrix<f64>, p: &DMatrix<f64>, sigma: &[f64], q: &DMatrix<f64>) -> bool {
    let tol = 1e-11 * m.norm().max(1.0);
    let k = sigma.len();
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return false;
    }
    let back = p * DMatrix::from_diagonal(&DVector::from_column_slice(sigma)) * q.transpose();
    let eye = DMatrix::<f64>::identity(k, k);
    max_abs(&(back - m)) <= tol
        && max_abs(&(p.transpose() * p - &eye)) <= 1e-10
        && max_abs(&(q.transpose() * q - &eye)) <= 1e-10
}

/// One-sided Jacobi SVD of a matrix with at least as many rows as columns.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, p)], mat[(r, q)]);
                        mat[(r, p)] = c * x - s * y;
                        mat[(r, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..cols).map(|c| w.column(c).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let sigma: Vec<f64> = order.iter().map(|&c| norms[c]).collect();
    let floor = sigma[0] * f64::EPSILON * rows as f64;
    let mut u = DMatrix::zeros(rows, cols);
    let mut filled = 0;
    for (c, &src) in order.iter().enumerate() {
        if sigma[c] > floor && sigma[c] > 0.0 {
            u.set_column(c, &(w.column(src) / sigma[c]));
            filled += 1;
        }
    }
    // complete the left basis for zero singular values
    let mut e = 0;
    while filled < cols && e < rows {
        let mut x = DVector::zeros(rows);
        x[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for c in 0..filled {
                let proj = u.column(c).dot(&x);
                x -= u.column(c) * proj;
            }
        }
        let norm = x.norm();
        if norm > 1e-8 {
            u.set_column(filled, &(x / norm));
            filled += 1;
        }
    }
    let q = DMatrix::from_fn(cols, cols, |r, c| v[(r, order[c])]);
    (u, sigma, q)
}

/// Orthonormal basis of the null space of `c` (as columns), plus the numerical rank of `c`.
///
/// Singular values below `rel_tol * sigma_max` count as zero.
pub fn null_space(c: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let (m, d) = c.shape();
    if d == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    // Pad to square so the thin SVD returns a complete right basis.
    let size = m.max(d);
    let mut sq = DMatrix::zeros(size, d);
    sq.view_mut((0, 0), (m, d)).copy_from(c);
    let (_, sigma, q) = thin_svd(&sq);
    let smax = sigma.first().copied().unwrap_or(0.0);
    let thresh = rel_tol * smax.max(f64::MIN_POSITIVE);
    let null_idx: Vec<usize> = (0..d).filter(|&c| sigma[c] <= thresh).collect();
    let rank = d - null_idx.len();
    let basis = DMatrix::from_fn(d, null_idx.len(), |r, col| q[(r, null_idx[col])]);
    (basis, rank)
}

/// Flip column pairs so the first entry of each `u` column above [`SIGN_EPS`] is positive.
pub fn anchor_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for m in 0..u.ncols() {
        let first = u.column(m).iter().copied().find(|x| x.abs() > SIGN_EPS);
        if matches!(first, Some(x) if x < 0.0) {
            u.column_mut(m).neg_mut();
            v.column_mut(m).neg_mut();
        }
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Row-major matrix export with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixExport {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixExport {
    fn from(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)]);
            }
        }
        Self { rows, cols, data }
    }
}

impl MatrixExport {
    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        (self.data.len() == self.rows * self.cols)
            .then(|| DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}
