//! Small dense helpers shared by the geometry, solver and inference code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative cutoff below which singular values are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn skew(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

pub fn as_matrix(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn as_vector(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(sym(m));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Moore-Penrose inverse of a symmetric matrix and its numerical rank.
pub fn pinv_sym(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let (vals, vecs) = sorted_eigen(m);
    let top = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    if top == 0.0 || !top.is_finite() {
        return (out, 0);
    }
    for k in 0..n {
        if vals[k].abs() > PINV_RTOL * top {
            rank += 1;
            let c = vecs.column(k);
            out += (&c * c.transpose()) / vals[k];
        }
    }
    (out, rank)
}

/// Moore-Penrose inverse of a general matrix.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    if m.is_empty() {
        return out;
    }
    let (u, s, v) = svd(m);
    let top = s[0];
    if top == 0.0 {
        return out;
    }
    for k in 0..s.len() {
        if s[k] > PINV_RTOL * top {
            out += v.column(k) * u.column(k).transpose() / s[k];
        }
    }
    out
}

/// Thin SVD `m = U diag(s) V'` with `s` sorted descending, by one-sided Jacobi.
/// nalgebra's bidiagonal SVD loses accuracy on exactly rank-deficient input,
/// which the fixed-rank projection hits on every manifold point.
pub fn svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (u, s, v) = svd(&m.transpose());
        return (v, s, u);
    }
    let (rows, k) = m.shape();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(k, k);
    for _ in 0..60 {
        let mut rotated = false;
        for i in 0..k {
            for j in i + 1..k {
                let alpha = a.column(i).norm_squared();
                let beta = a.column(j).norm_squared();
                let gamma = a.column(i).dot(&a.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for mat in [&mut a, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, i)], mat[(r, j)]);
                        mat[(r, i)] = c * x - sn * y;
                        mat[(r, j)] = sn * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..k).map(|j| a.column(j).norm()).collect();
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let top = norms.iter().fold(0.0_f64, |acc, &x| acc.max(x));
    let mut u = DMatrix::zeros(rows, k);
    let mut vs = DMatrix::zeros(k, k);
    let mut s = DVector::zeros(k);
    let mut filled = Vec::new();
    for (col, &i) in idx.iter().enumerate() {
        s[col] = norms[i];
        vs.set_column(col, &v.column(i));
        if norms[i] > f64::EPSILON * top * k as f64 && norms[i] > 0.0 {
            u.set_column(col, &(a.column(i) / norms[i]));
            filled.push(col);
        }
    }
    // Complete U with an orthonormal basis of the remaining directions.
    let mut basis = 0;
    for col in 0..k {
        if filled.contains(&col) {
            continue;
        }
        loop {
            let mut e = DVector::zeros(rows);
            e[basis] = 1.0;
            basis += 1;
            for &f in &filled {
                let proj = u.column(f).dot(&e);
                e -= u.column(f) * proj;
            }
            for &f in &filled {
                let proj = u.column(f).dot(&e);
                e -= u.column(f) * proj;
            }
            let norm = e.norm();
            if norm > 0.5 {
                u.set_column(col, &(e / norm));
                break;
            }
        }
        filled.push(col);
    }
    (u, s, vs)
}

/// Symmetric square root and inverse square root of a positive definite matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    if m.nrows() == 2 {
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if !(det > 0.0 && m[(0, 0)] > 0.0) {
            return None;
        }
        let root = sqrt_2x2(m);
        let rd = root[(0, 0)] * root[(1, 1)] - root[(0, 1)] * root[(1, 0)];
        let inv = DMatrix::from_row_slice(2, 2, &[root[(1, 1)], -root[(0, 1)], -root[(1, 0)], root[(0, 0)]]) / rd;
        return Some((root, inv));
    }
    let (vals, vecs) = sorted_eigen(m);
    if vals.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let s = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt()));
    let si = s.map(|v| 1.0 / v);
    let root = &vecs * DMatrix::from_diagonal(&s) * vecs.transpose();
    let inv_root = &vecs * DMatrix::from_diagonal(&si) * vecs.transpose();
    Some((root, inv_root))
}

/// Square root of a symmetric positive semidefinite matrix (negative rounding noise clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 2 {
        return sqrt_2x2(m);
    }
    let (vals, vecs) = sorted_eigen(m);
    let s = vals.map(|v| v.max(0.0).sqrt());
    &vecs * DMatrix::from_diagonal(&s) * vecs.transpose()
}

// sqrt(M) = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M)) for 2x2 PSD M.
fn sqrt_2x2(m: &DMatrix<f64>) -> DMatrix<f64> {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let s = (a * d - b * b).max(0.0).sqrt();
    let t = (a + d + 2.0 * s).max(0.0).sqrt();
    if t == 0.0 {
        return DMatrix::zeros(2, 2);
    }
    DMatrix::from_row_slice(2, 2, &[(a + s) / t, b / t, b / t, (d + s) / t])
}

/// Orthonormal basis for the column space of `a` with `dim` columns, built by
/// Gram-Schmidt with largest-residual pivoting (ties to the lowest index).
/// Each column is signed so that its first entry above `1e-12` is positive.
pub fn pivoted_basis(a: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let rows = a.nrows();
    let mut residual = a.clone();
    let mut frame = DMatrix::zeros(rows, dim);
    for k in 0..dim {
        let mut best = 0;
        let mut best_norm = -1.0;
        for j in 0..residual.ncols() {
            let nj = residual.column(j).norm();
            if nj > best_norm {
                best_norm = nj;
                best = j;
            }
        }
        let mut q = residual.column(best).into_owned();
        // re-orthogonalize once more for stability
        for i in 0..k {
            let fi = frame.column(i);
            let c = fi.dot(&q);
            q -= fi * c;
        }
        let nq = q.norm();
        if nq > 0.0 {
            q /= nq;
        }
        if let Some(first) = q.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                q = -q;
            }
        }
        for j in 0..residual.ncols() {
            let c = q.dot(&residual.column(j));
            let mut col = residual.column_mut(j);
            col.axpy(-c, &q, 1.0);
        }
        frame.set_column(k, &q);
    }
    frame
}

/// Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

/// Sample quantile with linear interpolation between order statistics (type 7).
pub fn quantile_type7(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
