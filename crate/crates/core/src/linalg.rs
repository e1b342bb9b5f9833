//! Dense kernels for gradient vectors and tall, narrow column matrices.
//!
//! Everything here works in `f64`. Matrices are column-major because every
//! consumer walks columns: a column is one gradient (or one basis direction)
//! of length `|θ|`, and there are only ever a handful of them.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative rank tolerance used when nothing else is configured.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatVector(Vec<f64>);

impl FlatVector {
    pub fn new(data: Vec<f64>) -> Self {
        FlatVector(data)
    }

    pub fn zeros(len: usize) -> Self {
        FlatVector(vec![0.0; len])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        axpy(&mut self.0, alpha, x);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn sub(&self, other: &[f64]) -> FlatVector {
        debug_assert_eq!(self.len(), other.len());
        FlatVector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn slice(&self, offset: usize, len: usize) -> FlatVector {
        FlatVector(self.0[offset..offset + len].to_vec())
    }

    pub fn concat<'a, I>(parts: I) -> FlatVector
    where
        I: IntoIterator<Item = &'a FlatVector>,
    {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&p.0);
        }
        FlatVector(out)
    }
}

impl Deref for FlatVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FlatVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for FlatVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FlatVector {
    fn from(v: Vec<f64>) -> Self {
        FlatVector(v)
    }
}

impl From<&[f64]> for FlatVector {
    fn from(v: &[f64]) -> Self {
        FlatVector(v.to_vec())
    }
}

/// Column-major dense matrix with at least one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColumnMatrix {
    /// An `rows x 0` matrix.
    pub fn empty(rows: usize) -> Self {
        assert!(rows >= 1, "a column matrix needs at least one row");
        ColumnMatrix {
            rows,
            cols: 0,
            data: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1, "a column matrix needs at least one row");
        ColumnMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = ColumnMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_columns<C: AsRef<[f64]>>(rows: usize, columns: &[C]) -> Result<Self> {
        let mut m = ColumnMatrix::empty(rows);
        for c in columns {
            m.push_column(c.as_ref())?;
        }
        Ok(m)
    }

    /// Builds a matrix from row-major nested slices (handy for small literals).
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        if n_rows == 0 {
            return Err(Error::Empty("matrix rows"));
        }
        let n_cols = rows[0].as_ref().len();
        let mut m = ColumnMatrix::zeros(n_rows, n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::mismatch("matrix row", n_cols, r.len()));
            }
            for (j, &x) in r.iter().enumerate() {
                m.set(i, j, x);
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[col * self.rows + row] = value;
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero chunk size, rows >= 1 guarantees it is not
        self.data.chunks_exact(self.rows)
    }

    pub fn push_column(&mut self, column: &[f64]) -> Result<()> {
        if column.len() != self.rows {
            return Err(Error::mismatch("matrix column", self.rows, column.len()));
        }
        self.data.extend_from_slice(column);
        self.cols += 1;
        Ok(())
    }

    /// Columns `range` as a new matrix.
    pub fn select_columns(&self, range: std::ops::Range<usize>) -> ColumnMatrix {
        ColumnMatrix {
            rows: self.rows,
            cols: range.len(),
            data: self.data[range.start * self.rows..range.end * self.rows].to_vec(),
        }
    }

    /// Rows `offset..offset + len` of every column.
    pub fn row_block(&self, offset: usize, len: usize) -> ColumnMatrix {
        let mut out = ColumnMatrix::empty(len);
        for c in self.columns() {
            out.data.extend_from_slice(&c[offset..offset + len]);
            out.cols += 1;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `Mᵀ v`
    pub fn transpose_mul(&self, v: &[f64]) -> Result<FlatVector> {
        if v.len() != self.rows {
            return Err(Error::mismatch("transpose product", self.rows, v.len()));
        }
        Ok(self.columns().map(|c| dot(c, v)).collect::<Vec<_>>().into())
    }

    /// `M c`
    pub fn mul(&self, coeffs: &[f64]) -> Result<FlatVector> {
        if coeffs.len() != self.cols {
            return Err(Error::mismatch("matrix product", self.cols, coeffs.len()));
        }
        let mut out = FlatVector::zeros(self.rows);
        for (c, &a) in self.columns().zip(coeffs) {
            out.axpy(a, c);
        }
        Ok(out)
    }

    /// `MᵀM` as a square matrix.
    pub fn gram(&self) -> ColumnMatrix {
        let n = self.cols;
        let mut g = ColumnMatrix::zeros(n.max(1), n);
        if n == 0 {
            return g;
        }
        for i in 0..n {
            for j in i..n {
                let v = dot(self.column(i), self.column(j));
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    }

    pub fn max_column_norm(&self) -> f64 {
        self.columns().map(norm).fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Flips `v` so its first nonzero entry is positive.
fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Orthonormal basis for the column space of `x`.
///
/// Columns are processed left to right. Each one is orthogonalized against
/// the basis built so far (two modified Gram-Schmidt passes), and dropped when
/// its residual norm falls below `rel_tol` times the largest input column norm.
pub fn modified_gram_schmidt(x: &ColumnMatrix, rel_tol: f64) -> ColumnMatrix {
    let cols: Vec<&[f64]> = x.columns().collect();
    orthonormalize_columns(x.rows(), &cols, rel_tol)
}

/// [`modified_gram_schmidt`] over borrowed columns, each of length `rows`.
pub fn orthonormalize_columns(rows: usize, columns: &[&[f64]], rel_tol: f64) -> ColumnMatrix {
    assert!(rel_tol > 0.0, "rank tolerance must be positive");
    assert!(
        columns.iter().all(|c| c.len() == rows),
        "column length must equal rows"
    );
    let mut basis = ColumnMatrix::empty(rows);
    let scale = columns.iter().map(|c| norm(c)).fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return basis;
    }
    basis.data.reserve_exact(rows * columns.len());
    let cutoff = rel_tol * scale;
    let mut v = vec![0.0; rows];
    for col in columns {
        v.copy_from_slice(col);
        for _ in 0..2 {
            for q in basis.columns() {
                let r = dot(q, &v);
                axpy(&mut v, -r, q);
            }
        }
        let r = norm(&v);
        if r <= cutoff {
            continue;
        }
        v.iter_mut().for_each(|e| *e /= r);
        fix_sign(&mut v);
        basis
            .push_column(&v)
            .expect("column length matches basis rows");
    }
    basis
}

#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Eigenvalues, largest first.
    pub values: FlatVector,
    /// Orthonormal eigenvectors, column `k` pairs with `values[k]`.
    pub vectors: ColumnMatrix,
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
pub fn jacobi_eigh(m: &ColumnMatrix) -> Result<SymmetricEigen> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("eigen input".into()));
    }

    let scale = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .fold(0.0_f64, |s, (i, j)| s.max(m.get(i, j).abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (m.get(i, j) - m.get(j, i)).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric {
                    row: i,
                    col: j,
                    gap,
                });
            }
        }
    }

    // row-major working copy, symmetrized
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m.get(i, j) + m.get(j, i));
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    if frob > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            if off(&a) < JACOBI_TOL * frob {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));

    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = ColumnMatrix::empty(n);
    let mut col = vec![0.0; n];
    for &i in &order {
        for k in 0..n {
            col[k] = v[k * n + i];
        }
        fix_sign(&mut col);
        vectors.push_column(&col).expect("square");
    }
    Ok(SymmetricEigen {
        values: values.into(),
        vectors,
    })
}

/// Top-`k` principal directions of the column space of `g_hat`.
///
/// Works on the small Gram matrix `ĜᵀĜ`: its eigenvectors `v` map back to
/// left singular directions `Ĝv/√λ`. Eigenvalues at or below
/// `rel_tol * λ_max` count as numerically zero.
pub fn gram_pca(g_hat: &ColumnMatrix, k: usize, rel_tol: f64) -> ColumnMatrix {
    assert!(k >= 1, "PCA needs K >= 1");
    let rows = g_hat.rows();
    if g_hat.cols() == 0 {
        return ColumnMatrix::empty(rows);
    }
    let eig = jacobi_eigh(&g_hat.gram()).expect("a Gram matrix is symmetric");
    let lambda_max = eig.values[0];
    if !(lambda_max > 0.0) {
        return ColumnMatrix::empty(rows);
    }
    let mut directions = ColumnMatrix::empty(rows);
    for (idx, &lambda) in eig.values.iter().enumerate().take(k) {
        if lambda <= rel_tol * lambda_max {
            break;
        }
        let mut u = g_hat
            .mul(eig.vectors.column(idx))
            .expect("eigenvector length equals column count");
        u.scale(1.0 / lambda.sqrt());
        directions.push_column(&u).expect("rows match");
    }
    // the mapped-back directions are orthonormal only up to rounding that
    // grows like λ_max/λ_k; one more orthogonalization pass restores it
    modified_gram_schmidt(&directions, rel_tol)
}

/// `(I - BBᵀ) v`, without forming the projector.
pub fn apply_projection(basis: &ColumnMatrix, v: &[f64]) -> Result<FlatVector> {
    if basis.rows() != v.len() {
        return Err(Error::mismatch("projection", basis.rows(), v.len()));
    }
    let mut out = FlatVector::from(v);
    for q in basis.columns() {
        let r = dot(q, v);
        out.axpy(-r, q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(cols: &[&[f64]]) -> ColumnMatrix {
        ColumnMatrix::from_columns(cols[0].len(), cols).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn mgs_normalizes_single_column() {
        let b = modified_gram_schmidt(&mat(&[&[2.0, 0.0, 0.0]]), DEFAULT_RANK_TOL);
        assert_eq!(b.cols(), 1);
        assert!(close(b.column(0), &[1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn mgs_two_vectors() {
        let b = modified_gram_schmidt(
            &mat(&[&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]),
            DEFAULT_RANK_TOL,
        );
        let h = 0.5_f64.sqrt();
        assert_eq!(b.cols(), 2);
        assert!(close(b.column(0), &[h, h, 0.0], 1e-15));
        assert!(close(b.column(1), &[h, -h, 0.0], 1e-15));
    }

    #[test]
    fn mgs_detects_collinear_columns() {
        let b = modified_gram_schmidt(&mat(&[&[1.0, 0.0], &[2.0, 0.0]]), DEFAULT_RANK_TOL);
        assert_eq!(b.cols(), 1);
        assert!(close(b.column(0), &[1.0, 0.0], 0.0));
    }

    #[test]
    fn mgs_empty_and_zero() {
        assert_eq!(
            modified_gram_schmidt(&ColumnMatrix::empty(4), 1e-10).cols(),
            0
        );
        assert_eq!(
            modified_gram_schmidt(&ColumnMatrix::zeros(4, 3), 1e-10).cols(),
            0
        );
    }

    #[test]
    fn jacobi_2x2() {
        let m = ColumnMatrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        let e = jacobi_eigh(&m).unwrap();
        assert!(close(&e.values, &[2.0, 0.0], 1e-14));
        let h = 0.5_f64.sqrt();
        assert!(close(e.vectors.column(0), &[h, -h], 1e-14));
    }

    #[test]
    fn jacobi_identity() {
        let e = jacobi_eigh(&ColumnMatrix::identity(3)).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        let m = ColumnMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(jacobi_eigh(&m), Err(Error::NotSymmetric { .. })));
        let r = ColumnMatrix::zeros(3, 2);
        assert!(matches!(jacobi_eigh(&r), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn pca_rank_one() {
        let b = gram_pca(&mat(&[&[1.0, 0.0], &[-1.0, 0.0]]), 1, DEFAULT_RANK_TOL);
        assert_eq!(b.cols(), 1);
        assert!(close(b.column(0), &[1.0, 0.0], 1e-15));
    }

    #[test]
    fn pca_zero_matrix() {
        for k in 1..4 {
            assert_eq!(
                gram_pca(&ColumnMatrix::zeros(5, 3), k, DEFAULT_RANK_TOL).cols(),
                0
            );
        }
    }

    #[test]
    fn projection_examples() {
        let b = mat(&[&[1.0, 0.0, 0.0]]);
        assert_eq!(
            apply_projection(&b, &[1.0, 2.0, 3.0]).unwrap().as_slice(),
            &[0.0, 2.0, 3.0]
        );
        let e = ColumnMatrix::empty(3);
        assert_eq!(
            apply_projection(&e, &[1.0, 2.0, 3.0]).unwrap().as_slice(),
            &[1.0, 2.0, 3.0]
        );
        let full = ColumnMatrix::identity(3);
        assert!(apply_projection(&full, &[1.0, 2.0, 3.0]).unwrap().max_abs() == 0.0);
        assert!(matches!(
            apply_projection(&b, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
