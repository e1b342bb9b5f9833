//! Closed-form constrained update, its relaxations, the GEM-family baselines
//! and a brute-force KKT oracle.
//!
//! The update problem is
//!
//! ```text
//! min ½‖w − g‖²   s.t.   ḡᵀw ≥ 0,   Bᵀw = 0
//! ```
//!
//! with `B` an orthonormal basis of the task-specific space. With
//! `P = I − BBᵀ` the optimum is `Pg` when `ḡᵀPg ≥ 0`, and otherwise
//! `Pg − (ḡᵀPg / ḡᵀPḡ)·Pḡ`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, apply_projection, dot, gram_pca, orthonormalize_columns, ColumnMatrix, FlatVector,
};

/// `ḡᵀPḡ` below this fraction of `‖ḡ‖²` means `ḡ` lies in `span(B)`.
pub const DEGENERATE_DENOM: f64 = 1e-14;

const GEM_MAX_ITERS: usize = 100_000;
const GEM_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 500;

/// How the task-specific basis is trimmed before solving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relaxation {
    /// Orthonormal basis of the whole task-specific space.
    Full,
    /// Top-`K` principal directions.
    PcaTopK(usize),
    /// Gram-Schmidt of the first `K` task-specific columns (oldest memories).
    FirstK(usize),
    /// Gram-Schmidt of the last `K` task-specific columns (newest memories).
    LastK(usize),
}

impl Relaxation {
    pub fn k(&self) -> Option<usize> {
        match *self {
            Relaxation::Full => None,
            Relaxation::PcaTopK(k) | Relaxation::FirstK(k) | Relaxation::LastK(k) => Some(k),
        }
    }

    pub fn with_k(&self, k: usize) -> Relaxation {
        match self {
            Relaxation::Full => Relaxation::Full,
            Relaxation::PcaTopK(_) => Relaxation::PcaTopK(k),
            Relaxation::FirstK(_) => Relaxation::FirstK(k),
            Relaxation::LastK(_) => Relaxation::LastK(k),
        }
    }
}

impl fmt::Display for Relaxation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Relaxation::Full => write!(f, "full"),
            Relaxation::PcaTopK(k) => write!(f, "pca:{k}"),
            Relaxation::FirstK(k) => write!(f, "first:{k}"),
            Relaxation::LastK(k) => write!(f, "last:{k}"),
        }
    }
}

impl FromStr for Relaxation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown relaxation `{s}`"));
        if s == "full" {
            return Ok(Relaxation::Full);
        }
        let (kind, k) = s.split_once(':').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(Error::InvalidArgument(format!(
                "relaxation `{s}` needs K >= 1"
            )));
        }
        match kind {
            "pca" => Ok(Relaxation::PcaTopK(k)),
            "first" => Ok(Relaxation::FirstK(k)),
            "last" => Ok(Relaxation::LastK(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Concatenated,
    Layerwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub relaxation: Relaxation,
    pub rank_tol: f64,
    pub mode: UpdateMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            relaxation: Relaxation::Full,
            rank_tol: linalg::DEFAULT_RANK_TOL,
            mode: UpdateMode::Concatenated,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.relaxation.k() == Some(0) {
            return Err(Error::InvalidArgument("relaxation K must be >= 1".into()));
        }
        if !(self.rank_tol > 0.0) {
            return Err(Error::InvalidArgument("rank_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    ProjectOnly,
    ProjectAndReflect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateResult {
    pub w: FlatVector,
    pub branch: Branch,
    /// `ḡᵀPg`
    pub shared_alignment: f64,
    /// Set when `ḡᵀPḡ` was too small to divide by and `Pg` was returned.
    pub degenerate: bool,
}

/// Solves the constrained update in closed form.
pub fn solve_update(g: &[f64], shared: &[f64], basis: &ColumnMatrix) -> Result<UpdateResult> {
    if shared.len() != g.len() {
        return Err(Error::mismatch("shared gradient", g.len(), shared.len()));
    }
    let pg = apply_projection(basis, g)?;
    let alignment = dot(shared, &pg);
    if alignment >= 0.0 {
        return Ok(UpdateResult {
            w: pg,
            branch: Branch::ProjectOnly,
            shared_alignment: alignment,
            degenerate: false,
        });
    }

    let p_shared = apply_projection(basis, shared)?;
    let denom = dot(shared, &p_shared);
    if !(denom >= DEGENERATE_DENOM * dot(shared, shared)) || denom <= 0.0 {
        return Ok(UpdateResult {
            w: pg,
            branch: Branch::ProjectAndReflect,
            shared_alignment: alignment,
            degenerate: true,
        });
    }
    let mut w = pg;
    w.axpy(-(alignment / denom), &p_shared);
    if basis.cols() > 0 {
        // large coefficients amplify the rounding left in Pḡ
        w = apply_projection(basis, &w)?;
    }
    Ok(UpdateResult {
        w,
        branch: Branch::ProjectAndReflect,
        shared_alignment: alignment,
        degenerate: false,
    })
}

/// Builds the (possibly relaxed) task-specific basis.
pub fn relax_basis(g_hat: &ColumnMatrix, cfg: &SolverConfig) -> ColumnMatrix {
    relax_basis_rows(g_hat, 0..g_hat.rows(), cfg)
}

/// [`relax_basis`] on the row block `rows` of `g_hat`, without copying it
/// unless PCA needs the block as a matrix.
pub fn relax_basis_rows(
    g_hat: &ColumnMatrix,
    rows: Range<usize>,
    cfg: &SolverConfig,
) -> ColumnMatrix {
    let n = g_hat.cols();
    let len = rows.len();
    let sliced = |cols: Range<usize>| -> Vec<&[f64]> {
        cols.map(|j| &g_hat.column(j)[rows.clone()]).collect()
    };
    match cfg.relaxation {
        Relaxation::Full => orthonormalize_columns(len, &sliced(0..n), cfg.rank_tol),
        Relaxation::PcaTopK(k) if len == g_hat.rows() => gram_pca(g_hat, k, cfg.rank_tol),
        Relaxation::PcaTopK(k) => gram_pca(&g_hat.row_block(rows.start, len), k, cfg.rank_tol),
        Relaxation::FirstK(k) => orthonormalize_columns(len, &sliced(0..k.min(n)), cfg.rank_tol),
        Relaxation::LastK(k) => orthonormalize_columns(len, &sliced(n - k.min(n)..n), cfg.rank_tol),
    }
}

/// Averaged-gradient projection: a single inequality against `shared`.
pub fn agem_update(g: &[f64], shared: &[f64]) -> Result<FlatVector> {
    if shared.len() != g.len() {
        return Err(Error::mismatch("reference gradient", g.len(), shared.len()));
    }
    let alignment = dot(shared, g);
    let mut w = FlatVector::from(g);
    if alignment >= 0.0 {
        return Ok(w);
    }
    let denom = dot(shared, shared);
    if denom == 0.0 {
        return Ok(w);
    }
    w.axpy(-(alignment / denom), shared);
    Ok(w)
}

/// Index of the memory a stochastic single-memory update constrains against.
pub fn sgem_pick<R: Rng + ?Sized>(num_memories: usize, rng: &mut R) -> Result<usize> {
    if num_memories == 0 {
        return Err(Error::Empty("old-task gradient list"));
    }
    Ok(rng.random_range(0..num_memories))
}

/// Constrains against one uniformly chosen old-task gradient.
pub fn sgem_update<R: Rng + ?Sized>(
    g: &[f64],
    old_grads: &[FlatVector],
    rng: &mut R,
) -> Result<FlatVector> {
    let pick = sgem_pick(old_grads.len(), rng)?;
    agem_update(g, &old_grads[pick])
}

#[derive(Clone, Debug)]
pub struct GemOutcome {
    pub w: FlatVector,
    /// Dual variables, one per old task.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    /// Projected-gradient norm of the dual at exit.
    pub residual: f64,
    pub converged: bool,
}

/// One inequality per old task, solved through its dual
/// `min_{v ≥ 0} ½vᵀ(GGᵀ)v + (Gg)ᵀv` by projected gradient descent.
///
/// The stopping threshold is relative to `‖Gg‖` so it is independent of the
/// gradient scale.
pub fn gem_qp_update(g: &[f64], old_grads: &[FlatVector]) -> Result<GemOutcome> {
    let m = old_grads.len();
    if m == 0 {
        return Err(Error::Empty("old-task gradient list"));
    }
    for o in old_grads {
        if o.len() != g.len() {
            return Err(Error::mismatch("old-task gradient", g.len(), o.len()));
        }
    }
    let c: Vec<f64> = old_grads.iter().map(|o| dot(o, g)).collect();
    let mut q = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = dot(&old_grads[i], &old_grads[j]);
            q[i * m + j] = v;
            q[j * m + i] = v;
        }
    }

    let c_norm = linalg::norm(&c);
    let lambda = power_iteration(&q, m);
    let mut v = vec![0.0; m];
    let mut grad = vec![0.0; m];
    let mut iterations = 0;
    let mut residual = 0.0;
    let mut converged = false;

    if c_norm == 0.0 || !(lambda > 0.0) {
        converged = true;
    } else {
        let tol = GEM_TOL * c_norm;
        loop {
            let mut pg_sq = 0.0;
            for i in 0..m {
                let mut s = c[i];
                for j in 0..m {
                    s += q[i * m + j] * v[j];
                }
                grad[i] = s;
                let pg = if v[i] > 0.0 { s } else { s.min(0.0) };
                pg_sq += pg * pg;
            }
            residual = pg_sq.sqrt();
            if residual < tol {
                converged = true;
                break;
            }
            if iterations == GEM_MAX_ITERS {
                break;
            }
            for i in 0..m {
                v[i] = (v[i] - grad[i] / lambda).max(0.0);
            }
            iterations += 1;
        }
    }

    let mut w = FlatVector::from(g);
    for (o, &vi) in old_grads.iter().zip(&v) {
        if vi != 0.0 {
            w.axpy(vi, o);
        }
    }
    Ok(GemOutcome {
        w,
        multipliers: v,
        iterations,
        residual,
        converged,
    })
}

/// Largest eigenvalue of a small PSD matrix (row-major `n x n`).
fn power_iteration(q: &[f64], n: usize) -> f64 {
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut y = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        for i in 0..n {
            y[i] = (0..n).map(|j| q[i * n + j] * x[j]).sum();
        }
        let next = dot(&x, &y);
        let ny = linalg::norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi = yi / ny);
        let done = (next - lambda).abs() <= 1e-12 * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

/// Constraint residuals of an update, scaled to be dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    /// `max |Bᵀw| / ‖g‖`
    pub equality: f64,
    /// `ḡᵀw / (‖ḡ‖‖g‖)`; negative values are violations.
    pub inequality: f64,
}

impl Feasibility {
    pub fn measure(g: &[f64], shared: &[f64], basis: &ColumnMatrix, w: &[f64]) -> Result<Self> {
        let g_norm = linalg::norm(g);
        let s_norm = linalg::norm(shared);
        let bw = basis.transpose_mul(w)?;
        let equality = if g_norm > 0.0 {
            bw.max_abs() / g_norm
        } else {
            bw.max_abs()
        };
        let sw = dot(shared, w);
        let inequality = if g_norm > 0.0 && s_norm > 0.0 {
            sw / (g_norm * s_norm)
        } else {
            sw
        };
        Ok(Feasibility {
            equality,
            inequality,
        })
    }

    pub fn satisfied(&self, tol: f64) -> bool {
        self.equality <= tol && self.inequality >= -tol
    }

    /// Worst case of two measurements.
    pub fn worst(self, other: Feasibility) -> Feasibility {
        Feasibility {
            equality: self.equality.max(other.equality),
            inequality: self.inequality.min(other.inequality),
        }
    }
}

/// Brute-force solution of the update problem by KKT case enumeration.
///
/// Both cases (inequality inactive, inequality active) are solved as dense
/// saddle-point systems; the feasible candidate with the smaller objective
/// wins. Intended for small dimensions only.
pub fn qp_oracle(g: &[f64], shared: &[f64], basis: &ColumnMatrix) -> Result<FlatVector> {
    let n = g.len();
    if shared.len() != n {
        return Err(Error::mismatch("shared gradient", n, shared.len()));
    }
    if basis.rows() != n {
        return Err(Error::mismatch("basis rows", n, basis.rows()));
    }
    let r = basis.cols();
    let g_norm = linalg::norm(g);
    let s_norm = linalg::norm(shared);
    let slack_tol = 1e-12 * g_norm * s_norm;
    let objective =
        |w: &[f64]| -> f64 { w.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |w: Vec<f64>| {
        let f = objective(&w);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, w));
        }
    };

    // inequality inactive: [I B; Bᵀ 0][w; λ] = [g; 0]
    let size = n + r;
    let mut a = vec![0.0; size * size];
    let mut rhs = vec![0.0; size];
    fill_equality_block(&mut a, size, basis, n);
    rhs[..n].copy_from_slice(g);
    if let Some(sol) = dense_solve(a, rhs, size) {
        let w = sol[..n].to_vec();
        let slack: f64 = shared.iter().zip(&w).map(|(s, x)| s * x).sum();
        if slack >= -slack_tol {
            consider(w);
        }
    }

    // inequality active: [I B −ḡ; Bᵀ 0 0; ḡᵀ 0 0][w; λ; μ] = [g; 0; 0]
    let size = n + r + 1;
    let mut a = vec![0.0; size * size];
    let mut rhs = vec![0.0; size];
    fill_equality_block(&mut a, size, basis, n);
    for i in 0..n {
        a[i * size + (n + r)] = -shared[i];
        a[(n + r) * size + i] = shared[i];
    }
    rhs[..n].copy_from_slice(g);
    if let Some(sol) = dense_solve(a, rhs, size) {
        let mu = sol[n + r];
        if mu >= 0.0 {
            consider(sol[..n].to_vec());
        }
    }

    match best {
        Some((_, w)) => Ok(w.into()),
        // ḡ in span(B) with the inactive case rejected by rounding: every point
        // satisfying Bᵀw = 0 has ḡᵀw = 0, so the equality-only optimum stands
        None => {
            let size = n + r;
            let mut a = vec![0.0; size * size];
            let mut rhs = vec![0.0; size];
            fill_equality_block(&mut a, size, basis, n);
            rhs[..n].copy_from_slice(g);
            dense_solve(a, rhs, size)
                .map(|s| s[..n].to_vec().into())
                .ok_or_else(|| Error::InvalidArgument("singular KKT system".into()))
        }
    }
}

fn fill_equality_block(a: &mut [f64], size: usize, basis: &ColumnMatrix, n: usize) {
    for i in 0..n {
        a[i * size + i] = 1.0;
    }
    for (k, col) in basis.columns().enumerate() {
        for i in 0..n {
            a[i * size + n + k] = col[i];
            a[(n + k) * size + i] = col[i];
        }
    }
}

/// Gaussian elimination with partial pivoting on a row-major system.
fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() <= 1e-12 * scale {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        let p = a[col * n + col];
        for row in (col + 1)..n {
            let f = a[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in (row + 1)..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> FlatVector {
        FlatVector::from(x)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn unconstrained_when_aligned() {
        let r = solve_update(&[2.0, 3.0], &[1.0, 0.0], &ColumnMatrix::empty(2)).unwrap();
        assert_eq!(r.w.as_slice(), &[2.0, 3.0]);
        assert_eq!(r.branch, Branch::ProjectOnly);
    }

    #[test]
    fn reflects_against_shared() {
        let r = solve_update(&[-1.0, 1.0], &[1.0, 0.0], &ColumnMatrix::empty(2)).unwrap();
        assert_eq!(r.w.as_slice(), &[0.0, 1.0]);
        assert_eq!(r.branch, Branch::ProjectAndReflect);
        assert_eq!(r.shared_alignment, -1.0);
    }

    #[test]
    fn projects_then_reflects() {
        let b = ColumnMatrix::from_columns(3, &[[1.0, 0.0, 0.0]]).unwrap();
        let r = solve_update(&[1.0, -2.0, 3.0], &[0.0, 1.0, 0.0], &b).unwrap();
        assert_eq!(r.shared_alignment, -2.0);
        assert!(close(&r.w, &[0.0, 0.0, 3.0], 1e-15));
        assert_eq!(r.branch, Branch::ProjectAndReflect);
    }

    #[test]
    fn degenerate_shared_in_basis() {
        let b = ColumnMatrix::from_columns(3, &[[0.0, 1.0, 0.0]]).unwrap();
        // ḡ lies in span(B) while Pg has a negative alignment only via rounding-level noise
        let shared = [1e-9, 1.0, 0.0];
        let r = solve_update(&[-1.0, 5.0, 2.0], &shared, &b).unwrap();
        assert_eq!(r.branch, Branch::ProjectAndReflect);
        assert!(r.degenerate);
        assert!(close(&r.w, &[-1.0, 0.0, 2.0], 1e-15));
    }

    #[test]
    fn agem_examples() {
        assert_eq!(
            agem_update(&[2.0, 3.0], &[1.0, 0.0]).unwrap().as_slice(),
            &[2.0, 3.0]
        );
        assert_eq!(
            agem_update(&[-1.0, 1.0], &[1.0, 0.0]).unwrap().as_slice(),
            &[0.0, 1.0]
        );
        assert_eq!(
            agem_update(&[-1.0, 1.0], &[0.0, 0.0]).unwrap().as_slice(),
            &[-1.0, 1.0]
        );
    }

    #[test]
    fn sgem_single_and_identical_memories() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = [-1.0, 2.0, 0.5];
        let m = v(&[1.0, 0.0, 1.0]);
        let expected = agem_update(&g, &m).unwrap();
        assert_eq!(
            sgem_update(&g, std::slice::from_ref(&m), &mut rng).unwrap(),
            expected
        );
        let many = vec![m.clone(); 4];
        for _ in 0..10 {
            assert_eq!(sgem_update(&g, &many, &mut rng).unwrap(), expected);
        }
        assert!(sgem_update(&g, &[], &mut rng).is_err());
    }

    #[test]
    fn sgem_replays_seeded_choices() {
        let old: Vec<FlatVector> = (0..5)
            .map(|i| v(&[(i as f64) - 2.0, 1.0, -(i as f64)]))
            .collect();
        let g = [1.0, -3.0, 2.0];
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pick = b.random_range(0..old.len());
            assert_eq!(
                sgem_update(&g, &old, &mut a).unwrap(),
                agem_update(&g, &old[pick]).unwrap()
            );
        }
    }

    #[test]
    fn gem_feasible_start_returns_g() {
        let g = [1.0, 1.0];
        let out = gem_qp_update(&g, &[v(&[1.0, 0.0]), v(&[0.0, 2.0])]).unwrap();
        assert_eq!(out.w.as_slice(), &g);
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn gem_single_memory_is_agem_bitwise() {
        let g = [-1.5, 0.25, 3.0, -2.0];
        let m = v(&[1.0, 0.5, -0.75, 2.0]);
        let gem = gem_qp_update(&g, std::slice::from_ref(&m)).unwrap();
        let agem = agem_update(&g, &m).unwrap();
        assert!(gem.converged);
        assert!(gem
            .w
            .iter()
            .zip(agem.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn oracle_inactive_and_complement() {
        let b = ColumnMatrix::from_columns(3, &[[1.0, 0.0, 0.0]]).unwrap();
        let w = qp_oracle(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0], &b).unwrap();
        assert!(close(&w, &[0.0, 2.0, 3.0], 1e-14));

        let b = ColumnMatrix::from_columns(3, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let w = qp_oracle(&[0.0, 0.0, 4.0], &[0.3, -0.2, 1.0], &b).unwrap();
        assert!(close(&w, &[0.0, 0.0, 4.0], 1e-14));
    }

    #[test]
    fn relaxation_variants() {
        let g_hat =
            ColumnMatrix::from_columns(3, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, -1.0, 0.0]])
                .unwrap();
        let cfg = |relaxation| SolverConfig {
            relaxation,
            ..SolverConfig::default()
        };
        assert_eq!(relax_basis(&g_hat, &cfg(Relaxation::Full)).cols(), 2);
        let first = relax_basis(&g_hat, &cfg(Relaxation::FirstK(1)));
        assert_eq!(first.cols(), 1);
        assert!(close(first.column(0), &[1.0, 0.0, 0.0], 0.0));
        let last = relax_basis(&g_hat, &cfg(Relaxation::LastK(1)));
        let h = 0.5_f64.sqrt();
        assert!(close(last.column(0), &[h, h, 0.0], 1e-15));
        assert_eq!(relax_basis(&g_hat, &cfg(Relaxation::LastK(9))).cols(), 2);
        assert_eq!(relax_basis(&g_hat, &cfg(Relaxation::PcaTopK(1))).cols(), 1);

        let rank_one = ColumnMatrix::from_columns(2, &[[1.0, 2.0], [-1.0, -2.0]]).unwrap();
        assert_eq!(relax_basis(&rank_one, &cfg(Relaxation::Full)).cols(), 1);
    }

    #[test]
    fn relaxation_parse_round_trip() {
        for r in [
            Relaxation::Full,
            Relaxation::PcaTopK(3),
            Relaxation::FirstK(1),
            Relaxation::LastK(7),
        ] {
            assert_eq!(r.to_string().parse::<Relaxation>().unwrap(), r);
        }
        assert!("pca:0".parse::<Relaxation>().is_err());
        assert!("nope".parse::<Relaxation>().is_err());
    }
}
