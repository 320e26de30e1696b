//! Small dense symmetric linear algebra.
//!
//! Everything here is sized by `d_X` (or `d_Z + d_X` for the LM test), which
//! stays in the single or low double digits. Matrices are row-major `Vec<f64>`
//! and the only factorization is a diagonally pivoted Cholesky, used both as
//! the OLS rank gate and as the general SPD solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative-pivot threshold below which a Gram matrix is treated as
/// rank deficient.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dim {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dim {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Dim {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `vᵀ M v` for a square matrix.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        debug_assert!(self.is_square() && v.len() == self.rows);
        let mut acc = 0.0;
        for i in 0..self.rows {
            acc += v[i] * dot(self.row(i), v);
        }
        acc
    }

    /// Replaces the matrix by `(M + Mᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        debug_assert!(self.is_square());
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    /// Adds `w · v vᵀ`.
    pub fn add_outer(&mut self, v: &[f64], w: f64) {
        debug_assert!(self.is_square() && v.len() == self.rows);
        let n = self.rows;
        for i in 0..n {
            let wi = w * v[i];
            for j in 0..n {
                self.data[i * n + j] += wi * v[j];
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Running sufficient statistics `Σ x xᵀ`, `Σ x y`, `Σ y²` and the row count.
///
/// Rows can be added and removed in `O(d²)`, which is what makes a left to
/// right split scan linear in the node size.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSystem {
    dim: usize,
    gram: Vec<f64>,
    cross: Vec<f64>,
    count: usize,
    yy: f64,
}

impl GramSystem {
    pub fn new(dim: usize) -> Self {
        GramSystem {
            dim,
            gram: vec![0.0; dim * dim],
            cross: vec![0.0; dim],
            count: 0,
            yy: 0.0,
        }
    }

    /// Accumulates every `(x, y)` row; fails on the first row of the wrong length.
    pub fn from_rows<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], f64)>,
    {
        let mut sys = GramSystem::new(dim);
        for (x, y) in rows {
            sys.try_add_row(x, y)?;
        }
        Ok(sys)
    }

    pub fn try_add_row(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dim {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.add_row(x, y);
        Ok(())
    }

    #[inline]
    pub fn add_row(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.dim);
        self.update(x, y, 1.0);
        self.count += 1;
    }

    #[inline]
    pub fn remove_row(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert!(self.count > 0);
        self.update(x, y, -1.0);
        self.count -= 1;
    }

    #[inline]
    fn update(&mut self, x: &[f64], y: f64, sign: f64) {
        let d = self.dim;
        // Fill the upper triangle and mirror it so `gram` stays bit-symmetric.
        for i in 0..d {
            let xi = sign * x[i];
            for j in i..d {
                self.gram[i * d + j] += xi * x[j];
            }
            self.cross[i] += xi * y;
        }
        for i in 0..d {
            for j in (i + 1)..d {
                self.gram[j * d + i] = self.gram[i * d + j];
            }
        }
        self.yy += sign * y * y;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn yy(&self) -> f64 {
        self.yy
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    pub fn cross(&self) -> &[f64] {
        &self.cross
    }

    pub fn gram_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.gram.clone(),
        }
    }

    /// `Ω̂ = gram / count`; zero matrix when empty.
    pub fn omega(&self) -> Matrix {
        let scale = if self.count == 0 {
            0.0
        } else {
            1.0 / self.count as f64
        };
        self.gram_matrix().scaled(scale)
    }

    /// `γ̂ = cross / count`; zero vector when empty.
    pub fn gamma(&self) -> Vec<f64> {
        let scale = if self.count == 0 {
            0.0
        } else {
            1.0 / self.count as f64
        };
        self.cross.iter().map(|v| v * scale).collect()
    }
}

/// Result of an OLS solve on a [`GramSystem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    pub rss: f64,
    pub ok: bool,
    /// Smallest over largest pivot of the factorization; 0 when it failed.
    pub condition_hint: f64,
}

impl OlsFit {
    fn invalid(sys: &GramSystem) -> Self {
        OlsFit {
            beta: vec![0.0; sys.dim],
            rss: sys.yy.max(0.0),
            ok: false,
            condition_hint: 0.0,
        }
    }
}

/// Fits `gram · beta = cross`.
///
/// Fails softly (`ok = false`, zero beta, `rss = yy`) when the system has
/// fewer than `min_count` rows or a relative pivot drops below `rcond`.
pub fn ols_solve(sys: &GramSystem, min_count: usize, rcond: f64) -> OlsFit {
    if sys.count == 0 || sys.count < min_count {
        return OlsFit::invalid(sys);
    }
    let Some(chol) = PivotedCholesky::factor(&sys.gram, sys.dim, rcond) else {
        return OlsFit::invalid(sys);
    };
    let beta = chol.solve(&sys.cross);
    let explained = dot(&beta, &sys.cross);
    let mut rss = sys.yy - explained;
    // Below this the subtraction carries no information.
    if rss < 1e3 * f64::EPSILON * sys.yy.abs() {
        rss = 0.0;
    }
    OlsFit {
        beta,
        rss,
        ok: true,
        condition_hint: chol.condition_hint,
    }
}

/// `Pᵀ A P = L Lᵀ` with greatest-diagonal pivoting.
struct PivotedCholesky {
    n: usize,
    lower: Vec<f64>,
    perm: Vec<usize>,
    condition_hint: f64,
}

impl PivotedCholesky {
    fn factor(a: &[f64], n: usize, rcond: f64) -> Option<Self> {
        let mut work = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = (0..n).fold(0.0_f64, |m, i| m.max(work[i * n + i]));
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        let mut lower = vec![0.0; n * n];
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot = 0.0_f64;
        for k in 0..n {
            let mut p = k;
            for i in (k + 1)..n {
                if work[i * n + i] > work[p * n + p] {
                    p = i;
                }
            }
            let pivot = work[p * n + p];
            if !(pivot > rcond * scale) {
                return None;
            }
            if p != k {
                swap_sym(&mut work, n, k, p);
                perm.swap(k, p);
                for j in 0..k {
                    lower.swap(k * n + j, p * n + j);
                }
            }
            min_pivot = min_pivot.min(pivot);
            max_pivot = max_pivot.max(pivot);
            let lkk = pivot.sqrt();
            lower[k * n + k] = lkk;
            for i in (k + 1)..n {
                lower[i * n + k] = work[i * n + k] / lkk;
            }
            for i in (k + 1)..n {
                let lik = lower[i * n + k];
                for j in (k + 1)..=i {
                    let v = work[i * n + j] - lik * lower[j * n + k];
                    work[i * n + j] = v;
                    work[j * n + i] = v;
                }
            }
        }
        Some(PivotedCholesky {
            n,
            lower,
            perm,
            condition_hint: min_pivot / max_pivot,
        })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut w: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            let mut v = w[i];
            for j in 0..i {
                v -= self.lower[i * n + j] * w[j];
            }
            w[i] = v / self.lower[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = w[i];
            for j in (i + 1)..n {
                v -= self.lower[j * n + i] * w[j];
            }
            w[i] = v / self.lower[i * n + i];
        }
        let mut out = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = w[k];
        }
        out
    }
}

fn swap_sym(a: &mut [f64], n: usize, p: usize, q: usize) {
    for j in 0..n {
        a.swap(p * n + j, q * n + j);
    }
    for i in 0..n {
        a.swap(i * n + p, i * n + q);
    }
}

/// Relative pivot floor for [`spd_solve`]; looser than the OLS gate because
/// callers only need a solution, not a rank decision.
const SPD_RCOND: f64 = 1e-14;

/// Solves `m · sol = rhs` for symmetric positive definite `m`.
pub fn spd_solve(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    spd_solve_gated(m, rhs, SPD_RCOND)
}

/// [`spd_solve`] with an explicit relative pivot floor.
pub fn spd_solve_gated(m: &Matrix, rhs: &Matrix, rcond: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dim {
            expected: m.rows,
            got: m.cols,
        });
    }
    if rhs.rows != m.rows {
        return Err(Error::Dim {
            expected: m.rows,
            got: rhs.rows,
        });
    }
    let n = m.rows;
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .fold(0.0_f64, |acc, (i, j)| {
            acc.max((m[(i, j)] - m[(j, i)]).abs())
        });
    if asym > 1e-10 * m.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::SingularMatrix("matrix is not symmetric".into()));
    }
    let chol = PivotedCholesky::factor(&m.data, n, rcond)
        .ok_or_else(|| Error::SingularMatrix(format!("{n}x{n} matrix failed the pivot gate")))?;
    let mut sol = Matrix::zeros(n, rhs.cols);
    for c in 0..rhs.cols {
        let x = chol.solve(&rhs.column(c));
        for (r, v) in x.into_iter().enumerate() {
            sol[(r, c)] = v;
        }
    }
    let resid = m.matmul(&sol)?;
    let mut worst = 0.0_f64;
    for (a, b) in resid.data.iter().zip(&rhs.data) {
        worst = worst.max((a - b).abs());
    }
    if worst > 1e-8 * rhs.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::SingularMatrix(format!(
            "solve residual {worst:.3e} exceeds tolerance"
        )));
    }
    Ok(sol)
}

/// Vector right-hand-side convenience around [`spd_solve`].
pub fn spd_solve_vec(m: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let b = Matrix::from_row_major(rhs.len(), 1, rhs.to_vec())?;
    Ok(spd_solve(m, &b)?.data)
}

/// `m⁻¹` for symmetric positive definite `m`.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    spd_solve(m, &Matrix::identity(m.rows))
}
