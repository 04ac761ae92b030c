//! Dense real matrices and the symmetric eigensolver used by the kernel
//! analyses.
//!
//! [`DenseMatrix`] is a plain row-major `f64` matrix. [`sym_eig`] runs cyclic
//! Jacobi rotations and returns a [`Spectrum`] whose eigenvalues are sorted in
//! descending order and whose eigenvectors are stored as the *rows* of `Q`, so
//! that `K = Qᵀ Λ Q`.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};

/// Convergence target for the Jacobi sweeps, relative to `‖K‖_F`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Upper bound on Jacobi sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Floor applied to eigenvalues when they are exported or plotted on a log
/// scale. Stored spectra keep the raw (possibly slightly negative) values.
pub const EXPORT_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of finite `f64` entries.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input, which
    /// is only ever a programming error at the call site.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), m, "ragged rows");
            data.extend_from_slice(r);
        }
        DenseMatrix {
            rows: n,
            cols: m,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `‖M‖_max`, the largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|K[i][j] - K[j][i]|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(K + Kᵀ) / 2`.
    pub fn symmetrized(&self) -> DenseMatrix {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = m;
                s[(j, i)] = m;
            }
        }
        s
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigendecomposition `K = Qᵀ Λ Q` of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Row `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix,
}

impl Spectrum {
    pub fn order(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(f64::NAN)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NAN)
    }

    /// Eigenvalues with the export floor applied.
    pub fn clamped(&self) -> Vec<f64> {
        clamp_eigenvalues(&self.eigenvalues)
    }

    /// `Q v`: coordinates of `v` in the eigenbasis.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.eigenvectors.matvec(v)
    }

    /// `Qᵀ c`: maps eigenbasis coordinates back.
    pub fn unproject(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let n = self.order();
        if coeffs.len() != n {
            return Err(Error::Dimension(format!(
                "{} coefficients for a spectrum of order {n}",
                coeffs.len()
            )));
        }
        let mut out = vec![0.0; self.eigenvectors.cols()];
        for (i, &c) in coeffs.iter().enumerate() {
            for (o, &q) in out.iter_mut().zip(self.eigenvectors.row(i)) {
                *o += c * q;
            }
        }
        Ok(out)
    }

    /// `Qᵀ Λ Q`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.order();
        let q = &self.eigenvectors;
        let mut k = DenseMatrix::zeros(n, n);
        for (e, &lambda) in self.eigenvalues.iter().enumerate() {
            let v = q.row(e);
            for i in 0..n {
                let s = lambda * v[i];
                if s == 0.0 {
                    continue;
                }
                for (kij, &vj) in k.row_mut(i).iter_mut().zip(v) {
                    *kij += s * vj;
                }
            }
        }
        k
    }
}

pub fn clamp_eigenvalues(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v.max(EXPORT_FLOOR)).collect()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(K + Kᵀ)/2` before solving; inputs whose
/// asymmetry exceeds `1e-9·‖K‖_max` are rejected.
pub fn sym_eig(k: &DenseMatrix) -> Result<Spectrum> {
    if !k.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    if !k.is_finite() {
        return Err(Error::Numeric("matrix passed to sym_eig".into()));
    }
    let scale = k.max_abs();
    let asym = k.max_asymmetry();
    if asym > 1e-9 * scale {
        return Err(Error::Dimension(format!(
            "matrix is not symmetric (max asymmetry {asym:e}, max entry {scale:e})"
        )));
    }
    let n = k.rows();
    let mut a = k.symmetrized();
    let mut q = DenseMatrix::identity(n);

    let target = JACOBI_TOLERANCE * a.frobenius();
    // Rotations on entries this small cannot move the off-diagonal norm
    // measurably relative to the target.
    let skip = target / (n.max(1) as f64);

    let mut converged = n <= 1 || target == 0.0;
    let schedule = round_robin_schedule(n);
    let mut rots: Vec<Rotation> = Vec::with_capacity(n / 2);
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        if off_diagonal_norm(&a) <= target {
            converged = true;
            break;
        }
        for round in &schedule {
            rots.clear();
            rots.extend(round.iter().filter_map(|&(p, r)| Rotation::annihilating(&a, p, r, skip)));
            apply_round(&mut a, &mut q, &rots);
        }
        // Row and column passes round differently; keep `a` exactly symmetric.
        a = a.symmetrized();
    }
    if !converged {
        let off = off_diagonal_norm(&a);
        if off > target {
            return Err(Error::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
                off_norm: off,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.row_mut(dst).copy_from_slice(q.row(src));
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for (j, v) in a.row(i).iter().enumerate() {
            if i != j {
                s += v * v;
            }
        }
    }
    s.sqrt()
}

/// Cyclic ordering of all index pairs as `n−1` (or `n`) rounds of disjoint
/// pairs: index 0 stays fixed while the others rotate one seat per round.
fn round_robin_schedule(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n < 2 {
        return Vec::new();
    }
    let m = n + n % 2;
    let mut seats: Vec<usize> = (0..m).collect();
    let mut rounds = Vec::with_capacity(m - 1);
    for _ in 0..m - 1 {
        let round = (0..m / 2)
            .map(|i| (seats[i], seats[m - 1 - i]))
            .filter(|&(p, r)| p < n && r < n)
            .map(|(p, r)| (p.min(r), p.max(r)))
            .collect();
        rounds.push(round);
        seats[1..].rotate_right(1);
    }
    rounds
}

#[derive(Clone, Copy)]
struct Rotation {
    p: usize,
    r: usize,
    c: f64,
    s: f64,
    t: f64,
    apq: f64,
}

impl Rotation {
    /// Rotation zeroing `a[p][r]`; `None` when the entry is already below
    /// `skip`.
    fn annihilating(a: &DenseMatrix, p: usize, r: usize, skip: f64) -> Option<Rotation> {
        let apq = a[(p, r)];
        if apq.abs() <= skip {
            return None;
        }
        let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apq);
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        Some(Rotation { p, r, c, s: t * c, t, apq })
    }
}

fn rotate_pair(x: &mut f64, y: &mut f64, c: f64, s: f64) {
    let (xp, yr) = (*x, *y);
    *x = c * xp - s * yr;
    *y = s * xp + c * yr;
}

fn rotate_rows(m: &mut DenseMatrix, rot: &Rotation) {
    let n = m.cols();
    let (lo, hi) = m.data.split_at_mut(rot.r * n);
    let row_p = &mut lo[rot.p * n..(rot.p + 1) * n];
    for (x, y) in row_p.iter_mut().zip(hi[..n].iter_mut()) {
        rotate_pair(x, y, rot.c, rot.s);
    }
}

/// Applies a round of disjoint rotations as `Jᵀ A J`: all row updates, then
/// all column updates row by row, so every pass walks memory contiguously.
/// The rotations commute because their index pairs are disjoint.
fn apply_round(a: &mut DenseMatrix, q: &mut DenseMatrix, rots: &[Rotation]) {
    if rots.is_empty() {
        return;
    }
    let (app, arr): (Vec<f64>, Vec<f64>) = rots.iter().map(|r| (a[(r.p, r.p)], a[(r.r, r.r)])).unzip();
    for rot in rots {
        rotate_rows(a, rot);
        rotate_rows(q, rot);
    }
    let n = a.rows();
    for row in a.data.chunks_exact_mut(n) {
        for rot in rots {
            let (x, y) = (row[rot.p], row[rot.r]);
            row[rot.p] = rot.c * x - rot.s * y;
            row[rot.r] = rot.s * x + rot.c * y;
        }
    }
    for (k, rot) in rots.iter().enumerate() {
        a[(rot.p, rot.p)] = app[k] - rot.t * rot.apq;
        a[(rot.r, rot.r)] = arr[k] + rot.t * rot.apq;
        a[(rot.p, rot.r)] = 0.0;
        a[(rot.r, rot.p)] = 0.0;
    }
}

/// Gram matrix `J Jᵀ` of the rows of an `N×P` Jacobian.
///
/// The upper triangle is filled row by row, each entry a sequential dot
/// product in column order, then mirrored; the result is therefore exactly
/// symmetric and bitwise reproducible.
pub fn gram_from_jacobians(j: &DenseMatrix) -> Result<DenseMatrix> {
    if j.rows() == 0 || j.cols() == 0 {
        return Err(Error::Dimension(format!(
            "Jacobian must be non-empty, got {}x{}",
            j.rows(),
            j.cols()
        )));
    }
    if !j.is_finite() {
        return Err(Error::Numeric("Jacobian entries".into()));
    }
    let n = j.rows();
    let mut k = DenseMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = dot(j.row(a), j.row(b));
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    Ok(k)
}

/// `Qᵀ diag(e^{-λᵢ t}) Q v`, i.e. `e^{-Kt} v`.
pub fn matrix_exp_action(spectrum: &Spectrum, t: f64, v: &[f64]) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("time must be non-negative, got {t}")));
    }
    if v.len() != spectrum.order() {
        return Err(Error::Dimension(format!(
            "vector of length {} for a spectrum of order {}",
            v.len(),
            spectrum.order()
        )));
    }
    let mut coeffs = spectrum.project(v)?;
    for (c, &lambda) in coeffs.iter_mut().zip(&spectrum.eigenvalues) {
        *c *= (-lambda * t).exp();
    }
    spectrum.unproject(&coeffs)
}

/// Writes `index,eigenvalue` rows, descending, at full double precision with
/// the export floor applied.
pub fn write_spectrum_csv<W: Write>(mut w: W, eigenvalues: &[f64]) -> std::io::Result<()> {
    writeln!(w, "index,eigenvalue")?;
    for (i, v) in clamp_eigenvalues(eigenvalues).iter().enumerate() {
        writeln!(w, "{i},{}", fmt_f64(*v))?;
    }
    Ok(())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}
