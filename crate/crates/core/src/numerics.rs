//! Small dense kernels used throughout the crate: Cholesky and LU solves,
//! ridge-guarded SPD inversion, Romberg differentiation, bisection and
//! reproducible random streams.
//!
//! Matrices here never grow beyond a handful of rows (parameter and moment
//! dimensions), so everything is a plain row-major `Vec<f64>`.

use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    /// `cap` is zero when the mean diagonal is not positive and no ridge
    /// schedule exists.
    #[error("matrix not positive definite up to ridge {cap:e} (mean diagonal {mean_diagonal:e})")]
    SingularAfterRidge { cap: f64, mean_diagonal: f64 },
    #[error("matrix is singular (pivot {pivot})")]
    NotInvertible { pivot: usize },
    #[error("matrix is not symmetric (max relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite function value at x = {x}")]
    NonFinite { x: f64 },
    #[error("no sign change on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense square matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be positive");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(NumericsError::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    /// Panics on ragged input; intended for literals in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "ragged matrix literal");
            data.extend_from_slice(r);
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let mut s = self.clone();
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    /// Largest `|a_ij - a_ji|` relative to the largest absolute entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst = 0.0_f64;
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn mul(&self, other: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &SquareMatrix) -> Self {
        assert_eq!(self.dim, other.dim);
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add_diagonal(&self, value: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim {
            out[(i, i)] += value;
        }
        out
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

const SYMMETRY_TOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: SquareMatrix,
}

impl Cholesky {
    /// Factorizes `a`, failing on any pivot `<= 0`.
    pub fn new(a: &SquareMatrix) -> Result<Self> {
        Self::with_pivot_floor(a, 0.0)
    }

    /// Factorizes `a`, failing on any pivot `<= floor`.
    pub fn with_pivot_floor(a: &SquareMatrix, floor: f64) -> Result<Self> {
        let asym = a.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(NumericsError::NotSymmetric { asymmetry: asym });
        }
        let d = a.dim();
        let mut l = SquareMatrix::zeros(d);
        for j in 0..d {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > floor) {
                return Err(NumericsError::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..d {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.lower;
        let d = l.dim();
        assert_eq!(b.len(), d);
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    pub fn lower(&self) -> &SquareMatrix {
        &self.lower
    }

    pub fn inverse(&self) -> SquareMatrix {
        let d = self.lower.dim();
        let mut inv = SquareMatrix::zeros(d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..d {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrized()
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &SquareMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.dim(),
            got: b.len(),
        });
    }
    Ok(Cholesky::new(a)?.solve(b))
}

/// Solves a general square system by LU with partial pivoting.
pub fn lu_solve(a: &SquareMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let d = a.dim();
    if b.len() != d {
        return Err(NumericsError::DimensionMismatch {
            expected: d,
            got: b.len(),
        });
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.max_abs();
    for col in 0..d {
        let (piv, best) = (col..d)
            .map(|r| (r, m[(r, col)].abs()))
            .fold(
                (col, -1.0),
                |acc, cur| if cur.1 > acc.1 { cur } else { acc },
            );
        if !(best > 1e-14 * scale) {
            return Err(NumericsError::NotInvertible { pivot: col });
        }
        if piv != col {
            for j in 0..d {
                let t = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = t;
            }
            x.swap(col, piv);
        }
        for r in (col + 1)..d {
            let f = m[(r, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for j in col..d {
                m[(r, j)] -= f * m[(col, j)];
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..d).rev() {
        let mut s = x[i];
        for j in (i + 1)..d {
            s -= m[(i, j)] * x[j];
        }
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}

/// Inverse of `A + ridge·I` together with the ridge that made it factorizable.
#[derive(Debug, Clone)]
pub struct RidgedInverse {
    pub inverse: SquareMatrix,
    pub ridge_used: f64,
}

/// Inverts a symmetric matrix through Cholesky, escalating a diagonal ridge
/// when the factorization fails.
///
/// The requested `ridge` is tried first. After that the ridge starts at
/// `1e-10·trace/dim` (or at `ridge` if that is larger) and grows by a factor
/// of ten per attempt until it would exceed `1e-2·trace/dim`.
pub fn invert_spd_ridge(a: &SquareMatrix, ridge: f64) -> Result<RidgedInverse> {
    if !(ridge >= 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "ridge must be nonnegative, got {ridge}"
        )));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(NumericsError::NotSymmetric { asymmetry: asym });
    }
    let try_ridge = |r: f64| Cholesky::new(&a.add_diagonal(r)).map(|c| c.inverse());
    if let Ok(inverse) = try_ridge(ridge) {
        return Ok(RidgedInverse {
            inverse,
            ridge_used: ridge,
        });
    }
    let scale = a.trace() / a.dim() as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(NumericsError::SingularAfterRidge {
            cap: 0.0,
            mean_diagonal: scale,
        });
    }
    let cap = 1e-2 * scale;
    let mut r = (1e-10 * scale).max(ridge * 10.0);
    while r <= cap * (1.0 + 1e-12) {
        if let Ok(inverse) = try_ridge(r) {
            return Ok(RidgedInverse {
                inverse,
                ridge_used: r,
            });
        }
        r *= 10.0;
    }
    Err(NumericsError::SingularAfterRidge {
        cap,
        mean_diagonal: scale,
    })
}

/// Step and depth for [`romberg_derivative`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RombergOptions {
    pub h0: Option<f64>,
    pub levels: usize,
}

impl Default for RombergOptions {
    fn default() -> Self {
        Self {
            h0: None,
            levels: 5,
        }
    }
}

impl RombergOptions {
    pub fn step_at(&self, x0: f64) -> f64 {
        self.h0.unwrap_or_else(|| 1e-4_f64.max(1e-4 * x0.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RombergEstimate {
    pub value: f64,
    /// Gap between the last two extrapolation columns.
    pub error: f64,
}

/// Richardson-extrapolated central-difference derivative of `f` at `x0`.
pub fn romberg_derivative<F>(f: F, x0: f64, h0: f64, levels: usize) -> Result<RombergEstimate>
where
    F: Fn(f64) -> f64,
{
    let est = romberg_derivative_vec(|x| Ok(vec![f(x)]), x0, h0, levels)?;
    Ok(RombergEstimate {
        value: est.values[0],
        error: est.errors[0],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RombergVecEstimate {
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Componentwise Romberg derivative of a vector-valued function.
///
/// `f` may fail (for example when an inner solve does not converge); the
/// error is passed through unchanged.
pub fn romberg_derivative_vec<F, E>(
    f: F,
    x0: f64,
    h0: f64,
    levels: usize,
) -> std::result::Result<RombergVecEstimate, E>
where
    F: Fn(f64) -> std::result::Result<Vec<f64>, E>,
    E: From<NumericsError>,
{
    if !(2..=8).contains(&levels) {
        return Err(NumericsError::InvalidArgument(format!(
            "levels must lie in [2, 8], got {levels}"
        ))
        .into());
    }
    if !(h0 > 0.0) || !h0.is_finite() {
        return Err(
            NumericsError::InvalidArgument(format!("h0 must be positive, got {h0}")).into(),
        );
    }
    let mut table: Vec<Vec<Vec<f64>>> = Vec::with_capacity(levels);
    let mut h = h0;
    for i in 0..levels {
        let fp = f(x0 + h)?;
        let fm = f(x0 - h)?;
        if fp.len() != fm.len() {
            return Err(NumericsError::DimensionMismatch {
                expected: fp.len(),
                got: fm.len(),
            }
            .into());
        }
        if let Some(bad) = fp.iter().chain(&fm).find(|v| !v.is_finite()) {
            let _ = bad;
            let x = if fp.iter().all(|v| v.is_finite()) {
                x0 - h
            } else {
                x0 + h
            };
            return Err(NumericsError::NonFinite { x }.into());
        }
        let mut row = Vec::with_capacity(i + 1);
        row.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
        let mut factor = 1.0;
        for j in 1..=i {
            factor *= 4.0;
            let prev = &row[j - 1];
            let above = &table[i - 1][j - 1];
            let next = prev
                .iter()
                .zip(above)
                .map(|(p, a)| p + (p - a) / (factor - 1.0))
                .collect();
            row.push(next);
        }
        table.push(row);
        h *= 0.5;
    }
    let last = &table[levels - 1];
    let values = last[levels - 1].clone();
    let errors = values
        .iter()
        .zip(&last[levels - 2])
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(RombergVecEstimate { values, errors })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bisection {
    pub root: f64,
    pub iterations: usize,
}

/// Bisection on a sign-changing bracket. Stops when the bracket is no wider
/// than `tol` or `g` vanishes exactly.
pub fn bisect_root<G>(g: G, lo: f64, hi: f64, tol: f64) -> Result<Bisection>
where
    G: Fn(f64) -> f64,
{
    if !(lo < hi) || !(tol > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "need lo < hi and tol > 0 (lo={lo}, hi={hi}, tol={tol})"
        )));
    }
    let (mut lo, mut hi) = (lo, hi);
    let mut glo = g(lo);
    let ghi = g(hi);
    if !glo.is_finite() {
        return Err(NumericsError::NonFinite { x: lo });
    }
    if !ghi.is_finite() {
        return Err(NumericsError::NonFinite { x: hi });
    }
    if glo == 0.0 {
        return Ok(Bisection {
            root: lo,
            iterations: 0,
        });
    }
    if ghi == 0.0 {
        return Ok(Bisection {
            root: hi,
            iterations: 0,
        });
    }
    if glo * ghi > 0.0 {
        return Err(NumericsError::NoSignChange { lo, hi });
    }
    let mut iterations = 0;
    loop {
        let mid = lo + 0.5 * (hi - lo);
        iterations += 1;
        if mid <= lo || mid >= hi {
            return Ok(Bisection {
                root: mid,
                iterations,
            });
        }
        let gm = g(mid);
        if !gm.is_finite() {
            return Err(NumericsError::NonFinite { x: mid });
        }
        if gm == 0.0 {
            return Ok(Bisection {
                root: mid,
                iterations,
            });
        }
        if (gm < 0.0) == (glo < 0.0) {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
        if hi - lo <= tol {
            return Ok(Bisection {
                root: lo + 0.5 * (hi - lo),
                iterations,
            });
        }
    }
}

/// Reproducible random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha20 with the stream id mapped onto the cipher's stream
/// counter, so streams never overlap and replication `r` can be drawn
/// without touching replications `0..r`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Mean and standard deviation of one Gaussian component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalComponent {
    pub mean: f64,
    pub sd: f64,
}

impl NormalComponent {
    pub const STANDARD: NormalComponent = NormalComponent { mean: 0.0, sd: 1.0 };

    pub fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }
}

pub fn sample_normal(rng: &mut RngStream, mean: f64, sd: f64, n: usize) -> Vec<f64> {
    assert!(sd > 0.0, "standard deviation must be positive");
    (0..n).map(|_| mean + sd * rng.standard_normal()).collect()
}

/// Draws from `(1 - c)·comp1 + c·comp2`.
///
/// Every draw consumes one uniform and one normal regardless of the
/// component, so the stream position after `n` draws does not depend on `c`.
pub fn sample_mixture(
    rng: &mut RngStream,
    c: f64,
    comp1: NormalComponent,
    comp2: NormalComponent,
    n: usize,
) -> Vec<f64> {
    assert!(
        (0.0..=1.0).contains(&c),
        "mixing probability must lie in [0, 1]"
    );
    (0..n)
        .map(|_| {
            let pick_second = rng.uniform() < c;
            let z = rng.standard_normal();
            let comp = if pick_second { comp2 } else { comp1 };
            comp.mean + comp.sd * z
        })
        .collect()
}
