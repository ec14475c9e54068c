//! The Hilbert space of real n×n matrices under `⟨A, B⟩ = trace(AᵀB)`.
//!
//! Matrices are stored densely in row-major order with the dimension carried
//! at runtime. Indices are zero-based throughout: `basis(n, 0, 1)` is the
//! matrix usually written `e₁₂`.

use std::fmt;
use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "matrix dimension must be at least 1");
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Every entry equal to `value`.
    pub fn filled(n: usize, value: f64) -> Result<Self> {
        Self::from_vec(n, vec![value; n * n])
    }

    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n,
                col: pos % n,
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(n, data)
    }

    /// Builds a matrix entry by entry; the closure receives `(row, col)`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self::from_vec(n, data)
    }

    /// The basis matrix with a single one at `(i, j)`.
    pub fn basis(n: usize, i: usize, j: usize) -> Result<Self> {
        if n == 0 || i >= n || j >= n {
            return Err(Error::IndexOutOfRange { row: i, col: j, n });
        }
        let mut m = Self::zeros(n);
        m.data[i * n + j] = 1.0;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i < self.n && j < self.n).then(|| self.data[i * self.n + j])
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::IndexOutOfRange {
                row: i,
                col: j,
                n: self.n,
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { row: i, col: j });
        }
        self.data[i * self.n + j] = value;
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// First non-finite entry, if any. Arithmetic can overflow even though
    /// constructors only admit finite entries.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.n, p % self.n))
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.n == other.n {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.n,
                found: other.n,
            })
        }
    }

    /// `trace(selfᵀ other) = Σᵢⱼ selfᵢⱼ otherᵢⱼ`.
    pub fn hs_inner(&self, other: &Self) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn hs_norm_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    pub fn hs_norm(&self) -> f64 {
        self.hs_norm_sq().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.data[i * self.n + i]).sum()
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|a| alpha * a).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { n, data: out })
    }

    /// Entrywise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    /// `self += alpha · other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// The rank-one operator `(x ⊗ y)(z) = ⟨x, z⟩ y`, applied with `x = self`.
    pub fn tensor_apply(&self, y: &Self, z: &Self) -> Result<Self> {
        self.check_dim(y)?;
        Ok(y.scale(self.hs_inner(z)?))
    }

    pub fn symmetric_part(&self) -> Self {
        let t = self.transpose();
        self.zip_map(&t, |a, b| 0.5 * (a + b))
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let mut eig = jacobi_eigenvalues(&self.symmetric_part());
        eig.sort_by(f64::total_cmp);
        eig
    }

    /// Non-strict positivity: `⟨A x, x⟩ ≥ 0` for every matrix `x`, up to `tol`.
    ///
    /// `⟨A x, x⟩ = Σⱼ colⱼ(x)ᵀ A colⱼ(x)`, so the condition is positive
    /// semidefiniteness of the symmetric part of `A`.
    pub fn is_nonnegative(&self, tol: f64) -> bool {
        self.symmetric_eigenvalues()[0] >= -tol
    }

    /// Strict positivity: smallest eigenvalue of the symmetric part above `tol`.
    pub fn is_strictly_positive(&self, tol: f64) -> bool {
        self.symmetric_eigenvalues()[0] > tol
    }

    /// Writes `n` lines of `n` comma-separated values using the shortest
    /// decimal representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.data.chunks(self.n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`SquareMatrix::to_csv`]. Blank lines are
    /// ignored; line numbers in errors are one-based.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut last_line = 0;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            last_line = idx + 1;
            let row = line
                .split(',')
                .map(|field| {
                    let field = field.trim();
                    match field.parse::<f64>() {
                        Ok(v) if v.is_finite() => Ok(v),
                        Ok(_) => Err(Error::Parse {
                            line: idx + 1,
                            message: format!("non-finite value `{field}`"),
                        }),
                        Err(_) => Err(Error::Parse {
                            line: idx + 1,
                            message: format!("cannot parse `{field}` as a number"),
                        }),
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("expected {} columns, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "empty matrix".into(),
            });
        }
        if rows[0].len() != rows.len() {
            return Err(Error::Parse {
                line: last_line,
                message: format!(
                    "matrix is not square: {} rows, {} columns",
                    rows.len(),
                    rows[0].len()
                ),
            });
        }
        Self::from_rows(&rows)
    }
}

impl fmt::Debug for SquareMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.n)).finish()
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.n && j < self.n, "index ({i}, {j}) out of range");
        &self.data[i * self.n + j]
    }
}

impl TryFrom<Vec<Vec<f64>>> for SquareMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<SquareMatrix> for Vec<Vec<f64>> {
    fn from(m: SquareMatrix) -> Self {
        m.rows()
    }
}

// Operator forms panic on dimension mismatch; use the `try_*` methods when
// dimensions are not known to agree.
impl Add for &SquareMatrix {
    type Output = SquareMatrix;

    fn add(self, rhs: &SquareMatrix) -> SquareMatrix {
        self.try_add(rhs).expect("matrix dimensions must agree")
    }
}

impl Sub for &SquareMatrix {
    type Output = SquareMatrix;

    fn sub(self, rhs: &SquareMatrix) -> SquareMatrix {
        self.try_sub(rhs).expect("matrix dimensions must agree")
    }
}

impl Mul for &SquareMatrix {
    type Output = SquareMatrix;

    fn mul(self, rhs: &SquareMatrix) -> SquareMatrix {
        self.matmul(rhs).expect("matrix dimensions must agree")
    }
}

impl Mul<&SquareMatrix> for f64 {
    type Output = SquareMatrix;

    fn mul(self, rhs: &SquareMatrix) -> SquareMatrix {
        rhs.scale(self)
    }
}

impl Neg for &SquareMatrix {
    type Output = SquareMatrix;

    fn neg(self) -> SquareMatrix {
        self.scale(-1.0)
    }
}

/// Cyclic Jacobi rotations on a symmetric matrix.
fn jacobi_eigenvalues(sym: &SquareMatrix) -> Vec<f64> {
    let n = sym.n;
    let mut a = sym.data.clone();
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
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
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// An n×n grid of n×n blocks, i.e. an n²×n² matrix. Block `(i, j)` of a
/// Hessian is the gradient of `∂V/∂Xᵢⱼ`.
#[derive(Clone, PartialEq)]
pub struct BlockMatrix {
    n: usize,
    blocks: Vec<SquareMatrix>,
}

impl BlockMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            blocks: vec![SquareMatrix::zeros(n); n * n],
        }
    }

    /// Row-major list of `n²` blocks, each of dimension `n`.
    pub fn from_blocks(n: usize, blocks: Vec<SquareMatrix>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        if blocks.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: blocks.len(),
            });
        }
        if let Some(b) = blocks.iter().find(|b| b.dim() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: b.dim(),
            });
        }
        Ok(Self { n, blocks })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> SquareMatrix) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                blocks.push(f(i, j));
            }
        }
        Self::from_blocks(n, blocks)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn block(&self, i: usize, j: usize) -> &SquareMatrix {
        &self.blocks[i * self.n + j]
    }

    pub fn blocks(&self) -> &[SquareMatrix] {
        &self.blocks
    }

    fn check_dim(&self, b: &SquareMatrix) -> Result<()> {
        if self.n == b.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.n,
                found: b.dim(),
            })
        }
    }

    /// `A ∘ B`: block `(i, j)` scaled by `bᵢⱼ`.
    pub fn hadamard_block(&self, b: &SquareMatrix) -> Result<Self> {
        self.check_dim(b)?;
        let blocks = self
            .blocks
            .iter()
            .zip(b.as_slice())
            .map(|(blk, &s)| blk.scale(s))
            .collect();
        Ok(Self { n: self.n, blocks })
    }

    /// `A • B = Σᵢⱼ Aⁱʲ Bᵢⱼ`, a single n×n matrix.
    pub fn block_contract(&self, b: &SquareMatrix) -> Result<SquareMatrix> {
        self.check_dim(b)?;
        let mut out = SquareMatrix::zeros(self.n);
        for (blk, &s) in self.blocks.iter().zip(b.as_slice()) {
            if s != 0.0 {
                out.axpy(s, blk)?;
            }
        }
        Ok(out)
    }

    /// Entry `∂²V / ∂Xᵢⱼ ∂Xₖₗ` when the block matrix holds a Hessian.
    pub fn entry(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.block(i, j)[(k, l)]
    }

    /// Largest entry magnitude over all blocks.
    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.as_slice().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl fmt::Debug for BlockMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockMatrix")
            .field("n", &self.n)
            .field("blocks", &self.blocks)
            .finish()
    }
}
