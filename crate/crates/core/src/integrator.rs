//! Itô integrals `∫ V dB` against matrix Brownian motion.
//!
//! The integrand multiplies the increment from the left: a simple process
//! `Σ φᵢ 1_[tᵢ, tᵢ₊₁)` integrates to `Σ φᵢ (B(tᵢ₊₁) − B(tᵢ))`. General adapted
//! integrands are projected onto the path grid by left endpoints and then
//! integrated as simple processes. Time integrals use the same left-endpoint
//! rule, so discrete identities close exactly for piecewise-constant
//! integrands.

use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::{sample_path, MatrixBrownianPath, PathPrefix, SeedSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::matspace::SquareMatrix;
use crate::stats::MeanEstimate;

/// A matrix-valued process evaluated from the path information up to the
/// current node. The evaluator only ever sees a [`PathPrefix`], so it cannot
/// read later nodes.
pub trait AdaptedProcess: Sync {
    fn eval(&self, prefix: &PathPrefix<'_>) -> SquareMatrix;
}

impl<F> AdaptedProcess for F
where
    F: Fn(&PathPrefix<'_>) -> SquareMatrix + Sync,
{
    fn eval(&self, prefix: &PathPrefix<'_>) -> SquareMatrix {
        self(prefix)
    }
}

/// A deterministic constant integrand.
#[derive(Debug, Clone)]
pub struct Constant(pub SquareMatrix);

impl AdaptedProcess for Constant {
    fn eval(&self, _prefix: &PathPrefix<'_>) -> SquareMatrix {
        self.0.clone()
    }
}

/// Replaces the value by `level · I` wherever its norm reaches `level`.
#[derive(Debug, Clone)]
pub struct Truncated<P> {
    pub inner: P,
    pub level: f64,
}

impl<P: AdaptedProcess> AdaptedProcess for Truncated<P> {
    fn eval(&self, prefix: &PathPrefix<'_>) -> SquareMatrix {
        let v = self.inner.eval(prefix);
        if v.hs_norm() >= self.level {
            SquareMatrix::identity(v.dim()).scale(self.level)
        } else {
            v
        }
    }
}

/// A piecewise-constant process on `partition`, one value per cell, for a
/// single path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleProcess {
    partition: TimeGrid,
    values: Vec<SquareMatrix>,
}

impl SimpleProcess {
    pub fn new(partition: TimeGrid, values: Vec<SquareMatrix>) -> Result<Self> {
        if values.len() != partition.steps() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                partition.steps()
            )));
        }
        let n = values[0].dim();
        if let Some(v) = values.iter().find(|v| v.dim() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: v.dim(),
            });
        }
        Ok(Self { partition, values })
    }

    pub fn partition(&self) -> &TimeGrid {
        &self.partition
    }

    pub fn values(&self) -> &[SquareMatrix] {
        &self.values
    }

    /// Value on the cell containing `t` (cells are closed on the left). The
    /// last value also covers the horizon itself.
    pub fn value_at(&self, t: f64) -> &SquareMatrix {
        let nodes = self.partition.nodes();
        let cell = nodes.partition_point(|&x| x <= t).saturating_sub(1);
        &self.values[cell.min(self.values.len() - 1)]
    }
}

/// `Σᵢ φᵢ (B(tᵢ₊₁) − B(tᵢ))` with the partition nodes located on `path`'s grid.
pub fn ito_integral_simple(v: &SimpleProcess, path: &MatrixBrownianPath) -> Result<SquareMatrix> {
    let positions = v.partition.positions_in(path.grid())?;
    let b = path.values();
    let mut acc = SquareMatrix::zeros(path.dim());
    for (phi, w) in v.values.iter().zip(positions.windows(2)) {
        let inc = b[w[1]].try_sub(&b[w[0]])?;
        acc = acc.try_add(&phi.matmul(&inc)?)?;
    }
    Ok(acc)
}

/// Left-endpoint projection: `φᵢ = v(tᵢ)` evaluated on the path prefix up to
/// the partition node `tᵢ`.
pub fn project_simple(
    v: &dyn AdaptedProcess,
    path: &MatrixBrownianPath,
    partition: &TimeGrid,
) -> Result<SimpleProcess> {
    let positions = partition.positions_in(path.grid())?;
    let values = positions[..positions.len() - 1]
        .iter()
        .map(|&k| v.eval(&path.prefix(k)))
        .collect();
    SimpleProcess::new(partition.clone(), values)
}

/// Left-endpoint quadrature of `‖v(t) − v_k(t)‖²` over the path grid, where
/// `v_k` is the projection of `v` onto `partition`.
pub fn projection_error(
    v: &dyn AdaptedProcess,
    path: &MatrixBrownianPath,
    partition: &TimeGrid,
) -> Result<f64> {
    let simple = project_simple(v, path, partition)?;
    let grid = path.grid();
    let mut acc = 0.0;
    for k in 0..grid.steps() {
        let t = grid.nodes()[k];
        let diff = v.eval(&path.prefix(k)).try_sub(simple.value_at(t))?;
        acc += grid.dt(k) * diff.hs_norm_sq();
    }
    Ok(acc)
}

/// `∫₀ᵀ v dB` on the path's own grid.
pub fn ito_integral(v: &dyn AdaptedProcess, path: &MatrixBrownianPath) -> Result<SquareMatrix> {
    let simple = project_simple(v, path, path.grid())?;
    ito_integral_simple(&simple, path)
}

/// Running integral `M(t_k) = ∫₀^{t_k} v dB` at every node.
pub fn ito_integral_series(
    v: &dyn AdaptedProcess,
    path: &MatrixBrownianPath,
) -> Result<Vec<SquareMatrix>> {
    let b = path.values();
    let mut acc = SquareMatrix::zeros(path.dim());
    let mut out = Vec::with_capacity(b.len());
    out.push(acc.clone());
    for k in 0..path.grid().steps() {
        let phi = v.eval(&path.prefix(k));
        let inc = b[k + 1].try_sub(&b[k])?;
        acc = acc.try_add(&phi.matmul(&inc)?)?;
        out.push(acc.clone());
    }
    Ok(out)
}

/// `∫₀ᵗ v vᵀ ds` by the left-endpoint rule; `t` may fall inside a cell.
pub fn quadratic_variation_exact(
    v: &dyn AdaptedProcess,
    path: &MatrixBrownianPath,
    t: f64,
) -> Result<SquareMatrix> {
    let grid = path.grid();
    let horizon = grid.horizon();
    if !(0.0..=horizon).contains(&t) && grid.index_of(t).is_none() {
        return Err(Error::InvalidArgument(format!(
            "time {t} is outside the grid [0, {horizon}]"
        )));
    }
    let mut acc = SquareMatrix::zeros(path.dim());
    for k in 0..grid.steps() {
        let start = grid.nodes()[k];
        if start >= t {
            break;
        }
        let width = grid.nodes()[k + 1].min(t) - start;
        let vk = v.eval(&path.prefix(k));
        acc.axpy(width, &vk.matmul(&vk.transpose())?)?;
    }
    Ok(acc)
}

/// `∫₀^{t_k} v vᵀ ds` at every node.
pub fn quadratic_variation_series(
    v: &dyn AdaptedProcess,
    path: &MatrixBrownianPath,
) -> Result<Vec<SquareMatrix>> {
    let grid = path.grid();
    let mut acc = SquareMatrix::zeros(path.dim());
    let mut out = Vec::with_capacity(grid.len());
    out.push(acc.clone());
    for k in 0..grid.steps() {
        let vk = v.eval(&path.prefix(k));
        acc.axpy(grid.dt(k), &vk.matmul(&vk.transpose())?)?;
        out.push(acc.clone());
    }
    Ok(out)
}

/// Both sides of `E‖∫V dB‖² = n ∫ E‖V‖² dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsometryCheck {
    /// Sample mean of `‖∫ v dB‖²`.
    pub lhs: f64,
    /// `factor · integrand_energy`.
    pub rhs: f64,
    pub stderr: f64,
    /// Quadrature of the per-node sample mean of `‖v(t)‖²`.
    pub integrand_energy: f64,
    /// The dimension n multiplying the energy.
    pub factor: f64,
}

impl IsometryCheck {
    pub fn within(&self, k: f64) -> bool {
        (self.lhs - self.rhs).abs() <= k * self.stderr
    }
}

pub fn verify_isometry(
    v: &dyn AdaptedProcess,
    n: usize,
    grid: &TimeGrid,
    paths: usize,
    master_seed: u64,
) -> Result<IsometryCheck> {
    if paths < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least two paths are needed, got {paths}"
        )));
    }
    let per_path = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = sample_path(n, grid, SeedSpec::new(master_seed, i))?;
            let integral = ito_integral(v, &path)?;
            let energies: Vec<f64> = (0..grid.steps())
                .map(|k| v.eval(&path.prefix(k)).hs_norm_sq())
                .collect();
            Ok((integral.hs_norm_sq(), energies))
        })
        .collect::<Result<Vec<_>>>()?;

    let squares: Vec<f64> = per_path.iter().map(|(s, _)| *s).collect();
    let lhs = MeanEstimate::from_samples(&squares);
    let mut integrand_energy = 0.0;
    for k in 0..grid.steps() {
        let mean_k = per_path.iter().map(|(_, e)| e[k]).sum::<f64>() / paths as f64;
        integrand_energy += grid.dt(k) * mean_k;
    }
    let factor = n as f64;
    Ok(IsometryCheck {
        lhs: lhs.mean,
        rhs: factor * integrand_energy,
        stderr: lhs.stderr,
        integrand_energy,
        factor,
    })
}

/// Ensemble mean of `Γ(t) − Γ(0)` at one checkpoint, where
/// `Γ(t) = ⟨M(t), a⟩⟨M(t), b⟩ − ⟨(∫₀ᵗ v vᵀ ds) a, b⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QvResidual {
    pub t: f64,
    pub residual: f64,
    pub stderr: f64,
}

impl QvResidual {
    pub fn within(&self, k: f64) -> bool {
        self.residual.abs() <= k * self.stderr
    }
}

/// Martingale check for the compensated product of projections of
/// `M(t) = ∫₀ᵗ v dB`. `checkpoints` must be grid nodes.
pub fn verify_qv_martingale(
    v: &dyn AdaptedProcess,
    a: &SquareMatrix,
    b: &SquareMatrix,
    grid: &TimeGrid,
    paths: usize,
    master_seed: u64,
    checkpoints: &[f64],
) -> Result<Vec<QvResidual>> {
    if paths < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least two paths are needed, got {paths}"
        )));
    }
    let n = a.dim();
    let indices = checkpoints
        .iter()
        .map(|&t| {
            grid.index_of(t)
                .ok_or_else(|| Error::GridMismatch(format!("checkpoint {t} is not a grid node")))
        })
        .collect::<Result<Vec<usize>>>()?;

    let per_path = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = sample_path(n, grid, SeedSpec::new(master_seed, i))?;
            let m = ito_integral_series(v, &path)?;
            let qv = quadratic_variation_series(v, &path)?;
            let gamma = |k: usize| -> Result<f64> {
                Ok(m[k].hs_inner(a)? * m[k].hs_inner(b)? - qv[k].matmul(a)?.hs_inner(b)?)
            };
            let g0 = gamma(0)?;
            indices
                .iter()
                .map(|&k| Ok(gamma(k)? - g0))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(indices
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let samples: Vec<f64> = per_path.iter().map(|g| g[c]).collect();
            let est = MeanEstimate::from_samples(&samples);
            QvResidual {
                t: grid.nodes()[k],
                residual: est.mean,
                stderr: est.stderr,
            }
        })
        .collect())
}
