//! Differential calculus for scalar fields `V(t, X)` on n×n matrices.
//!
//! The gradient is the n×n matrix of partials `∂V/∂X_ij`. The Hessian is a
//! [`BlockMatrix`] whose block `(i, j)` is the gradient of `∂V/∂X_ij`, so
//! `entry(i, j, k, l) = ∂²V/∂X_ij ∂X_kl`.
//!
//! Under `dX = b dt + σ dB` the increments satisfy
//! `E[(σ dB)_ij (σ dB)_kl] = (σσᵀ)_ik δ_jl dt`, which fixes the second-order
//! term of the generator as `½ Σ_{i,k,j} ∂²V/∂X_ij ∂X_kj (σσᵀ)_ik`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::brownian::{sample_path, SeedSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::matspace::{BlockMatrix, SquareMatrix};
use crate::sde::{euler_maruyama, Coefficients, NoiseAction, Refinement, SolutionPath};
use crate::stats::{slope, MeanEstimate};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Relative tolerance for analytic derivatives against finite differences.
pub const DERIVATIVE_TOL: f64 = 1e-4;
pub const VALIDATION_PROBES: usize = 100;
const VALIDATION_SEED: u64 = 0x7a11_0c0d;

type ValueFn = Arc<dyn Fn(f64, &SquareMatrix) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(f64, &SquareMatrix) -> SquareMatrix + Send + Sync>;
type HessFn = Arc<dyn Fn(f64, &SquareMatrix) -> BlockMatrix + Send + Sync>;

/// A field `V(t, X)` with optional analytic derivatives.
#[derive(Clone)]
pub struct ScalarField {
    name: String,
    value: ValueFn,
    dt: Option<ValueFn>,
    grad: Option<GradFn>,
    hess: Option<HessFn>,
    fd_step: f64,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("name", &self.name)
            .field("dt", &self.dt.is_some())
            .field("grad", &self.grad.is_some())
            .field("hess", &self.hess.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

pub struct FieldBuilder {
    field: ScalarField,
}

impl FieldBuilder {
    pub fn time_derivative(mut self, f: impl Fn(f64, &SquareMatrix) -> f64 + Send + Sync + 'static) -> Self {
        self.field.dt = Some(Arc::new(f));
        self
    }

    pub fn gradient(mut self, f: impl Fn(f64, &SquareMatrix) -> SquareMatrix + Send + Sync + 'static) -> Self {
        self.field.grad = Some(Arc::new(f));
        self
    }

    pub fn hessian(mut self, f: impl Fn(f64, &SquareMatrix) -> BlockMatrix + Send + Sync + 'static) -> Self {
        self.field.hess = Some(Arc::new(f));
        self
    }

    pub fn fd_step(mut self, step: f64) -> Self {
        self.field.fd_step = step;
        self
    }

    /// Validates the analytic derivatives on random probes of dimension `n`.
    pub fn build(self, n: usize) -> Result<ScalarField> {
        let step = self.field.fd_step;
        if !(step.is_finite() && step > 0.0 && step < 1.0) {
            return Err(Error::InvalidArgument(format!("fd_step must lie in (0, 1), found {step}")));
        }
        let check = validate_derivatives(&self.field, n, VALIDATION_PROBES, VALIDATION_SEED)?;
        check.ensure(&self.field.name)?;
        Ok(self.field)
    }
}

impl ScalarField {
    pub fn builder(
        name: impl Into<String>,
        value: impl Fn(f64, &SquareMatrix) -> f64 + Send + Sync + 'static,
    ) -> FieldBuilder {
        FieldBuilder {
            field: ScalarField {
                name: name.into(),
                value: Arc::new(value),
                dt: None,
                grad: None,
                hess: None,
                fd_step: DEFAULT_FD_STEP,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, t: f64, x: &SquareMatrix) -> f64 {
        (self.value)(t, x)
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hess.is_some()
    }

    fn non_finite(&self) -> Error {
        Error::NonFiniteDerivative {
            field: self.name.clone(),
        }
    }

    fn entry_step(&self, v: f64) -> f64 {
        self.fd_step * v.abs().max(1.0)
    }

    fn shifted(x: &SquareMatrix, shifts: &[(usize, f64)]) -> SquareMatrix {
        let n = x.dim();
        let mut data = x.as_slice().to_vec();
        for &(idx, h) in shifts {
            data[idx] += h;
        }
        SquareMatrix::from_vec(n, data).unwrap_or_else(|_| SquareMatrix::filled(n, 0.0).expect("finite"))
    }

    pub fn fd_time_derivative(&self, t: f64, x: &SquareMatrix) -> f64 {
        let h = self.entry_step(t);
        (self.value(t + h, x) - self.value(t - h, x)) / (2.0 * h)
    }

    /// Central differences entry by entry with step `fd_step · max(1, |X_ij|)`.
    pub fn fd_gradient(&self, t: f64, x: &SquareMatrix) -> Result<SquareMatrix> {
        let data = x
            .as_slice()
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let h = self.entry_step(v);
                let up = self.value(t, &Self::shifted(x, &[(idx, h)]));
                let down = self.value(t, &Self::shifted(x, &[(idx, -h)]));
                (up - down) / (2.0 * h)
            })
            .collect();
        SquareMatrix::from_vec(x.dim(), data).map_err(|_| self.non_finite())
    }

    /// Nested central differences with step `√fd_step · max(1, |X_ij|)`.
    /// The stencil is symmetric in the two indices, so the result is exactly
    /// symmetric.
    pub fn fd_hessian(&self, t: f64, x: &SquareMatrix) -> Result<BlockMatrix> {
        let n = x.dim();
        let nn = n * n;
        let root = self.fd_step.sqrt();
        let steps: Vec<f64> = x.as_slice().iter().map(|v| root * v.abs().max(1.0)).collect();
        let mut h = vec![0.0; nn * nn];
        for a in 0..nn {
            for b in a..nn {
                let (ha, hb) = (steps[a], steps[b]);
                let v = |sa: f64, sb: f64| self.value(t, &Self::shifted(x, &[(a, sa * ha), (b, sb * hb)]));
                let d = (v(1.0, 1.0) - v(1.0, -1.0) - v(-1.0, 1.0) + v(-1.0, -1.0)) / (4.0 * ha * hb);
                h[a * nn + b] = d;
                h[b * nn + a] = d;
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(self.non_finite());
        }
        BlockMatrix::from_fn(n, |i, j| {
            let row = (i * n + j) * nn;
            SquareMatrix::from_vec(n, h[row..row + nn].to_vec()).expect("finite entries")
        })
    }
}

/// `∂V/∂t`, analytic when supplied.
pub fn time_derivative(f: &ScalarField, t: f64, x: &SquareMatrix) -> Result<f64> {
    let d = match &f.dt {
        Some(dt) => dt(t, x),
        None => f.fd_time_derivative(t, x),
    };
    if d.is_finite() {
        Ok(d)
    } else {
        Err(f.non_finite())
    }
}

pub fn gradient(f: &ScalarField, t: f64, x: &SquareMatrix) -> Result<SquareMatrix> {
    match &f.grad {
        Some(g) => {
            let out = g(t, x);
            if out.dim() != x.dim() {
                return Err(Error::DimensionMismatch {
                    expected: x.dim(),
                    found: out.dim(),
                });
            }
            match out.first_non_finite() {
                Some(_) => Err(f.non_finite()),
                None => Ok(out),
            }
        }
        None => f.fd_gradient(t, x),
    }
}

pub fn hessian(f: &ScalarField, t: f64, x: &SquareMatrix) -> Result<BlockMatrix> {
    match &f.hess {
        Some(h) => {
            let out = h(t, x);
            if out.dim() != x.dim() {
                return Err(Error::DimensionMismatch {
                    expected: x.dim(),
                    found: out.dim(),
                });
            }
            if out.blocks().iter().any(|b| b.first_non_finite().is_some()) {
                return Err(f.non_finite());
            }
            Ok(out)
        }
        None => f.fd_hessian(t, x),
    }
}

/// `Σ_{ij,kl} ∂²V/∂X_ij ∂X_kl (Y) D_ij D_kl`.
pub fn hessian_quadratic_form(f: &ScalarField, y: &SquareMatrix, d: &SquareMatrix, t: f64) -> Result<f64> {
    let h = hessian(f, t, y)?;
    h.block_contract(d)?.hs_inner(d)
}

/// `|V(X) − V(Y) − ⟨∇V(Y), X − Y⟩ − ½ D²V(Y)[X − Y, X − Y]|`.
pub fn taylor_remainder(f: &ScalarField, y: &SquareMatrix, x: &SquareMatrix, t: f64) -> Result<f64> {
    let d = x.try_sub(y)?;
    if d.is_zero() {
        return Ok(0.0);
    }
    let first = gradient(f, t, y)?.hs_inner(&d)?;
    let second = hessian_quadratic_form(f, y, &d, t)?;
    Ok((f.value(t, x) - f.value(t, y) - first - 0.5 * second).abs())
}

/// Second-order term of the generator for a given diffusion value.
fn second_order_term(h: &BlockMatrix, sigma: &SquareMatrix, noise: NoiseAction) -> f64 {
    let n = sigma.dim();
    match noise {
        NoiseAction::LeftMultiply => {
            let cov = sigma.matmul(&sigma.transpose()).expect("same dimension");
            let mut acc = 0.0;
            for i in 0..n {
                for k in 0..n {
                    let c = cov[(i, k)];
                    if c == 0.0 {
                        continue;
                    }
                    let mut s = 0.0;
                    for j in 0..n {
                        s += h.entry(i, j, k, j);
                    }
                    acc += s * c;
                }
            }
            0.5 * acc
        }
        NoiseAction::Entrywise => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let s = sigma[(i, j)];
                    acc += h.entry(i, j, i, j) * s * s;
                }
            }
            0.5 * acc
        }
    }
}

/// `∂V/∂t + ⟨∇V, b⟩ + ½ Σ_{i,k,j} ∂²V/∂X_ij ∂X_kj (σσᵀ)_ik`.
pub fn generator(f: &ScalarField, c: &Coefficients, t: f64, x: &SquareMatrix) -> Result<f64> {
    let first = gradient(f, t, x)?.hs_inner(&c.drift(t, x))?;
    let h = hessian(f, t, x)?;
    let sigma = c.diffusion(t, x);
    if sigma.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: sigma.dim(),
        });
    }
    Ok(time_derivative(f, t, x)? + first + second_order_term(&h, &sigma, c.noise()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItoResidual {
    /// `V(t_k, X_k) − V(0, X_0) − Σ LV Δt − Σ ⟨∇V, σ ΔB⟩` per node.
    pub residual: Vec<f64>,
    /// Partial sums of `⟨∇V(t_m, X_m), σ ΔB_m⟩`.
    pub martingale: Vec<f64>,
}

pub fn ito_residual(f: &ScalarField, c: &Coefficients, sol: &SolutionPath) -> Result<ItoResidual> {
    let grid = sol.grid();
    let b = sol.driver.values();
    let v0 = f.value(grid.nodes()[0], &sol.states[0]);
    let mut residual = Vec::with_capacity(grid.len());
    let mut martingale = Vec::with_capacity(grid.len());
    let (mut drift_sum, mut mart_sum) = (0.0, 0.0);
    residual.push(0.0);
    martingale.push(0.0);
    for k in 0..grid.steps() {
        let t = grid.nodes()[k];
        let x = &sol.states[k];
        drift_sum += generator(f, c, t, x)? * grid.dt(k);
        let db = b[k + 1].try_sub(&b[k])?;
        mart_sum += gradient(f, t, x)?.hs_inner(&c.noise_increment(t, x, &db)?)?;
        let vk = f.value(grid.nodes()[k + 1], &sol.states[k + 1]);
        residual.push(vk - v0 - drift_sum - mart_sum);
        martingale.push(mart_sum);
    }
    Ok(ItoResidual { residual, martingale })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItoFormulaCheck {
    /// Residual statistics at every grid node.
    pub residual: Vec<MeanEstimate>,
    /// `V(T, X_T) − V(0, x0)` across paths.
    pub increment: MeanEstimate,
    /// `(mean of residual(T)²)^{1/2}`.
    pub rms_terminal_residual: f64,
}

impl ItoFormulaCheck {
    /// Every node's mean residual within `k` standard errors of zero.
    pub fn martingale_within(&self, k: f64) -> bool {
        self.residual.iter().all(|r| r.within(0.0, k))
    }
}

fn residuals_on(
    f: &ScalarField,
    c: &Coefficients,
    x0: &SquareMatrix,
    grid: &TimeGrid,
    paths: usize,
    master_seed: u64,
) -> Result<Vec<(ItoResidual, f64)>> {
    (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let driver = sample_path(x0.dim(), grid, SeedSpec::new(master_seed, i))?;
            let sol = euler_maruyama(c, x0, &driver).map_err(|e| match e {
                Error::BlowUp { node } => Error::PathBlowUp { path_id: i, node },
                other => other,
            })?;
            let inc = f.value(grid.horizon(), sol.terminal()) - f.value(0.0, x0);
            Ok((ito_residual(f, c, &sol)?, inc))
        })
        .collect()
}

/// Monte Carlo check of the Itô formula along Euler–Maruyama paths.
pub fn verify_ito_formula(
    f: &ScalarField,
    c: &Coefficients,
    x0: &SquareMatrix,
    grid: &TimeGrid,
    paths: usize,
    master_seed: u64,
) -> Result<ItoFormulaCheck> {
    if paths < 2 {
        return Err(Error::InvalidArgument("need at least 2 paths".into()));
    }
    let per_path = residuals_on(f, c, x0, grid, paths, master_seed)?;
    let residual = (0..grid.len())
        .map(|k| {
            let samples: Vec<f64> = per_path.iter().map(|(r, _)| r.residual[k]).collect();
            MeanEstimate::from_samples(&samples)
        })
        .collect();
    let incs: Vec<f64> = per_path.iter().map(|(_, v)| *v).collect();
    let last = grid.len() - 1;
    let ms = per_path.iter().map(|(r, _)| r.residual[last].powi(2)).sum::<f64>() / paths as f64;
    Ok(ItoFormulaCheck {
        residual,
        increment: MeanEstimate::from_samples(&incs),
        rms_terminal_residual: ms.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualOrder {
    pub step_sizes: Vec<f64>,
    pub rms: Vec<f64>,
    pub order: f64,
}

/// Log-fit of the RMS terminal residual against the step size over the
/// levels of `plan`, on nested restrictions of one set of Brownian paths.
pub fn ito_residual_order(
    f: &ScalarField,
    c: &Coefficients,
    x0: &SquareMatrix,
    plan: &Refinement,
) -> Result<ResidualOrder> {
    let Refinement {
        horizon,
        base_steps,
        levels,
        paths,
        master_seed,
    } = *plan;
    if levels < 2 || base_steps == 0 || paths == 0 {
        return Err(Error::InvalidArgument(
            "need at least 2 levels and positive steps and paths".into(),
        ));
    }
    let fine = TimeGrid::uniform(horizon, base_steps << (levels - 1))?;
    let grids = (0..levels)
        .map(|l| TimeGrid::uniform(horizon, base_steps << l))
        .collect::<Result<Vec<_>>>()?;
    let per_path = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let driver = sample_path(x0.dim(), &fine, SeedSpec::new(master_seed, i))?;
            grids
                .iter()
                .map(|g| {
                    let sol = euler_maruyama(c, x0, &driver.restrict(g)?)?;
                    let r = ito_residual(f, c, &sol)?;
                    Ok(r.residual.last().copied().unwrap_or(0.0).powi(2))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rms: Vec<f64> = (0..levels)
        .map(|l| (per_path.iter().map(|r| r[l]).sum::<f64>() / paths as f64).sqrt())
        .collect();
    let step_sizes: Vec<f64> = grids.iter().map(|g| g.dt(0)).collect();
    let lx: Vec<f64> = step_sizes.iter().map(|h| h.log2()).collect();
    let ly: Vec<f64> = rms.iter().map(|r| r.max(f64::MIN_POSITIVE).log2()).collect();
    Ok(ResidualOrder {
        order: slope(&lx, &ly),
        step_sizes,
        rms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub gradient: Option<f64>,
    pub hessian: Option<f64>,
    pub time: Option<f64>,
    /// Largest `|H(ij,kl) − H(kl,ij)|` relative to `max(1, ‖H‖_max)`.
    pub hessian_asymmetry: f64,
}

impl DerivativeCheck {
    pub fn worst(&self) -> f64 {
        [self.gradient, self.hessian, self.time]
            .into_iter()
            .flatten()
            .fold(self.hessian_asymmetry, f64::max)
    }

    fn ensure(&self, field: &str) -> Result<()> {
        let checks = [
            ("gradient", self.gradient),
            ("Hessian", self.hessian),
            ("time derivative", self.time),
            ("Hessian symmetry", Some(self.hessian_asymmetry)),
        ];
        for (what, d) in checks {
            if let Some(d) = d {
                if d.is_nan() || d > DERIVATIVE_TOL {
                    return Err(Error::DerivativeMismatch {
                        field: field.to_string(),
                        what,
                        discrepancy: d,
                    });
                }
            }
        }
        Ok(())
    }
}

fn relative_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}

fn flatten(h: &BlockMatrix) -> Vec<f64> {
    h.blocks().iter().flat_map(|b| b.as_slice().to_vec()).collect()
}

/// Compares every supplied analytic derivative against finite differences
/// at `probes` random points with entries in `[−2, 2]` and `t ∈ [0, 1]`.
/// Entries are `None` for derivatives that are not supplied.
pub fn validate_derivatives(f: &ScalarField, n: usize, probes: usize, seed: u64) -> Result<DerivativeCheck> {
    if n == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let mut rng = SeedSpec::new(seed, 0).rng();
    let mut check = DerivativeCheck {
        gradient: f.grad.as_ref().map(|_| 0.0),
        hessian: f.hess.as_ref().map(|_| 0.0),
        time: f.dt.as_ref().map(|_| 0.0),
        hessian_asymmetry: 0.0,
    };
    for _ in 0..probes {
        let t = rng.random::<f64>();
        let x = SquareMatrix::from_fn(n, |_, _| rng.random_range(-2.0..2.0))?;
        if let Some(g) = check.gradient.as_mut() {
            let a = gradient(f, t, &x)?;
            let d = f.fd_gradient(t, &x)?;
            *g = g.max(relative_discrepancy(a.as_slice(), d.as_slice()));
        }
        let h = hessian(f, t, &x)?;
        if let Some(e) = check.hessian.as_mut() {
            let d = f.fd_hessian(t, &x)?;
            *e = e.max(relative_discrepancy(&flatten(&h), &flatten(&d)));
        }
        let scale = h.max_abs().max(1.0);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let asym = (h.entry(i, j, k, l) - h.entry(k, l, i, j)).abs() / scale;
                        check.hessian_asymmetry = check.hessian_asymmetry.max(asym);
                    }
                }
            }
        }
        if let Some(e) = check.time.as_mut() {
            let a = time_derivative(f, t, &x)?;
            let d = f.fd_time_derivative(t, &x);
            *e = e.max((a - d).abs() / a.abs().max(1.0));
        }
    }
    Ok(check)
}

/// `V(X) = trace X`.
pub fn trace_field(n: usize) -> Result<ScalarField> {
    ScalarField::builder("trace", |_, x| x.trace())
        .time_derivative(|_, _| 0.0)
        .gradient(|_, x| SquareMatrix::identity(x.dim()))
        .hessian(|_, x| BlockMatrix::zeros(x.dim()))
        .build(n)
}

/// `V(X) = ⟨A, X⟩`.
pub fn linear_field(a: SquareMatrix) -> Result<ScalarField> {
    let n = a.dim();
    let (av, ag) = (a.clone(), a);
    ScalarField::builder("linear", move |_, x| av.hs_inner(x).unwrap_or(f64::NAN))
        .time_derivative(|_, _| 0.0)
        .gradient(move |_, _| ag.clone())
        .hessian(|_, x| BlockMatrix::zeros(x.dim()))
        .build(n)
}

/// `V(X) = ‖X‖²`.
pub fn hs_norm_sq_field(n: usize) -> Result<ScalarField> {
    ScalarField::builder("hs_norm_sq", |_, x| x.hs_norm_sq())
        .time_derivative(|_, _| 0.0)
        .gradient(|_, x| x.scale(2.0))
        .hessian(|_, x| {
            let n = x.dim();
            BlockMatrix::from_fn(n, |i, j| SquareMatrix::basis(n, i, j).expect("in range").scale(2.0))
                .expect("consistent shape")
        })
        .build(n)
}

fn diagonal_blocks(n: usize, value: f64) -> BlockMatrix {
    BlockMatrix::from_fn(n, |i, j| {
        if i == j {
            SquareMatrix::identity(n).scale(value)
        } else {
            SquareMatrix::zeros(n)
        }
    })
    .expect("consistent shape")
}

/// `V(X) = (trace X)²`.
pub fn trace_sq_field(n: usize) -> Result<ScalarField> {
    ScalarField::builder("trace_sq", |_, x| x.trace().powi(2))
        .time_derivative(|_, _| 0.0)
        .gradient(|_, x| SquareMatrix::identity(x.dim()).scale(2.0 * x.trace()))
        .hessian(|_, x| diagonal_blocks(x.dim(), 2.0))
        .build(n)
}

/// `V(X) = (trace X)³`.
pub fn trace_cube_field(n: usize) -> Result<ScalarField> {
    ScalarField::builder("trace_cube", |_, x| x.trace().powi(3))
        .time_derivative(|_, _| 0.0)
        .gradient(|_, x| SquareMatrix::identity(x.dim()).scale(3.0 * x.trace().powi(2)))
        .hessian(|_, x| diagonal_blocks(x.dim(), 6.0 * x.trace()))
        .build(n)
}

/// `V(X) = ‖X‖⁴`; block `(i, j)` of the Hessian is `8 X_ij X + 4‖X‖² e_ij`.
pub fn hs_norm_quartic_field(n: usize) -> Result<ScalarField> {
    ScalarField::builder("hs_norm_quartic", |_, x| x.hs_norm_sq().powi(2))
        .time_derivative(|_, _| 0.0)
        .gradient(|_, x| x.scale(4.0 * x.hs_norm_sq()))
        .hessian(|_, x| {
            let n = x.dim();
            let q = x.hs_norm_sq();
            BlockMatrix::from_fn(n, |i, j| {
                let mut b = x.scale(8.0 * x[(i, j)]);
                b.axpy(4.0 * q, &SquareMatrix::basis(n, i, j).expect("in range"))
                    .expect("same dimension");
                b
            })
            .expect("consistent shape")
        })
        .build(n)
}

/// Names accepted by [`resolve_field`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldName {
    Trace,
    HsNormSq,
    TraceSq,
    TraceCube,
    HsNormQuartic,
    /// `linear:<path>` with the coefficient matrix stored as CSV.
    Linear(PathBuf),
}

impl FieldName {
    pub const BUILTIN: [&'static str; 5] = ["trace", "hs_norm_sq", "trace_sq", "trace_cube", "hs_norm_quartic"];
}

impl FromStr for FieldName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "trace" => Ok(Self::Trace),
            "hs_norm_sq" => Ok(Self::HsNormSq),
            "trace_sq" => Ok(Self::TraceSq),
            "trace_cube" => Ok(Self::TraceCube),
            "hs_norm_quartic" => Ok(Self::HsNormQuartic),
            _ => match s.strip_prefix("linear:") {
                Some(path) if !path.is_empty() => Ok(Self::Linear(PathBuf::from(path))),
                _ => Err(Error::UnknownField(s.to_string())),
            },
        }
    }
}

impl fmt::Display for FieldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Trace => f.write_str("trace"),
            Self::HsNormSq => f.write_str("hs_norm_sq"),
            Self::TraceSq => f.write_str("trace_sq"),
            Self::TraceCube => f.write_str("trace_cube"),
            Self::HsNormQuartic => f.write_str("hs_norm_quartic"),
            Self::Linear(p) => write!(f, "linear:{}", p.display()),
        }
    }
}

/// Builds the named field for dimension `n`. A linear field's matrix must
/// have dimension `n`.
pub fn resolve_field(name: &FieldName, n: usize) -> Result<ScalarField> {
    match name {
        FieldName::Trace => trace_field(n),
        FieldName::HsNormSq => hs_norm_sq_field(n),
        FieldName::TraceSq => trace_sq_field(n),
        FieldName::TraceCube => trace_cube_field(n),
        FieldName::HsNormQuartic => hs_norm_quartic_field(n),
        FieldName::Linear(path) => {
            let a = SquareMatrix::parse_csv(&std::fs::read_to_string(path)?)?;
            if a.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: a.dim(),
                });
            }
            linear_field(a)
        }
    }
}

/// Every analytic field in the standard suite at dimension `n`, with the
/// linear field built from a fixed coefficient matrix.
pub fn standard_suite(n: usize) -> Result<Vec<ScalarField>> {
    let a = SquareMatrix::from_fn(n, |i, j| 0.5 + i as f64 - 0.75 * j as f64)?;
    Ok(vec![
        trace_field(n)?,
        linear_field(a)?,
        hs_norm_sq_field(n)?,
        trace_sq_field(n)?,
        trace_cube_field(n)?,
        hs_norm_quartic_field(n)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::Rate;

    fn m2(rows: [[f64; 2]; 2]) -> SquareMatrix {
        SquareMatrix::from_rows(&rows).unwrap()
    }

    fn fd_only(f: &ScalarField) -> ScalarField {
        let v = f.value.clone();
        ScalarField::builder(f.name(), move |t, x| v(t, x)).build(2).unwrap()
    }

    #[test]
    fn gradient_examples() {
        let x = m2([[1.5, -0.5], [2.0, 0.25]]);
        assert_eq!(gradient(&trace_field(2).unwrap(), 0.0, &x).unwrap(), SquareMatrix::identity(2));
        let sq = hs_norm_sq_field(2).unwrap();
        assert_eq!(gradient(&sq, 0.0, &x).unwrap(), x.scale(2.0));
        let fd = gradient(&fd_only(&sq), 0.0, &x).unwrap();
        assert!(fd.try_sub(&x.scale(2.0)).unwrap().hs_norm() < 1e-8);
        let a = m2([[1.0, 2.0], [-3.0, 0.5]]);
        assert_eq!(gradient(&linear_field(a.clone()).unwrap(), 0.0, &x).unwrap(), a);
    }

    #[test]
    fn hessian_examples() {
        let x = m2([[1.5, -0.5], [2.0, 0.25]]);
        let h = hessian(&fd_only(&hs_norm_sq_field(2).unwrap()), 0.0, &x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = SquareMatrix::basis(2, i, j).unwrap().scale(2.0);
                assert!(h.block(i, j).try_sub(&expected).unwrap().hs_norm() < 1e-5);
            }
        }
        let lin = hessian(&linear_field(SquareMatrix::identity(2)).unwrap(), 0.0, &x).unwrap();
        assert_eq!(lin.max_abs(), 0.0);

        // Symbolic oracle for (trace X)²: ∂²/∂X_ii ∂X_kk = 2, all else 0.
        let h = hessian(&fd_only(&trace_sq_field(2).unwrap()), 0.0, &x).unwrap();
        for (i, j, k, l) in itertools(2) {
            let expected = if i == j && k == l { 2.0 } else { 0.0 };
            assert!((h.entry(i, j, k, l) - expected).abs() < 1e-5, "{i}{j}{k}{l}");
        }
    }

    fn itertools(n: usize) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        out.push((i, j, k, l));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn fd_hessian_is_exactly_symmetric() {
        let f = fd_only(&hs_norm_quartic_field(2).unwrap());
        let x = m2([[0.3, -1.1], [0.7, 1.9]]);
        let h = hessian(&f, 0.0, &x).unwrap();
        for (i, j, k, l) in itertools(2) {
            assert_eq!(h.entry(i, j, k, l), h.entry(k, l, i, j));
        }
    }

    #[test]
    fn quadratic_form_examples() {
        let y = m2([[0.5, 1.0], [-1.0, 2.0]]);
        let d = m2([[0.1, -0.2], [0.3, 0.4]]);
        let q = hessian_quadratic_form(&hs_norm_sq_field(2).unwrap(), &y, &d, 0.0).unwrap();
        assert!((q - 2.0 * d.hs_norm_sq()).abs() < 1e-14);
        let a = SquareMatrix::identity(2);
        assert_eq!(hessian_quadratic_form(&linear_field(a).unwrap(), &y, &d, 0.0).unwrap(), 0.0);
        let q = hessian_quadratic_form(&trace_sq_field(2).unwrap(), &y, &d, 0.0).unwrap();
        assert!((q - 2.0 * d.trace().powi(2)).abs() < 1e-14);
    }

    #[test]
    fn taylor_examples() {
        let y = m2([[0.5, 1.0], [-1.0, 2.0]]);
        let x = m2([[1.5, -1.0], [0.0, 0.5]]);
        let sq = hs_norm_sq_field(2).unwrap();
        assert!(taylor_remainder(&sq, &y, &x, 0.0).unwrap() <= 1e-10);
        assert_eq!(taylor_remainder(&trace_cube_field(2).unwrap(), &y, &y, 0.0).unwrap(), 0.0);

        let cube = trace_cube_field(2).unwrap();
        let d = m2([[1.0, 0.3], [-0.2, 0.5]]);
        let hs = [1e-1, 1e-2, 1e-3];
        let rs: Vec<f64> = hs
            .iter()
            .map(|h| taylor_remainder(&cube, &y, &y.try_add(&d.scale(*h)).unwrap(), 0.0).unwrap())
            .collect();
        // Exact remainder for (trace)³ is (h·trace D)³.
        for (h, r) in hs.iter().zip(&rs) {
            let exact = (h * d.trace()).powi(3);
            assert!((r - exact).abs() <= 1e-9 * exact + 1e-13, "{r} vs {exact}");
        }
        let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ly: Vec<f64> = rs.iter().map(|r| r.ln()).collect();
        assert!(slope(&lx, &ly) >= 2.8);
    }

    #[test]
    fn generator_examples() {
        let x = m2([[1.0, 2.0], [3.0, -1.0]]);
        let sigma = m2([[1.0, 0.5], [-0.25, 2.0]]);
        let c = Coefficients::constant(SquareMatrix::zeros(2), sigma.clone());
        let g = generator(&hs_norm_sq_field(2).unwrap(), &c, 0.0, &x).unwrap();
        assert!((g - 2.0 * sigma.hs_norm_sq()).abs() < 1e-13);

        let lin = Coefficients::linear(0.5, 0.3);
        let g = generator(&trace_field(2).unwrap(), &lin, 0.0, &x).unwrap();
        assert!((g - lin.drift(0.0, &x).trace()).abs() < 1e-14);

        let time_only = ScalarField::builder("sin", |t, _| t.sin())
            .time_derivative(|t, _| t.cos())
            .gradient(|_, x| SquareMatrix::zeros(x.dim()))
            .hessian(|_, x| BlockMatrix::zeros(x.dim()))
            .build(2)
            .unwrap();
        assert!((generator(&time_only, &lin, 0.7, &x).unwrap() - 0.7f64.cos()).abs() < 1e-14);
    }

    #[test]
    fn generator_second_order_matches_increment_covariance() {
        // V = X_00 X_10 + X_01², so LV = E[(σB)_00 (σB)_10] + E[(σB)_01²] at t = 1.
        let x = m2([[0.3, -0.4], [1.0, 0.2]]);
        let sigma = m2([[1.0, 0.5], [0.0, 2.0]]);
        let f = ScalarField::builder("mixed", |_, x| x[(0, 0)] * x[(1, 0)] + x[(0, 1)] * x[(0, 1)])
            .build(2)
            .unwrap();
        let c = Coefficients::constant(SquareMatrix::zeros(2), sigma.clone());
        let g = generator(&f, &c, 0.0, &x).unwrap();
        // (σσᵀ)_01 = 1 and (σσᵀ)_00 = 1.25.
        assert!((g - (1.0 + 1.25)).abs() < 1e-6, "{g}");
    }

    #[test]
    fn ito_residual_vanishes_for_trace() {
        let c = Coefficients::constant(SquareMatrix::zeros(2), m2([[1.0, 0.5], [0.0, 0.5]]));
        let grid = TimeGrid::new((0..=16).map(|k| k as f64 / 16.0).collect()).unwrap();
        let d = sample_path(2, &grid, SeedSpec::new(4, 0)).unwrap();
        let sol = euler_maruyama(&c, &SquareMatrix::identity(2), &d).unwrap();
        let r = ito_residual(&trace_field(2).unwrap(), &c, &sol).unwrap();
        assert!(r.residual.iter().all(|v| v.abs() < 1e-13), "{:?}", r.residual);
    }

    #[test]
    fn ito_formula_for_norm_squared() {
        let c = Coefficients::constant(SquareMatrix::zeros(2), SquareMatrix::identity(2));
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let chk = verify_ito_formula(&hs_norm_sq_field(2).unwrap(), &c, &SquareMatrix::zeros(2), &grid, 4000, 9)
            .unwrap();
        assert!(chk.martingale_within(3.0));
        assert!(chk.increment.within(4.0, 3.0), "{:?}", chk.increment);
    }

    #[test]
    fn residual_order_on_linear_sde() {
        let r = ito_residual_order(
            &hs_norm_sq_field(2).unwrap(),
            &Coefficients::linear(0.5, 0.3),
            &SquareMatrix::identity(2),
            &Refinement {
                horizon: 1.0,
                base_steps: 16,
                levels: 4,
                paths: 400,
                master_seed: 3,
            },
        )
        .unwrap();
        assert!(r.order >= 0.4, "{r:?}");
    }

    #[test]
    fn suite_validates() {
        for n in [2, 3] {
            for f in standard_suite(n).unwrap() {
                let chk = validate_derivatives(&f, n, 100, 11).unwrap();
                assert!(chk.worst() <= DERIVATIVE_TOL, "{} {chk:?}", f.name());
                assert_eq!(chk.hessian_asymmetry, 0.0);
            }
        }
    }

    #[test]
    fn wrong_analytic_gradient_is_rejected() {
        let err = ScalarField::builder("bad", |_, x| x.hs_norm_sq())
            .gradient(|_, x| x.clone())
            .build(2)
            .unwrap_err();
        assert!(matches!(err, Error::DerivativeMismatch { what: "gradient", .. }));
        let err = ScalarField::builder("bad_dt", |t, _| t * t).time_derivative(|t, _| t).build(2).unwrap_err();
        assert!(matches!(err, Error::DerivativeMismatch { what: "time derivative", .. }));
    }

    #[test]
    fn non_finite_derivative_is_an_error() {
        let f = ScalarField::builder("log", |_, x| x[(0, 0)].ln()).build(2).unwrap_err();
        assert!(matches!(f, Error::NonFiniteDerivative { .. }));
    }

    #[test]
    fn field_names() {
        for name in FieldName::BUILTIN {
            let parsed: FieldName = name.parse().unwrap();
            assert_eq!(parsed.to_string(), name);
            assert_eq!(resolve_field(&parsed, 2).unwrap().name(), name);
        }
        assert_eq!("linear:a.csv".parse::<FieldName>().unwrap(), FieldName::Linear("a.csv".into()));
        assert!(matches!("linear:".parse::<FieldName>(), Err(Error::UnknownField(_))));
        assert!(matches!("cubic".parse::<FieldName>(), Err(Error::UnknownField(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "1,2\n3,4\n").unwrap();
        let f = resolve_field(&FieldName::Linear(path.clone()), 2).unwrap();
        assert_eq!(f.value(0.0, &SquareMatrix::identity(2)), 5.0);
        assert!(resolve_field(&FieldName::Linear(path), 3).is_err());
    }

    #[test]
    fn time_dependent_field_validates() {
        let k = Rate::constant(2.0);
        let f = ScalarField::builder("decay", move |t, x| (-k.eval(t) * t).exp() * x.trace())
            .time_derivative(|t, x| -2.0 * (-2.0 * t).exp() * x.trace())
            .build(2)
            .unwrap();
        assert!((time_derivative(&f, 0.0, &SquareMatrix::identity(2)).unwrap() + 4.0).abs() < 1e-14);
    }
}
