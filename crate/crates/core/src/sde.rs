//! Solvers and condition checks for `dX = b(t, X) dt + σ(t, X) dB`.
//!
//! Both time integrals are discretized by left endpoints, so the Picard map
//! on a grid and the Euler–Maruyama recursion share the same fixed point.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::{entry_columns, push_row, sample_path, MatrixBrownianPath, SeedSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::integrator::ito_integral_series;
use crate::matspace::SquareMatrix;
use crate::stats::{slope, MeanEstimate};

/// Cells used for every quadrature of a rate function over `[0, T]`.
pub const QUADRATURE_CELLS: usize = 1024;

pub type MatrixFn = Arc<dyn Fn(f64, &SquareMatrix) -> SquareMatrix + Send + Sync>;

/// A nonnegative rate function of time such as `κ₁(t)`.
#[derive(Clone)]
pub struct Rate(Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl Rate {
    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c)
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.0)(t)
    }

    /// Composite trapezoid rule with [`QUADRATURE_CELLS`] cells.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let h = (b - a) / QUADRATURE_CELLS as f64;
        let mut acc = 0.5 * (self.eval(a) + self.eval(b));
        for k in 1..QUADRATURE_CELLS {
            acc += self.eval(a + h * k as f64);
        }
        acc * h
    }

    pub fn scaled(&self, c: f64) -> Self {
        let f = self.clone();
        Self::new(move |t| c * f.eval(t))
    }

    pub fn plus(&self, other: &Rate) -> Self {
        let (f, g) = (self.clone(), other.clone());
        Self::new(move |t| f.eval(t) + g.eval(t))
    }

    /// `sup_{t ≤ T} ∫₀ᵗ κ(s) e^{−c(t−s)} ds` with κ interpolated linearly on
    /// each cell and the exponential integrated exactly.
    pub fn sup_discounted_integral(&self, horizon: f64, c: f64) -> f64 {
        let h = horizon / QUADRATURE_CELLS as f64;
        let ch = c * h;
        // Weights of κ(a) and κ(a + h) in ∫₀ʰ κ(a + u) e^{−c(h−u)} du.
        let (w_left, w_right) = if ch < 1e-8 {
            (0.5 * h, 0.5 * h)
        } else {
            let w0 = -(-ch).exp_m1() / c;
            let w1 = 1.0 / c - w0 / ch;
            (w0 - w1, w1)
        };
        let decay = (-ch).exp();
        let mut value = 0.0f64;
        let mut sup = 0.0f64;
        let mut left = self.eval(0.0);
        for k in 1..=QUADRATURE_CELLS {
            let right = self.eval(h * k as f64);
            value = decay * value + w_left * left + w_right * right;
            sup = sup.max(value);
            left = right;
        }
        sup
    }
}

impl fmt::Debug for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Rate(..)")
    }
}

/// How the diffusion coefficient acts on the Brownian increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseAction {
    /// `σ · dB`, the matrix product.
    LeftMultiply,
    /// `σ ∘ dB`, entry by entry. Equivalent to a left-multiplied system of
    /// dimension n² with the state on the diagonal; used for per-entry
    /// volatilities.
    Entrywise,
}

/// The coefficient pair `(b, σ)` with optional declared regularity rates.
#[derive(Clone)]
pub struct Coefficients {
    drift: MatrixFn,
    diffusion: MatrixFn,
    noise: NoiseAction,
    /// Global Lipschitz rate κ₁.
    pub kappa1: Option<Rate>,
    /// Bound κ₂ on `‖b(t,0)‖² + ‖σ(t,0)‖²`.
    pub kappa2: Option<Rate>,
    /// Monotone rate κ: `2⟨x, b⟩ + ‖σ‖² ≤ κ (1 + ‖x‖²)`.
    pub kappa: Option<Rate>,
    /// Local Lipschitz rate κ⁽ᴿ⁾ on the ball of radius R.
    pub kappa_local: Option<Arc<dyn Fn(f64) -> Rate + Send + Sync>>,
    /// Diffusion growth κ₀: `‖σ‖² ≤ κ₀ (1 + ‖x‖²)`.
    pub kappa0: Option<Rate>,
}

impl fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficients")
            .field("noise", &self.noise)
            .field("kappa1", &self.kappa1.is_some())
            .field("kappa2", &self.kappa2.is_some())
            .field("kappa", &self.kappa.is_some())
            .field("kappa_local", &self.kappa_local.is_some())
            .field("kappa0", &self.kappa0.is_some())
            .finish()
    }
}

impl Coefficients {
    pub fn new(
        drift: impl Fn(f64, &SquareMatrix) -> SquareMatrix + Send + Sync + 'static,
        diffusion: impl Fn(f64, &SquareMatrix) -> SquareMatrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            noise: NoiseAction::LeftMultiply,
            kappa1: None,
            kappa2: None,
            kappa: None,
            kappa_local: None,
            kappa0: None,
        }
    }

    /// `b ≡ 0, σ ≡ 0` with every rate declared as zero.
    pub fn zero() -> Self {
        Self::new(|_, x| SquareMatrix::zeros(x.dim()), |_, x| SquareMatrix::zeros(x.dim()))
            .with_kappa1(Rate::constant(0.0))
            .with_kappa2(Rate::constant(0.0))
            .with_monotone(Rate::constant(0.0))
            .with_local(|_| Rate::constant(0.0))
            .with_kappa0(Rate::constant(0.0))
    }

    /// Constant coefficients `b ≡ drift`, `σ ≡ diffusion`.
    pub fn constant(drift: SquareMatrix, diffusion: SquareMatrix) -> Self {
        let k2 = drift.hs_norm_sq() + diffusion.hs_norm_sq();
        let (d, s) = (drift.clone(), diffusion.clone());
        Self::new(move |_, _| d.clone(), move |_, _| s.clone())
            .with_kappa1(Rate::constant(0.0))
            .with_kappa2(Rate::constant(k2))
            .with_local(|_| Rate::constant(0.0))
            .with_kappa0(Rate::constant(diffusion.hs_norm_sq()))
            // 2⟨x, d⟩ ≤ ‖x‖² + ‖d‖², plus ‖s‖².
            .with_monotone(Rate::constant(1.0f64.max(k2)))
    }

    /// The linear test equation `b(t, X) = a X`, `σ(t, X) = s X`.
    ///
    /// Declared rates: κ₁ = 2(a² + s²), κ₂ = 0, κ = max(0, 2a + s²),
    /// κ⁽ᴿ⁾ = κ₁ and κ₀ = s².
    pub fn linear(a: f64, s: f64) -> Self {
        let k1 = 2.0 * (a * a + s * s);
        Self::new(move |_, x| x.scale(a), move |_, x| x.scale(s))
            .with_kappa1(Rate::constant(k1))
            .with_kappa2(Rate::constant(0.0))
            .with_monotone(Rate::constant((2.0 * a + s * s).max(0.0)))
            .with_local(move |_| Rate::constant(k1))
            .with_kappa0(Rate::constant(s * s))
    }

    pub fn with_noise(mut self, noise: NoiseAction) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_kappa1(mut self, r: Rate) -> Self {
        self.kappa1 = Some(r);
        self
    }

    pub fn with_kappa2(mut self, r: Rate) -> Self {
        self.kappa2 = Some(r);
        self
    }

    pub fn with_monotone(mut self, r: Rate) -> Self {
        self.kappa = Some(r);
        self
    }

    pub fn with_local(mut self, f: impl Fn(f64) -> Rate + Send + Sync + 'static) -> Self {
        self.kappa_local = Some(Arc::new(f));
        self
    }

    pub fn with_kappa0(mut self, r: Rate) -> Self {
        self.kappa0 = Some(r);
        self
    }

    pub fn noise(&self) -> NoiseAction {
        self.noise
    }

    pub fn drift(&self, t: f64, x: &SquareMatrix) -> SquareMatrix {
        (self.drift)(t, x)
    }

    pub fn diffusion(&self, t: f64, x: &SquareMatrix) -> SquareMatrix {
        (self.diffusion)(t, x)
    }

    /// The stochastic increment `σ(t, x) dB` (or `σ ∘ dB`).
    pub fn noise_increment(&self, t: f64, x: &SquareMatrix, db: &SquareMatrix) -> Result<SquareMatrix> {
        let sigma = self.diffusion(t, x);
        match self.noise {
            NoiseAction::LeftMultiply => sigma.matmul(db),
            NoiseAction::Entrywise => sigma.hadamard(db),
        }
    }

    fn require(rate: &Option<Rate>, name: &'static str) -> Result<Rate> {
        rate.clone().ok_or(Error::UndeclaredRate(name))
    }

    /// `κ = κ₁ + κ₂`, the linear-growth rate implied by the Lipschitz and
    /// origin bounds.
    pub fn growth_rate(&self) -> Result<Rate> {
        Ok(Self::require(&self.kappa1, "kappa1")?.plus(&Self::require(&self.kappa2, "kappa2")?))
    }

    pub fn contraction_constant(&self, horizon: f64, n: usize, spec: WeightedNormSpec) -> Result<f64> {
        let k1 = Self::require(&self.kappa1, "kappa1")?;
        Ok(contraction_constant(&k1, &self.growth_rate()?, horizon, n, spec))
    }
}

/// Scheme that produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    EulerMaruyama,
    Picard,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "euler-maruyama",
            Scheme::Picard => "picard",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPath {
    pub states: Vec<SquareMatrix>,
    pub driver: MatrixBrownianPath,
    pub scheme: Scheme,
}

impl SolutionPath {
    pub fn grid(&self) -> &TimeGrid {
        self.driver.grid()
    }

    pub fn terminal(&self) -> &SquareMatrix {
        self.states.last().expect("solution has states")
    }

    /// `sup_k ‖X_k‖²`.
    pub fn sup_norm_sq(&self) -> f64 {
        self.states.iter().map(SquareMatrix::hs_norm_sq).fold(0.0, f64::max)
    }
}

/// `X_{k+1} = X_k + b(t_k, X_k) Δt_k + σ(t_k, X_k) ΔB_k`.
pub fn euler_maruyama(
    c: &Coefficients,
    x0: &SquareMatrix,
    driver: &MatrixBrownianPath,
) -> Result<SolutionPath> {
    if x0.dim() != driver.dim() {
        return Err(Error::DimensionMismatch {
            expected: driver.dim(),
            found: x0.dim(),
        });
    }
    if x0.first_non_finite().is_some() {
        return Err(Error::BlowUp { node: 0 });
    }
    let grid = driver.grid();
    let b = driver.values();
    let mut states = Vec::with_capacity(grid.len());
    let mut x = x0.clone();
    states.push(x.clone());
    for k in 0..grid.steps() {
        let t = grid.nodes()[k];
        let db = b[k + 1].try_sub(&b[k])?;
        let drift = c.drift(t, &x);
        let noise = c.noise_increment(t, &x, &db)?;
        x.axpy(grid.dt(k), &drift)?;
        x = x.try_add(&noise)?;
        if x.first_non_finite().is_some() {
            return Err(Error::BlowUp { node: k + 1 });
        }
        states.push(x.clone());
    }
    Ok(SolutionPath {
        states,
        driver: driver.clone(),
        scheme: Scheme::EulerMaruyama,
    })
}

/// Solved paths plus the ids of paths that blew up.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionEnsemble {
    pub paths: Vec<SolutionPath>,
    /// `(path_id, first non-finite node)` of every aborted path.
    pub aborted: Vec<(u64, usize)>,
}

impl SolutionEnsemble {
    pub fn states(&self) -> Vec<Vec<SquareMatrix>> {
        self.paths.iter().map(|p| p.states.clone()).collect()
    }

    /// Ensemble CSV: `path_id,scheme,t,e11,…`. Aborted paths are absent.
    pub fn to_csv(&self, ids: &[u64]) -> String {
        let Some(first) = self.paths.first() else {
            return String::new();
        };
        let n = first.states[0].dim();
        let mut out = format!("path_id,scheme,t,{}\n", entry_columns(n).join(","));
        for (p, id) in self.paths.iter().zip(ids) {
            let lead = [id.to_string(), p.scheme.as_str().to_string()];
            for (t, x) in p.grid().nodes().iter().zip(&p.states) {
                push_row(&mut out, &lead, *t, x);
            }
        }
        out
    }
}

/// Euler–Maruyama on paths `0..paths` of the seeded ensemble. Returns the
/// solved paths and, separately, the ids of the solved paths.
pub fn solve_ensemble(
    c: &Coefficients,
    x0: &SquareMatrix,
    grid: &TimeGrid,
    paths: usize,
    master_seed: u64,
) -> Result<(SolutionEnsemble, Vec<u64>)> {
    let results = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let driver = sample_path(x0.dim(), grid, SeedSpec::new(master_seed, i))?;
            Ok((i, euler_maruyama(c, x0, &driver)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ens = SolutionEnsemble {
        paths: Vec::new(),
        aborted: Vec::new(),
    };
    let mut ids = Vec::new();
    for (i, r) in results {
        match r {
            Ok(p) => {
                ens.paths.push(p);
                ids.push(i);
            }
            Err(Error::BlowUp { node }) => ens.aborted.push((i, node)),
            Err(e) => return Err(e),
        }
    }
    Ok((ens, ids))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongOrder {
    pub step_sizes: Vec<f64>,
    /// `E‖X_T^h − X_T^ref‖` for each step size.
    pub errors: Vec<f64>,
    pub reference_steps: usize,
    /// `None` when every error vanishes and no slope exists.
    pub order: Option<f64>,
}

/// Doublings between the finest fitted level and the reference solution.
pub const REFERENCE_REFINEMENT: u32 = 4;

/// Levels `base_steps · 2^l` for `l < levels` on `[0, horizon]`, each
/// run over paths `0..paths` of the ensemble `master_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Refinement {
    pub horizon: f64,
    pub base_steps: usize,
    pub levels: usize,
    pub paths: usize,
    pub master_seed: u64,
}

/// Self-refinement estimate of the strong order. The reference solution
/// uses `2^REFERENCE_REFINEMENT` times the finest level's steps. All levels
/// are solved on the same Brownian paths restricted to coarser grids.
pub fn strong_error_order(c: &Coefficients, x0: &SquareMatrix, plan: &Refinement) -> Result<StrongOrder> {
    let Refinement {
        horizon,
        base_steps,
        levels,
        paths,
        master_seed,
    } = *plan;
    if levels < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 levels, got {levels}")));
    }
    if base_steps == 0 || paths == 0 {
        return Err(Error::InvalidArgument("base_steps and paths must be positive".into()));
    }
    let reference_steps = base_steps << (levels - 1 + REFERENCE_REFINEMENT as usize);
    let fine = TimeGrid::uniform(horizon, reference_steps)?;
    let grids = (0..levels)
        .map(|l| TimeGrid::uniform(horizon, base_steps << l))
        .collect::<Result<Vec<_>>>()?;

    let per_path = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let driver = sample_path(x0.dim(), &fine, SeedSpec::new(master_seed, i))?;
            let solve = |d: &MatrixBrownianPath| {
                euler_maruyama(c, x0, d).map_err(|e| match e {
                    Error::BlowUp { node } => Error::PathBlowUp { path_id: i, node },
                    other => other,
                })
            };
            let reference = solve(&driver)?;
            grids
                .iter()
                .map(|g| {
                    let coarse = solve(&driver.restrict(g)?)?;
                    Ok(coarse.terminal().try_sub(reference.terminal())?.hs_norm())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let errors: Vec<f64> = (0..levels)
        .map(|l| per_path.iter().map(|e| e[l]).sum::<f64>() / paths as f64)
        .collect();
    let step_sizes: Vec<f64> = grids.iter().map(|g| g.dt(0)).collect();
    let scale = 1.0 + x0.hs_norm();
    let order = if errors.iter().all(|&e| e <= 1e-13 * scale) {
        None
    } else {
        let lx: Vec<f64> = step_sizes.iter().map(|h| h.log2()).collect();
        let ly: Vec<f64> = errors.iter().map(|e| e.max(f64::MIN_POSITIVE).log2()).collect();
        Some(slope(&lx, &ly))
    };
    Ok(StrongOrder {
        step_sizes,
        errors,
        reference_steps,
        order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedNormSpec {
    lambda: f64,
}

impl WeightedNormSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_finite() && lambda > 0.0 {
            Ok(Self { lambda })
        } else {
            Err(Error::InvalidArgument(format!("lambda must be positive, found {lambda}")))
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

fn sup_norm_weighted(grid: &TimeGrid, ensemble: &[Vec<SquareMatrix>], lambda: f64) -> f64 {
    if ensemble.is_empty() {
        return 0.0;
    }
    let m = ensemble.len() as f64;
    grid.nodes()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let ms = ensemble.iter().map(|u| u[k].hs_norm_sq()).sum::<f64>() / m;
            (-lambda * t).exp() * ms.sqrt()
        })
        .fold(0.0, f64::max)
}

/// `max_k e^{−λ t_k} (mean over paths of ‖u(t_k)‖²)^{1/2}`; `ensemble[p][k]`
/// is path `p` at node `k`.
pub fn weighted_sup_norm(grid: &TimeGrid, ensemble: &[Vec<SquareMatrix>], spec: WeightedNormSpec) -> f64 {
    sup_norm_weighted(grid, ensemble, spec.lambda)
}

/// The unweighted norm `max_k (mean ‖u(t_k)‖²)^{1/2}`.
pub fn mean_square_sup_norm(grid: &TimeGrid, ensemble: &[Vec<SquareMatrix>]) -> f64 {
    sup_norm_weighted(grid, ensemble, 0.0)
}

/// Pathwise difference of two ensembles on the same grid.
pub fn ensemble_difference(
    a: &[Vec<SquareMatrix>],
    b: &[Vec<SquareMatrix>],
) -> Result<Vec<Vec<SquareMatrix>>> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("ensembles differ in size".into()));
    }
    a.iter()
        .zip(b)
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| x.try_sub(y)).collect())
        .collect()
}

#[derive(Debug, Clone)]
pub struct PicardResult {
    /// `iterates[m][p][k]`: iterate m, path p, node k. `iterates[0]` is the
    /// constant initial guess.
    pub iterates: Vec<Vec<Vec<SquareMatrix>>>,
    /// `successive_norms[m] = ⦀u_{m+1} − u_m⦀_{2,λ}`.
    pub successive_norms: Vec<f64>,
}

impl PicardResult {
    pub fn last(&self) -> &[Vec<SquareMatrix>] {
        self.iterates.last().expect("at least the initial iterate")
    }

    /// Ratios of consecutive successive norms.
    pub fn ratios(&self) -> Vec<f64> {
        self.successive_norms.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// One application of `Γ(u)(t) = x + ∫₀ᵗ b(s, u) ds + ∫₀ᵗ σ(s, u) dB` on
/// a single path. The stochastic integral is the integrator's left-endpoint
/// Itô sum.
pub fn picard_map(
    c: &Coefficients,
    x0: &SquareMatrix,
    driver: &MatrixBrownianPath,
    u: &[SquareMatrix],
) -> Result<Vec<SquareMatrix>> {
    if c.noise() != NoiseAction::LeftMultiply {
        return Err(Error::InvalidArgument(
            "the Picard map is defined for left-multiplied noise".into(),
        ));
    }
    let grid = driver.grid();
    if u.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "iterate has {} nodes, grid has {}",
            u.len(),
            grid.len()
        )));
    }
    let sigma = |pre: &crate::brownian::PathPrefix<'_>| c.diffusion(pre.time(), &u[pre.index()]);
    let stochastic = ito_integral_series(&sigma, driver)?;
    let mut lebesgue = SquareMatrix::zeros(x0.dim());
    let mut out = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let value = x0.try_add(&lebesgue)?.try_add(&stochastic[k])?;
        if value.first_non_finite().is_some() {
            return Err(Error::BlowUp { node: k });
        }
        out.push(value);
        if k < grid.steps() {
            lebesgue.axpy(grid.dt(k), &c.drift(grid.nodes()[k], &u[k]))?;
        }
    }
    Ok(out)
}

/// Iterates the Picard map from `u₀ ≡ x0` on every driver.
pub fn picard_iterate(
    c: &Coefficients,
    x0: &SquareMatrix,
    drivers: &[MatrixBrownianPath],
    iterations: usize,
    spec: WeightedNormSpec,
) -> Result<PicardResult> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("at least one iteration is required".into()));
    }
    let Some(first) = drivers.first() else {
        return Err(Error::InvalidArgument("no driving paths".into()));
    };
    let grid = first.grid().clone();
    if drivers.iter().any(|d| d.grid() != &grid) {
        return Err(Error::GridMismatch("drivers must share one grid".into()));
    }
    let initial: Vec<Vec<SquareMatrix>> = drivers.iter().map(|_| vec![x0.clone(); grid.len()]).collect();
    let mut iterates = vec![initial];
    let mut successive_norms = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let prev = iterates.last().expect("nonempty");
        let next = drivers
            .par_iter()
            .zip(prev.par_iter())
            .enumerate()
            .map(|(p, (d, u))| {
                picard_map(c, x0, d, u).map_err(|e| match e {
                    Error::BlowUp { node } => Error::PathBlowUp {
                        path_id: p as u64,
                        node,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let diff = ensemble_difference(&next, prev)?;
        successive_norms.push(weighted_sup_norm(&grid, &diff, spec));
        iterates.push(next);
    }
    Ok(PicardResult {
        iterates,
        successive_norms,
    })
}

/// `α = (1/λ) ∫₀ᵀ κ₁ dt + 2n sup_t ∫₀ᵗ κ(s) e^{−2λ(t−s)} ds`.
pub fn contraction_constant(kappa1: &Rate, kappa: &Rate, horizon: f64, n: usize, spec: WeightedNormSpec) -> f64 {
    let lambda = spec.lambda();
    kappa1.integrate(0.0, horizon) / lambda
        + 2.0 * n as f64 * kappa.sup_discounted_integral(horizon, 2.0 * lambda)
}

/// Doubling search from λ = 1 for the first λ with `α(λ) < 1`.
pub fn smallest_contracting_lambda(
    c: &Coefficients,
    horizon: f64,
    n: usize,
) -> Result<(WeightedNormSpec, f64)> {
    let mut lambda = 1.0;
    for _ in 0..64 {
        let spec = WeightedNormSpec::new(lambda)?;
        let alpha = c.contraction_constant(horizon, n, spec)?;
        if alpha < 1.0 {
            return Ok((spec, alpha));
        }
        lambda *= 2.0;
    }
    Err(Error::InvalidArgument(
        "no contracting lambda found below 2^64".into(),
    ))
}

/// Scales `x` onto the ball of radius `r` when it lies outside.
fn clamp_to_ball(x: &SquareMatrix, r: f64) -> Option<SquareMatrix> {
    let norm = x.hs_norm();
    (norm > r).then(|| x.scale(r / norm))
}

/// Radial truncation `b_R(t, x) = b(t, (‖x‖ ∧ R) x / ‖x‖)`, same for σ.
/// Inside the ball the original coefficients are called unchanged, and the
/// scaling factor is taken as 1 at `x = 0`. The truncated pair is globally
/// Lipschitz with rate `4κ⁽ᴿ⁾` when κ⁽ᴿ⁾ is declared.
pub fn truncate_coeffs(c: &Coefficients, radius: f64) -> Result<Coefficients> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, found {radius}")));
    }
    let (b, s) = (c.drift.clone(), c.diffusion.clone());
    let mut out = Coefficients::new(
        move |t, x| match clamp_to_ball(x, radius) {
            Some(y) => b(t, &y),
            None => b(t, x),
        },
        move |t, x| match clamp_to_ball(x, radius) {
            Some(y) => s(t, &y),
            None => s(t, x),
        },
    )
    .with_noise(c.noise);
    out.kappa1 = c.kappa_local.as_ref().map(|local| local(radius).scaled(4.0));
    out.kappa2 = c.kappa2.clone();
    out.kappa0 = c.kappa0.clone();
    Ok(out)
}

/// First node with `‖X_k‖ ≥ radius`.
pub fn exit_node(states: &[SquareMatrix], radius: f64) -> Option<usize> {
    states.iter().position(|x| x.hs_norm() >= radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationConsistency {
    /// First node where the radius-R solution reaches the sphere.
    pub exit_node: Option<usize>,
    /// Nodes compared (through the exit node inclusive).
    pub compared_nodes: usize,
    pub agree: bool,
}

/// Solves with radii R and R + 1 on the same driver and compares the states
/// bitwise up to and including the exit node of the radius-R solution.
pub fn consistency_under_truncation(
    c: &Coefficients,
    x0: &SquareMatrix,
    radius: f64,
    driver: &MatrixBrownianPath,
) -> Result<TruncationConsistency> {
    if radius <= x0.hs_norm() {
        return Err(Error::InvalidArgument(format!(
            "radius {radius} must exceed the initial norm {}",
            x0.hs_norm()
        )));
    }
    let inner = euler_maruyama(&truncate_coeffs(c, radius)?, x0, driver)?;
    let outer = euler_maruyama(&truncate_coeffs(c, radius + 1.0)?, x0, driver)?;
    let exit = exit_node(&inner.states, radius);
    let compared = exit.map_or(inner.states.len(), |k| k + 1);
    let agree = inner.states[..compared]
        .iter()
        .zip(&outer.states[..compared])
        .all(|(a, b)| {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    Ok(TruncationConsistency {
        exit_node: exit,
        compared_nodes: compared,
        agree,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    /// Sample mean of `sup_k ‖X_k‖²`.
    pub lhs: f64,
    pub bound: f64,
    pub pass: bool,
    /// `1 + lhs`, compared against `bound` in the Gronwall form.
    pub one_plus_lhs: f64,
}

fn mean_sup_norm_sq(ens: &SolutionEnsemble) -> Result<f64> {
    if ens.paths.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let sups: Vec<f64> = ens.paths.iter().map(SolutionPath::sup_norm_sq).collect();
    Ok(MeanEstimate::from_samples(&sups).mean)
}

/// `E sup ‖X‖² ≤ (1 + 3‖x‖²) exp(6 (T + 4n) ∫₀ᵀ κ)` with `κ = κ₁ + κ₂`.
pub fn moment_bound(x0: &SquareMatrix, kappa: &Rate, horizon: f64, n: usize) -> f64 {
    (1.0 + 3.0 * x0.hs_norm_sq()) * (6.0 * (horizon + 4.0 * n as f64) * kappa.integrate(0.0, horizon)).exp()
}

pub fn moment_bound_check(
    ens: &SolutionEnsemble,
    x0: &SquareMatrix,
    kappa: &Rate,
    horizon: f64,
    n: usize,
) -> Result<BoundCheck> {
    let lhs = mean_sup_norm_sq(ens)?;
    let bound = moment_bound(x0, kappa, horizon, n);
    Ok(BoundCheck {
        lhs,
        bound,
        pass: lhs <= bound,
        one_plus_lhs: 1.0 + lhs,
    })
}

/// `E sup ‖X‖² ≤ (1 + 2‖x‖²) exp(2 ∫₀ᵀ (κ + 64 κ₀))` under the monotone
/// condition and diffusion growth κ₀.
pub fn monotone_moment_bound(x0: &SquareMatrix, kappa: &Rate, kappa0: &Rate, horizon: f64) -> f64 {
    let integrand = kappa.plus(&kappa0.scaled(64.0));
    (1.0 + 2.0 * x0.hs_norm_sq()) * (2.0 * integrand.integrate(0.0, horizon)).exp()
}

pub fn monotone_moment_bound_check(
    ens: &SolutionEnsemble,
    x0: &SquareMatrix,
    kappa: &Rate,
    kappa0: &Rate,
    horizon: f64,
) -> Result<BoundCheck> {
    let lhs = mean_sup_norm_sq(ens)?;
    let bound = monotone_moment_bound(x0, kappa, kappa0, horizon);
    Ok(BoundCheck {
        lhs,
        bound,
        pass: lhs <= bound,
        one_plus_lhs: 1.0 + lhs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionEntry {
    pub condition: String,
    pub samples: usize,
    /// Smallest `rhs − lhs` over the samples; negative means violated.
    pub worst_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub entries: Vec<ConditionEntry>,
}

impl ConditionReport {
    pub fn get(&self, condition: &str) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.condition == condition)
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

/// A random `(t, x, y)` probe.
type Draw = (f64, SquareMatrix, SquareMatrix);

fn random_in_ball(n: usize, radius: f64, rng: &mut impl Rng) -> SquareMatrix {
    let dir = SquareMatrix::from_fn(n, |_, _| rng.random_range(-1.0..1.0)).expect("finite");
    let norm = dir.hs_norm();
    if norm == 0.0 {
        return dir;
    }
    dir.scale(radius * rng.random::<f64>() / norm)
}

/// Evaluates every declared inequality on random `(t, x, y)` with `t ∈ [0, T]`
/// and `‖x‖, ‖y‖ ≤ radius`. Conditions reported:
///
/// * `A1`: `‖b(x) − b(y)‖² + ‖σ(x) − σ(y)‖² ≤ κ₁ ‖x − y‖²`
/// * `A2`: `‖b(0)‖² + ‖σ(0)‖² ≤ κ₂`
/// * `linear-growth`: `‖b(x)‖² + ‖σ(x)‖² ≤ 2κ (1 + ‖x‖²)`, `κ = κ₁ + κ₂`
/// * `H1`: the A1 inequality with κ⁽ᴿ⁾, `R = radius`
/// * `H2`: `2⟨x, b(x)⟩ + ‖σ(x)‖² ≤ κ (1 + ‖x‖²)`
/// * `H2-implied`: H2 with rate `1 + 2(κ₁ + κ₂)`
/// * `diffusion-growth`: `‖σ(x)‖² ≤ κ₀ (1 + ‖x‖²)`
pub fn check_conditions(
    c: &Coefficients,
    n: usize,
    samples: usize,
    radius: f64,
    horizon: f64,
    master_seed: u64,
) -> Result<ConditionReport> {
    let mut rng = SeedSpec::new(master_seed, 0).rng();
    let draws: Vec<Draw> = (0..samples)
        .map(|_| {
            let t = rng.random::<f64>() * horizon;
            (t, random_in_ball(n, radius, &mut rng), random_in_ball(n, radius, &mut rng))
        })
        .collect();
    let zero = SquareMatrix::zeros(n);

    let lipschitz_lhs = |t: f64, x: &SquareMatrix, y: &SquareMatrix| -> Result<f64> {
        Ok(c.drift(t, x).try_sub(&c.drift(t, y))?.hs_norm_sq()
            + c.diffusion(t, x).try_sub(&c.diffusion(t, y))?.hs_norm_sq())
    };
    let worst = |name: &str, f: &dyn Fn(&Draw) -> Result<f64>| -> Result<ConditionEntry> {
        let mut margin = f64::INFINITY;
        for d in &draws {
            margin = margin.min(f(d)?);
        }
        Ok(ConditionEntry {
            condition: name.to_string(),
            samples,
            worst_margin: margin,
            pass: margin >= 0.0,
        })
    };

    let mut entries = Vec::new();
    if let Some(k1) = &c.kappa1 {
        entries.push(worst("A1", &|(t, x, y)| {
            Ok(k1.eval(*t) * x.try_sub(y)?.hs_norm_sq() - lipschitz_lhs(*t, x, y)?)
        })?);
    }
    if let Some(k2) = &c.kappa2 {
        entries.push(worst("A2", &|(t, _, _)| {
            Ok(k2.eval(*t) - c.drift(*t, &zero).hs_norm_sq() - c.diffusion(*t, &zero).hs_norm_sq())
        })?);
    }
    if let Ok(kappa) = c.growth_rate() {
        entries.push(worst("linear-growth", &|(t, x, _)| {
            Ok(2.0 * kappa.eval(*t) * (1.0 + x.hs_norm_sq())
                - c.drift(*t, x).hs_norm_sq()
                - c.diffusion(*t, x).hs_norm_sq())
        })?);
        entries.push(worst("H2-implied", &|(t, x, _)| {
            let lhs = 2.0 * x.hs_inner(&c.drift(*t, x))? + c.diffusion(*t, x).hs_norm_sq();
            Ok((1.0 + 2.0 * kappa.eval(*t)) * (1.0 + x.hs_norm_sq()) - lhs)
        })?);
    }
    if let Some(local) = &c.kappa_local {
        let kr = local(radius);
        entries.push(worst("H1", &|(t, x, y)| {
            Ok(kr.eval(*t) * x.try_sub(y)?.hs_norm_sq() - lipschitz_lhs(*t, x, y)?)
        })?);
    }
    if let Some(k) = &c.kappa {
        entries.push(worst("H2", &|(t, x, _)| {
            let lhs = 2.0 * x.hs_inner(&c.drift(*t, x))? + c.diffusion(*t, x).hs_norm_sq();
            Ok(k.eval(*t) * (1.0 + x.hs_norm_sq()) - lhs)
        })?);
    }
    if let Some(k0) = &c.kappa0 {
        entries.push(worst("diffusion-growth", &|(t, x, _)| {
            Ok(k0.eval(*t) * (1.0 + x.hs_norm_sq()) - c.diffusion(*t, x).hs_norm_sq())
        })?);
    }
    Ok(ConditionReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::sample_ensemble;

    fn m2(rows: [[f64; 2]; 2]) -> SquareMatrix {
        SquareMatrix::from_rows(&rows).unwrap()
    }

    fn driver(steps: usize, seed: u64) -> MatrixBrownianPath {
        sample_path(2, &TimeGrid::uniform(1.0, steps).unwrap(), SeedSpec::new(seed, 0)).unwrap()
    }

    fn close(a: &SquareMatrix, b: &SquareMatrix, tol: f64) -> bool {
        a.try_sub(b).unwrap().hs_norm() <= tol * (1.0 + b.hs_norm())
    }

    #[test]
    fn rate_quadrature() {
        assert!((Rate::constant(2.0).integrate(0.0, 3.0) - 6.0).abs() < 1e-12);
        let lin = Rate::new(|t| t);
        assert!((lin.integrate(0.0, 1.0) - 0.5).abs() < 1e-14);
        // ∫₀ᵗ e^{−c(t−s)} ds = (1 − e^{−ct}) / c, increasing in t.
        let sup = Rate::constant(1.0).sup_discounted_integral(1.0, 200.0);
        assert!((sup - (1.0 - (-200.0f64).exp()) / 200.0).abs() < 1e-14);
        let sup_lin = lin.sup_discounted_integral(1.0, 3.0);
        // ∫₀¹ s e^{−3(1−s)} ds = 1/3 − (1 − e^{−3})/9
        let exact = 1.0 / 3.0 - (1.0 - (-3.0f64).exp()) / 9.0;
        assert!((sup_lin - exact).abs() < 1e-12, "{sup_lin} vs {exact}");
    }

    #[test]
    fn zero_coefficients_keep_the_initial_state() {
        let x0 = m2([[1.0, 2.0], [3.0, 4.0]]);
        let sol = euler_maruyama(&Coefficients::zero(), &x0, &driver(16, 1)).unwrap();
        assert!(sol.states.iter().all(|x| *x == x0));
    }

    #[test]
    fn constant_drift_is_exact_on_dyadic_data() {
        let x0 = m2([[0.5, -1.0], [0.25, 2.0]]);
        let b = m2([[0.5, -1.25], [2.0, 0.0]]);
        let c = Coefficients::constant(b.clone(), SquareMatrix::zeros(2));
        let d = driver(8, 2);
        let sol = euler_maruyama(&c, &x0, &d).unwrap();
        for (k, x) in sol.states.iter().enumerate() {
            let t = d.grid().nodes()[k];
            assert_eq!(*x, x0.try_add(&b.scale(t)).unwrap());
        }
        // Non-dyadic data agrees to rounding.
        let b = m2([[0.3, 0.1], [-0.7, 0.2]]);
        let c = Coefficients::constant(b.clone(), SquareMatrix::zeros(2));
        let d = sample_path(2, &TimeGrid::uniform(1.0, 10).unwrap(), SeedSpec::new(3, 0)).unwrap();
        let sol = euler_maruyama(&c, &x0, &d).unwrap();
        for (k, x) in sol.states.iter().enumerate() {
            let t = d.grid().nodes()[k];
            assert!(close(x, &x0.try_add(&b.scale(t)).unwrap(), 1e-14));
        }
    }

    #[test]
    fn identity_diffusion_telescopes() {
        let x0 = m2([[1.0, 0.0], [0.0, 1.0]]);
        let c = Coefficients::constant(SquareMatrix::zeros(2), SquareMatrix::identity(2));
        let d = driver(32, 3);
        let sol = euler_maruyama(&c, &x0, &d).unwrap();
        for (x, b) in sol.states.iter().zip(d.values()) {
            assert!(close(x, &x0.try_add(b).unwrap(), 1e-14));
        }
    }

    #[test]
    fn constant_coefficients_match_closed_form() {
        let x0 = m2([[1.0, -1.0], [0.5, 0.0]]);
        let b = m2([[0.2, 0.0], [0.1, -0.3]]);
        let s = m2([[1.0, 0.5], [0.0, 2.0]]);
        let c = Coefficients::constant(b.clone(), s.clone());
        let d = driver(20, 4);
        let sol = euler_maruyama(&c, &x0, &d).unwrap();
        for (k, x) in sol.states.iter().enumerate() {
            let t = d.grid().nodes()[k];
            let expected = x0
                .try_add(&b.scale(t))
                .unwrap()
                .try_add(&s.matmul(&d.values()[k]).unwrap())
                .unwrap();
            assert!(close(x, &expected, 1e-13));
        }
    }

    #[test]
    fn blow_up_reports_first_bad_node() {
        let c = Coefficients::new(|_, x| x.map(|v| v * v * 1e200), |_, x| SquareMatrix::zeros(x.dim()));
        let x0 = SquareMatrix::filled(2, 1e100).unwrap();
        let err = euler_maruyama(&c, &x0, &driver(4, 5)).unwrap_err();
        assert_eq!(err, Error::BlowUp { node: 1 });
    }

    #[test]
    fn ensemble_records_aborted_paths() {
        let c = Coefficients::new(|_, x| x.map(|v| v * v * 1e300), |_, x| SquareMatrix::zeros(x.dim()));
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let (ens, ids) = solve_ensemble(&c, &SquareMatrix::identity(2).scale(1e10), &grid, 3, 1).unwrap();
        assert!(ens.paths.is_empty());
        assert!(ids.is_empty());
        assert_eq!(ens.aborted.len(), 3);
    }

    #[test]
    fn entrywise_noise_scales_each_entry() {
        let sigma = m2([[0.0, 2.0], [3.0, 0.0]]);
        let c = Coefficients::constant(SquareMatrix::zeros(2), sigma.clone()).with_noise(NoiseAction::Entrywise);
        let d = driver(4, 6);
        let sol = euler_maruyama(&c, &SquareMatrix::zeros(2), &d).unwrap();
        let expected = sigma.hadamard(d.terminal()).unwrap();
        assert!(close(sol.terminal(), &expected, 1e-14));
        assert_eq!(sol.terminal()[(0, 0)], 0.0);
    }

    #[test]
    fn weighted_norm_examples() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let zero = vec![vec![SquareMatrix::zeros(2); 11]; 3];
        let spec = WeightedNormSpec::new(2.0).unwrap();
        assert_eq!(weighted_sup_norm(&grid, &zero, spec), 0.0);

        let x = m2([[3.0, 0.0], [0.0, 4.0]]);
        let constant = vec![vec![x.clone(); 11]];
        let big = WeightedNormSpec::new(1e6).unwrap();
        assert_eq!(weighted_sup_norm(&grid, &constant, big), 5.0);

        let lambda = 1.5;
        let grown: Vec<SquareMatrix> = grid
            .nodes()
            .iter()
            .map(|t| SquareMatrix::basis(2, 0, 0).unwrap().scale((lambda * t).exp()))
            .collect();
        let v = weighted_sup_norm(&grid, &[grown], WeightedNormSpec::new(lambda).unwrap());
        assert!((v - 1.0).abs() < 1e-14);
        assert!(WeightedNormSpec::new(0.0).is_err());
    }

    #[test]
    fn contraction_constant_examples() {
        let zero = Rate::constant(0.0);
        let spec = WeightedNormSpec::new(3.0).unwrap();
        assert_eq!(contraction_constant(&zero, &zero, 1.0, 2, spec), 0.0);

        let one = Rate::constant(1.0);
        let alpha = contraction_constant(&one, &one, 1.0, 2, WeightedNormSpec::new(100.0).unwrap());
        let expected = 0.01 + 4.0 * (1.0 - (-200.0f64).exp()) / 200.0;
        assert!((alpha - expected).abs() < 1e-13, "{alpha} vs {expected}");
        assert!((alpha - 0.03).abs() < 1e-12);

        let undeclared = Coefficients::new(|_, x| x.clone(), |_, x| x.clone());
        assert_eq!(
            undeclared.contraction_constant(1.0, 2, spec),
            Err(Error::UndeclaredRate("kappa1"))
        );
    }

    #[test]
    fn lambda_search_is_monotone() {
        let c = Coefficients::linear(0.5, 0.3);
        let (spec, alpha) = smallest_contracting_lambda(&c, 1.0, 2).unwrap();
        assert!(alpha < 1.0);
        // κ₁ = κ = 0.68: α(1) ≈ 1.27, α(2) ≈ 1.01, α(4) ≈ 0.51.
        assert_eq!(spec.lambda(), 4.0);
        let half = WeightedNormSpec::new(spec.lambda() / 2.0).unwrap();
        assert!(c.contraction_constant(1.0, 2, half).unwrap() >= 1.0);
        let mut prev = f64::INFINITY;
        for l in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let a = c.contraction_constant(1.0, 2, WeightedNormSpec::new(l).unwrap()).unwrap();
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn picard_constant_map_is_stationary() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let drivers = sample_ensemble(2, &grid, 4, 1).unwrap();
        let x0 = m2([[1.0, 2.0], [0.0, 1.0]]);
        let res = picard_iterate(&Coefficients::zero(), &x0, &drivers, 3, WeightedNormSpec::new(1.0).unwrap()).unwrap();
        assert!(res.successive_norms.iter().all(|&v| v == 0.0));
        assert!(res.last().iter().all(|u| u.iter().all(|x| *x == x0)));
    }

    #[test]
    fn picard_fixed_point_is_the_euler_scheme() {
        // On a grid with K steps the discrete map is exact after K iterations.
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let drivers = sample_ensemble(2, &grid, 3, 2).unwrap();
        let c = Coefficients::linear(0.5, 0.3);
        let x0 = SquareMatrix::identity(2);
        let res = picard_iterate(&c, &x0, &drivers, 7, WeightedNormSpec::new(4.0).unwrap()).unwrap();
        for (u, d) in res.last().iter().zip(&drivers) {
            let em = euler_maruyama(&c, &x0, d).unwrap();
            for (a, b) in u.iter().zip(&em.states) {
                assert!(close(a, b, 1e-13));
            }
        }
    }

    #[test]
    fn truncation_examples() {
        let c = Coefficients::new(|_, x| x.scale(2.0), |_, x| x.scale(0.5))
            .with_local(|r| Rate::constant(4.25 * r.max(1.0)));
        let tr = truncate_coeffs(&c, 1.0).unwrap();
        let inside = m2([[0.3, 0.4], [0.0, 0.0]]);
        assert_eq!(tr.drift(0.0, &inside), c.drift(0.0, &inside));
        let outside = m2([[1.2, 1.6], [0.0, 0.0]]); // norm 2
        assert!(close(&tr.drift(0.0, &outside), &c.drift(0.0, &outside.scale(0.5)), 1e-15));
        assert!(close(&tr.diffusion(0.0, &outside), &c.diffusion(0.0, &outside.scale(0.5)), 1e-15));
        assert_eq!(tr.drift(0.0, &SquareMatrix::zeros(2)), SquareMatrix::zeros(2));
        assert!((tr.kappa1.as_ref().unwrap().eval(0.0) - 17.0).abs() < 1e-15);
        assert!(truncate_coeffs(&c, 0.0).is_err());
    }

    #[test]
    fn truncated_lipschitz_rate_holds_on_random_pairs() {
        // A locally Lipschitz cubic drift: b(x) = ‖x‖² x.
        let c = Coefficients::new(|_, x| x.scale(x.hs_norm_sq()), |_, x| SquareMatrix::zeros(x.dim()))
            // On the ball of radius R, ‖b(x) − b(y)‖ ≤ 3R² ‖x − y‖.
            .with_local(|r| Rate::constant(9.0 * r.powi(4)));
        let radius = 1.5;
        let tr = truncate_coeffs(&c, radius).unwrap();
        let rate = tr.kappa1.clone().unwrap();
        let mut rng = SeedSpec::new(17, 0).rng();
        for _ in 0..2000 {
            let x = random_in_ball(2, 3.0 * radius, &mut rng);
            let y = random_in_ball(2, 3.0 * radius, &mut rng);
            let lhs = tr.drift(0.0, &x).try_sub(&tr.drift(0.0, &y)).unwrap().hs_norm_sq();
            assert!(lhs <= rate.eval(0.0) * x.try_sub(&y).unwrap().hs_norm_sq() + 1e-12);
        }
    }

    #[test]
    fn truncation_consistency_examples() {
        let x0 = SquareMatrix::identity(2).scale(0.5);
        let quiet = consistency_under_truncation(&Coefficients::zero(), &x0, 2.0, &driver(16, 1)).unwrap();
        assert!(quiet.agree);
        assert_eq!(quiet.exit_node, None);

        let mild = Coefficients::linear(0.1, 0.1);
        let r = consistency_under_truncation(&mild, &x0, 100.0, &driver(32, 2)).unwrap();
        assert!(r.agree && r.exit_node.is_none() && r.compared_nodes == 33);

        // Strong linear drift reaches radius 2 mid-path.
        let push = Coefficients::new(|_, x| x.scale(4.0), |_, x| x.scale(0.2));
        let r = consistency_under_truncation(&push, &x0, 2.0, &driver(64, 3)).unwrap();
        let exit = r.exit_node.expect("drift leaves the ball");
        assert!(exit > 0 && exit < 64);
        assert!(r.agree);
        assert!(consistency_under_truncation(&push, &x0, 0.5, &driver(8, 3)).is_err());
    }

    #[test]
    fn strong_order_examples() {
        let x0 = SquareMatrix::identity(2);
        let exact = Coefficients::constant(SquareMatrix::zeros(2), SquareMatrix::identity(2));
        let mut plan = Refinement {
            horizon: 1.0,
            base_steps: 4,
            levels: 3,
            paths: 20,
            master_seed: 1,
        };
        assert_eq!(strong_error_order(&exact, &x0, &plan).unwrap().order, None);
        plan.levels = 2;
        assert!(strong_error_order(&exact, &x0, &plan).is_err());
    }

    #[test]
    fn moment_bound_examples() {
        let x0 = m2([[1.0, -2.0], [0.5, 0.0]]);
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let (ens, _) = solve_ensemble(&Coefficients::zero(), &x0, &grid, 10, 1).unwrap();
        let chk = moment_bound_check(&ens, &x0, &Rate::constant(0.0), 1.0, 2).unwrap();
        assert_eq!(chk.lhs, x0.hs_norm_sq());
        assert!(chk.pass);

        let b = moment_bound(&SquareMatrix::zeros(2), &Rate::constant(1.0), 1.0, 2);
        assert!((b / 54f64.exp() - 1.0).abs() < 1e-12);

        let zero = SquareMatrix::zeros(2);
        let (ens, _) = solve_ensemble(&Coefficients::zero(), &zero, &grid, 10, 1).unwrap();
        let chk = monotone_moment_bound_check(&ens, &zero, &Rate::constant(0.0), &Rate::constant(0.0), 1.0).unwrap();
        assert_eq!((chk.lhs, chk.bound, chk.pass), (0.0, 1.0, true));

        let b = monotone_moment_bound(&SquareMatrix::identity(2), &Rate::constant(1.0), &Rate::constant(1.0), 1.0);
        assert!((b / (5.0 * 130f64.exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn condition_checks() {
        let zero = check_conditions(&Coefficients::zero(), 2, 500, 5.0, 1.0, 1).unwrap();
        assert!(zero.all_pass());
        assert_eq!(zero.entries.len(), 7);

        let lin = check_conditions(&Coefficients::linear(0.5, 0.3), 2, 10_000, 10.0, 1.0, 2).unwrap();
        assert!(lin.get("A1").unwrap().pass);
        assert!(lin.get("H2").unwrap().pass);
        assert!(lin.get("H2-implied").unwrap().pass);
        assert!(lin.all_pass(), "{lin:?}");

        // Understated Lipschitz rate is caught.
        let wrong = Coefficients::linear(0.5, 0.3).with_kappa1(Rate::constant(0.1));
        let rep = check_conditions(&wrong, 2, 1000, 10.0, 1.0, 3).unwrap();
        assert!(!rep.get("A1").unwrap().pass);
        assert!(rep.get("A1").unwrap().worst_margin < 0.0);

        let bare = Coefficients::new(|_, x| x.clone(), |_, x| x.clone());
        assert!(check_conditions(&bare, 2, 10, 1.0, 1.0, 1).unwrap().entries.is_empty());
    }
}
