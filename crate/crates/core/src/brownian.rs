//! Matrix Brownian motion `B_t = Σᵢⱼ B⁽ⁱʲ⁾_t eᵢⱼ` sampled on a time grid.
//!
//! Each of the n² entries is an independent scalar Brownian motion; there is
//! no cross-entry correlation and no matrix square root.
//!
//! # Reproducibility
//!
//! Path `k` of an ensemble with master seed `s` draws from a ChaCha8 stream
//! seeded with `s` and positioned on stream number `k`. Streams are
//! independent counters, so any path can be regenerated on its own, in any
//! order, on any thread. Gaussian variates come from `rand_distr`'s
//! `StandardNormal` (ziggurat). Variates are consumed step by step, entries
//! in row-major order within a step. This layout is fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matspace::SquareMatrix;
use crate::stats::MeanEstimate;

/// Relative tolerance used when matching nodes of two grids.
const NODE_MATCH_TOL: f64 = 1e-12;

/// Strictly increasing time nodes starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("a grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "first node must be 0, found {}",
                nodes[0]
            )));
        }
        for (k, w) in nodes.windows(2).enumerate() {
            if !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!("node {} is not finite", k + 1)));
            }
            if w[1] <= w[0] {
                return Err(Error::InvalidGrid(format!(
                    "nodes must be strictly increasing: t[{}] = {} not above t[{}] = {}",
                    k + 1,
                    w[1],
                    k,
                    w[0]
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// `steps` equal cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive and finite, found {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        let nodes = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("grid has nodes")
    }

    /// Length of cell `k`, i.e. `t[k+1] − t[k]`.
    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    fn matches(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= NODE_MATCH_TOL * self.horizon().max(1.0)
    }

    /// Index of the node equal to `t`, up to a relative tolerance of 1e-12.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = self.nodes.partition_point(|&x| x < t);
        [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .find(|&k| k < self.nodes.len() && self.matches(self.nodes[k], t))
    }

    /// Positions of this grid's nodes inside `fine`; errors if some node is
    /// not a node of `fine` or the horizons differ.
    pub fn positions_in(&self, fine: &TimeGrid) -> Result<Vec<usize>> {
        let positions = self
            .nodes
            .iter()
            .map(|&t| {
                fine.index_of(t).ok_or_else(|| {
                    Error::GridMismatch(format!("node {t} is not a node of the finer grid"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if *positions.last().expect("grid has nodes") != fine.steps() {
            return Err(Error::GridMismatch(format!(
                "horizon {} differs from {}",
                self.horizon(),
                fine.horizon()
            )));
        }
        Ok(positions)
    }

    pub fn is_subgrid_of(&self, fine: &TimeGrid) -> bool {
        self.positions_in(fine).is_ok()
    }

    /// Every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps()
            )));
        }
        Self::new(self.nodes.iter().step_by(factor).copied().collect())
    }

    /// All nodes multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.nodes.iter().map(|t| c * t).collect())
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(nodes: Vec<f64>) -> Result<Self> {
        Self::new(nodes)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.nodes
    }
}

/// Identifies one path of a seeded ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub path_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        Self {
            master_seed,
            path_index,
        }
    }

    /// The generator for this path. Depends only on `(master_seed, path_index)`.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.path_index);
        rng
    }
}

/// One realization of B on a grid. `values[0]` is the zero matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixBrownianPath {
    grid: TimeGrid,
    values: Vec<SquareMatrix>,
}

impl MatrixBrownianPath {
    /// Wraps externally produced values, checking the path invariants.
    pub fn new(grid: TimeGrid, values: Vec<SquareMatrix>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} grid nodes",
                values.len(),
                grid.len()
            )));
        }
        let n = values[0].dim();
        if let Some(v) = values.iter().find(|v| v.dim() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: v.dim(),
            });
        }
        if !values[0].is_zero() {
            return Err(Error::InvalidArgument(
                "a Brownian path must start at the zero matrix".into(),
            ));
        }
        for (k, v) in values.iter().enumerate() {
            if v.first_non_finite().is_some() {
                return Err(Error::BlowUp { node: k });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[SquareMatrix] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].dim()
    }

    pub fn terminal(&self) -> &SquareMatrix {
        self.values.last().expect("path has values")
    }

    /// `values[k+1] − values[k]` for every cell.
    pub fn increments(&self) -> Vec<SquareMatrix> {
        self.values.windows(2).map(|w| &w[1] - &w[0]).collect()
    }

    /// The same realization observed only at the nodes of `coarse`.
    pub fn restrict(&self, coarse: &TimeGrid) -> Result<Self> {
        let positions = coarse.positions_in(&self.grid)?;
        Ok(Self {
            grid: coarse.clone(),
            values: positions.iter().map(|&k| self.values[k].clone()).collect(),
        })
    }

    /// Information available at node `k`: times and values at nodes `0..=k`.
    pub fn prefix(&self, k: usize) -> PathPrefix<'_> {
        PathPrefix {
            times: &self.grid.nodes[..=k],
            values: &self.values[..=k],
        }
    }
}

/// A read-only view of a path up to and including one node. Later nodes are
/// not reachable through this type, which is what makes evaluators built on
/// it non-anticipating.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    times: &'a [f64],
    values: &'a [SquareMatrix],
}

impl<'a> PathPrefix<'a> {
    pub fn index(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self) -> f64 {
        self.times[self.index()]
    }

    /// `B` at the current node.
    pub fn current(&self) -> &'a SquareMatrix {
        &self.values[self.index()]
    }

    /// `B` at an earlier node `m ≤ index()`; `None` for later nodes.
    pub fn value(&self, m: usize) -> Option<&'a SquareMatrix> {
        self.values.get(m)
    }

    pub fn times(&self) -> &'a [f64] {
        self.times
    }

    pub fn values(&self) -> &'a [SquareMatrix] {
        self.values
    }
}

pub fn sample_path(n: usize, grid: &TimeGrid, seed: SeedSpec) -> Result<MatrixBrownianPath> {
    if n == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let mut rng = seed.rng();
    let mut values = Vec::with_capacity(grid.len());
    let mut current = vec![0.0; n * n];
    values.push(SquareMatrix::zeros(n));
    for k in 0..grid.steps() {
        let sd = grid.dt(k).sqrt();
        for entry in current.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *entry += sd * z;
        }
        values.push(SquareMatrix::from_vec(n, current.clone())?);
    }
    Ok(MatrixBrownianPath {
        grid: grid.clone(),
        values,
    })
}

/// Paths `0..paths` of the ensemble with the given master seed, sampled in
/// parallel and returned in index order.
pub fn sample_ensemble(
    n: usize,
    grid: &TimeGrid,
    paths: usize,
    master_seed: u64,
) -> Result<Vec<MatrixBrownianPath>> {
    (0..paths as u64)
        .into_par_iter()
        .map(|i| sample_path(n, grid, SeedSpec::new(master_seed, i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceEstimate {
    pub estimate: f64,
    pub target: f64,
    pub stderr: f64,
}

impl CovarianceEstimate {
    pub fn within(&self, k: f64) -> bool {
        (self.estimate - self.target).abs() <= k * self.stderr
    }
}

/// Monte Carlo estimate of `E[⟨B_t, u⟩⟨B_t, v⟩]` against `t⟨u, v⟩`.
pub fn empirical_covariance(
    n: usize,
    t: f64,
    u: &SquareMatrix,
    v: &SquareMatrix,
    paths: usize,
    master_seed: u64,
) -> Result<CovarianceEstimate> {
    if paths < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least two paths are needed for a standard error, got {paths}"
        )));
    }
    if u.dim() != n || v.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if u.dim() != n { u.dim() } else { v.dim() },
        });
    }
    let grid = TimeGrid::uniform(t, 1)?;
    let samples = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = sample_path(n, &grid, SeedSpec::new(master_seed, i))?;
            let b = path.terminal();
            Ok(b.hs_inner(u)? * b.hs_inner(v)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let est = MeanEstimate::from_samples(&samples);
    Ok(CovarianceEstimate {
        estimate: est.mean,
        target: t * u.hs_inner(v)?,
        stderr: est.stderr,
    })
}

/// Column names for the entries of an n×n matrix in row-major order:
/// `e11, e12, …` (one-based). From n = 10 on the indices are separated by
/// an underscore (`e10_1`) to stay unambiguous.
pub fn entry_columns(n: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(n * n);
    for i in 1..=n {
        for j in 1..=n {
            if n < 10 {
                cols.push(format!("e{i}{j}"));
            } else {
                cols.push(format!("e{i}_{j}"));
            }
        }
    }
    cols
}

pub(crate) fn push_row(out: &mut String, lead: &[String], t: f64, m: &SquareMatrix) {
    for field in lead {
        out.push_str(field);
        out.push(',');
    }
    out.push_str(&format!("{t:?}"));
    for v in m.as_slice() {
        out.push(',');
        out.push_str(&format!("{v:?}"));
    }
    out.push('\n');
}

/// Path dump: header `t,e11,…,enn`, one row per node.
pub fn path_to_csv(path: &MatrixBrownianPath) -> String {
    let mut out = format!("t,{}\n", entry_columns(path.dim()).join(","));
    for (t, v) in path.grid.nodes.iter().zip(&path.values) {
        push_row(&mut out, &[], *t, v);
    }
    out
}

/// Ensemble dump with a leading `path_id` column.
pub fn ensemble_to_csv(paths: &[MatrixBrownianPath]) -> String {
    let Some(first) = paths.first() else {
        return String::new();
    };
    let mut out = format!("path_id,t,{}\n", entry_columns(first.dim()).join(","));
    for (id, path) in paths.iter().enumerate() {
        let lead = [id.to_string()];
        for (t, v) in path.grid.nodes.iter().zip(&path.values) {
            push_row(&mut out, &lead, *t, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::correlation;

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.0, f64::NAN]).is_err());
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::uniform(0.0, 4).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        let g = TimeGrid::uniform(2.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.horizon(), 2.0);
        assert_eq!(g.steps(), 4);
    }

    #[test]
    fn subgrids() {
        let fine = TimeGrid::uniform(1.0, 12).unwrap();
        let coarse = fine.coarsen(3).unwrap();
        assert_eq!(coarse.steps(), 4);
        assert!(coarse.is_subgrid_of(&fine));
        assert!(TimeGrid::uniform(1.0, 4).unwrap().is_subgrid_of(&fine));
        assert!(!TimeGrid::uniform(1.0, 5).unwrap().is_subgrid_of(&fine));
        assert!(!TimeGrid::uniform(0.5, 2).unwrap().is_subgrid_of(&fine));
        assert!(fine.coarsen(5).is_err());
        assert_eq!(fine.index_of(0.25), Some(3));
        assert_eq!(fine.index_of(0.26), None);
    }

    #[test]
    fn path_starts_at_zero_and_is_deterministic() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let a = sample_path(2, &grid, SeedSpec::new(7, 3)).unwrap();
        let b = sample_path(2, &grid, SeedSpec::new(7, 3)).unwrap();
        let c = sample_path(2, &grid, SeedSpec::new(7, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.values()[0].is_zero());
        assert_eq!(a.values().len(), 9);
    }

    #[test]
    fn ensemble_paths_match_individual_sampling() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let ens = sample_ensemble(2, &grid, 5, 99).unwrap();
        for (i, p) in ens.iter().enumerate() {
            assert_eq!(*p, sample_path(2, &grid, SeedSpec::new(99, i as u64)).unwrap());
        }
    }

    #[test]
    fn increments_examples() {
        let grid = TimeGrid::uniform(1.0, 3).unwrap();
        let zero = MatrixBrownianPath::new(grid.clone(), vec![SquareMatrix::zeros(2); 4]).unwrap();
        assert!(zero.increments().iter().all(SquareMatrix::is_zero));

        let two = sample_path(2, &TimeGrid::uniform(1.0, 1).unwrap(), SeedSpec::new(1, 0)).unwrap();
        assert_eq!(two.increments(), vec![two.values()[1].clone()]);

        let p = sample_path(3, &grid, SeedSpec::new(1, 1)).unwrap();
        let mut sum = SquareMatrix::zeros(3);
        for d in p.increments() {
            sum = &sum + &d;
        }
        let diff = &sum - p.terminal();
        assert!(diff.hs_norm() < 1e-14);
    }

    #[test]
    fn path_constructor_checks_invariants() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let one = SquareMatrix::identity(2);
        assert!(MatrixBrownianPath::new(grid.clone(), vec![one.clone(), one.clone()]).is_err());
        assert!(MatrixBrownianPath::new(grid, vec![SquareMatrix::zeros(2)]).is_err());
    }

    #[test]
    fn restrict_keeps_the_realization() {
        let fine = TimeGrid::uniform(1.0, 8).unwrap();
        let p = sample_path(2, &fine, SeedSpec::new(5, 0)).unwrap();
        let coarse = fine.coarsen(4).unwrap();
        let r = p.restrict(&coarse).unwrap();
        assert_eq!(r.values()[1], p.values()[4]);
        assert_eq!(r.terminal(), p.terminal());
    }

    #[test]
    fn prefix_hides_future_nodes() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let p = sample_path(2, &grid, SeedSpec::new(5, 0)).unwrap();
        let pre = p.prefix(2);
        assert_eq!(pre.index(), 2);
        assert_eq!(pre.time(), 0.5);
        assert_eq!(pre.current(), &p.values()[2]);
        assert!(pre.value(3).is_none());
    }

    #[test]
    fn entry_moments_match_gaussian() {
        let m = 20_000;
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let ens = sample_ensemble(2, &grid, m, 2024).unwrap();
        for e in 0..4 {
            let xs: Vec<f64> = ens.iter().map(|p| p.terminal().as_slice()[e]).collect();
            let est = MeanEstimate::from_samples(&xs);
            assert!(est.mean.abs() <= 3.0 / (m as f64).sqrt(), "entry {e} mean {}", est.mean);
            let var = est.std_dev * est.std_dev;
            assert!((var - 1.0).abs() <= 0.05, "entry {e} variance {var}");
        }
    }

    #[test]
    fn increments_are_uncorrelated_across_steps() {
        let m = 20_000;
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let ens = sample_ensemble(2, &grid, m, 8).unwrap();
        let u = SquareMatrix::from_rows(&[[0.3, -1.0], [0.5, 2.0]]).unwrap();
        let proj: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                ens.iter()
                    .map(|p| p.increments()[k].hs_inner(&u).unwrap())
                    .collect()
            })
            .collect();
        for k in 0..4 {
            for j in (k + 1)..4 {
                let r = correlation(&proj[k], &proj[j]);
                assert!(r.abs() <= 3.0 / (m as f64).sqrt(), "corr({k},{j}) = {r}");
            }
        }
    }

    #[test]
    fn variance_scales_with_grid() {
        let m = 20_000;
        let c = 3.0;
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let scaled = grid.scaled(c).unwrap();
        let var_of = |g: &TimeGrid| {
            let ens = sample_ensemble(2, g, m, 77).unwrap();
            let xs: Vec<f64> = ens.iter().map(|p| p.increments()[0].as_slice()[1]).collect();
            MeanEstimate::from_samples(&xs).std_dev.powi(2)
        };
        let ratio = var_of(&scaled) / var_of(&grid);
        assert!((ratio / c - 1.0).abs() <= 0.05, "ratio {ratio}");
    }

    #[test]
    fn covariance_examples() {
        let e12 = SquareMatrix::basis(2, 0, 1).unwrap();
        let e21 = SquareMatrix::basis(2, 1, 0).unwrap();
        let orth = empirical_covariance(2, 1.0, &e12, &e21, 20_000, 1).unwrap();
        assert_eq!(orth.target, 0.0);
        assert!(orth.within(3.0), "{orth:?}");

        let e11 = SquareMatrix::basis(2, 0, 0).unwrap();
        let diag = empirical_covariance(2, 2.0, &e11, &e11, 20_000, 2).unwrap();
        assert_eq!(diag.target, 2.0);
        assert!(diag.within(3.0), "{diag:?}");

        let i2 = SquareMatrix::identity(2);
        let iden = empirical_covariance(2, 1.0, &i2, &i2, 20_000, 3).unwrap();
        assert_eq!(iden.target, 2.0);
        assert!(iden.within(3.0), "{iden:?}");

        assert!(empirical_covariance(2, 1.0, &i2, &i2, 1, 3).is_err());
    }

    #[test]
    fn csv_layout() {
        assert_eq!(entry_columns(2), vec!["e11", "e12", "e21", "e22"]);
        assert_eq!(entry_columns(10)[10], "e2_1");
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let p = sample_path(2, &grid, SeedSpec::new(1, 0)).unwrap();
        let csv = path_to_csv(&p);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,e11,e12,e21,e22");
        assert_eq!(lines[1], "0.0,0.0,0.0,0.0,0.0");
        assert_eq!(lines.len(), 4);
        let ens = ensemble_to_csv(&[p.clone(), p]);
        assert!(ens.starts_with("path_id,t,e11"));
        assert_eq!(ens.lines().count(), 7);
    }
}
