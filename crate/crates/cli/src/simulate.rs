//! `matsde simulate`: Euler–Maruyama ensemble of the configured SDE.

use matsde::brownian::TimeGrid;
use matsde::sde::solve_ensemble;
use matsde::stats::MeanEstimate;
use matsde::SquareMatrix;
use serde_json::json;

use crate::report::{Report, Sink};
use crate::{CliError, ExperimentConfig, Status};

pub const ENSEMBLE_FILE: &str = "ensemble.csv";

pub fn run(cfg: &ExperimentConfig, sink: &Sink) -> Result<Status, CliError> {
    let grid = TimeGrid::uniform(cfg.horizon, cfg.steps)?;
    let x0 = cfg.x0();
    let (ens, ids) = solve_ensemble(&cfg.coefficients(), &x0, &grid, cfg.paths, cfg.seed)?;
    sink.file(ENSEMBLE_FILE, &ens.to_csv(&ids))?;

    let terminals: Vec<&SquareMatrix> = ens.paths.iter().map(|p| p.terminal()).collect();
    let norms: Vec<f64> = terminals.iter().map(|x| x.hs_norm()).collect();
    let norms_sq: Vec<f64> = terminals.iter().map(|x| x.hs_norm_sq()).collect();
    let entry = |i: usize, j: usize| MeanEstimate::from_samples(&terminals.iter().map(|x| x[(i, j)]).collect::<Vec<_>>());
    let n = cfg.dim;
    let (mut mean, mut stderr) = (SquareMatrix::zeros(n), SquareMatrix::zeros(n));
    for i in 0..n {
        for j in 0..n {
            let e = entry(i, j);
            mean.set(i, j, e.mean)?;
            stderr.set(i, j, e.stderr)?;
        }
    }
    let norm = MeanEstimate::from_samples(&norms);
    let all_aborted = ens.paths.is_empty();
    let report = Report::new("simulate", "euler-maruyama", cfg)
        .pass(!all_aborted)
        .details(json!({
            "solved": ens.paths.len(),
            "aborted": ens.aborted.len(),
            "blow_ups": ens.aborted.iter().map(|(id, node)| json!({"path_id": id, "node": node})).collect::<Vec<_>>(),
            "terminal_norm": {
                "mean": norm.mean,
                "variance": norm.std_dev * norm.std_dev,
                "stderr": norm.stderr,
            },
            "terminal_norm_sq": MeanEstimate::from_samples(&norms_sq),
            "terminal_mean": (!all_aborted).then_some(mean),
            "terminal_stderr": (!all_aborted).then_some(stderr),
            "ensemble_file": ENSEMBLE_FILE,
        }));
    sink.report("simulate", &report)?;
    if all_aborted {
        return Err(CliError::Runtime(format!("all {} paths blew up", cfg.paths)));
    }
    Ok(Status::Pass)
}
