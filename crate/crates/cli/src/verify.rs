//! `matsde verify <identity>`.

use matsde::brownian::{empirical_covariance, sample_ensemble, sample_path, SeedSpec, TimeGrid};
use matsde::calculus::{ito_residual_order, taylor_remainder, verify_ito_formula};
use matsde::integrator::{verify_isometry, verify_qv_martingale, Constant};
use matsde::sde::{
    check_conditions, consistency_under_truncation, ensemble_difference, euler_maruyama, mean_square_sup_norm,
    monotone_moment_bound_check, moment_bound_check, picard_iterate, smallest_contracting_lambda, solve_ensemble,
    strong_error_order, Refinement,
};
use matsde::stats::slope;
use matsde::SquareMatrix;
use rand::Rng;
use serde_json::json;

use crate::report::{Report, Sink};
use crate::{CliError, ExperimentConfig, Identity, Status};

const TAYLOR_PROBES: usize = 10;
const TAYLOR_STEPS: [f64; 3] = [1e-1, 1e-2, 1e-3];
const COVARIANCE_PAIRS: u64 = 10;
const ROUNDOFF_MULTIPLE: f64 = 1e4;

pub fn run(identity: Identity, cfg: &ExperimentConfig, sink: &Sink) -> Result<Status, CliError> {
    let report = Report::new("verify", identity.name(), cfg);
    let report = match identity {
        Identity::Covariance => covariance(cfg, report)?,
        Identity::Isometry => isometry(cfg, report)?,
        Identity::QvMartingale => qv_martingale(cfg, report)?,
        Identity::ItoFormula => ito_formula(cfg, report)?,
        Identity::Taylor => taylor(cfg, report)?,
        Identity::MomentBound => moment_bound(cfg, report)?,
        Identity::MonotoneBound => monotone_bound(cfg, report)?,
        Identity::PicardContraction => picard(cfg, report)?,
        Identity::TruncationConsistency => truncation(cfg, report)?,
        Identity::StrongOrder => strong_order(cfg, report)?,
        Identity::Conditions => conditions(cfg, report)?,
    };
    sink.report(&identity.name(), &report)?;
    Ok(Status::from_pass(report.pass))
}

fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid, CliError> {
    Ok(TimeGrid::uniform(cfg.horizon, cfg.steps)?)
}

fn random_matrix(n: usize, rng: &mut impl Rng) -> Result<SquareMatrix, CliError> {
    Ok(SquareMatrix::from_fn(n, |_, _| rng.random_range(-1.0..1.0))?)
}

fn covariance<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let k = cfg.tolerances.stderr_multiple;
    let mut rng = SeedSpec::new(cfg.seed, u64::MAX).rng();
    let mut pairs = Vec::new();
    let mut hits = 0;
    let mut worst = None::<(f64, f64, f64, f64)>;
    for pair in 0..COVARIANCE_PAIRS {
        let u = random_matrix(cfg.dim, &mut rng)?;
        let v = random_matrix(cfg.dim, &mut rng)?;
        let est = empirical_covariance(cfg.dim, cfg.horizon, &u, &v, cfg.paths, cfg.seed.wrapping_add(pair))?;
        hits += est.within(k) as usize;
        let z = (est.estimate - est.target).abs() / est.stderr;
        if worst.is_none_or(|w| z > w.0) {
            worst = Some((z, est.estimate, est.target, est.stderr));
        }
        pairs.push(json!({"estimate": est.estimate, "target": est.target, "stderr": est.stderr}));
    }
    let (_, lhs, rhs, se) = worst.expect("at least one pair");
    let rate = hits as f64 / COVARIANCE_PAIRS as f64;
    Ok(report
        .compare(lhs, rhs, Some(se))
        .pass(rate >= cfg.tolerances.covariance_hit_rate)
        .details(json!({"within": hits, "pairs": pairs})))
}

fn isometry<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let chk = verify_isometry(
        &Constant(SquareMatrix::identity(cfg.dim)),
        cfg.dim,
        &grid(cfg)?,
        cfg.paths,
        cfg.seed,
    )?;
    let pass = chk.within(cfg.tolerances.stderr_multiple) && chk.factor == cfg.dim as f64;
    Ok(report
        .compare(chk.lhs, chk.rhs, Some(chk.stderr))
        .pass(pass)
        .details(json!({"factor": chk.factor, "integrand_energy": chk.integrand_energy})))
}

fn qv_martingale<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let grid = grid(cfg)?;
    let n = cfg.dim;
    let v = Constant(SquareMatrix::from_fn(n, |i, j| if j <= i { 1.0 } else { 0.0 })?);
    let mut rng = SeedSpec::new(cfg.seed, u64::MAX).rng();
    let a = random_matrix(n, &mut rng)?;
    let b = random_matrix(n, &mut rng)?;
    let mut checkpoints: Vec<f64> = [cfg.steps / 4, cfg.steps / 2, cfg.steps]
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| grid.nodes()[k])
        .collect();
    checkpoints.dedup();
    let res = verify_qv_martingale(&v, &a, &b, &grid, cfg.paths, cfg.seed, &checkpoints)?;
    let k = cfg.tolerances.stderr_multiple;
    let last = res.last().expect("terminal checkpoint");
    Ok(report
        .compare(last.residual, 0.0, Some(last.stderr))
        .pass(res.iter().all(|r| r.within(k)))
        .details(json!({"checkpoints": res})))
}

fn ito_formula<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let f = cfg.field(&cfg.fields.ito)?;
    let c = cfg.coefficients();
    let x0 = cfg.x0();
    let tol = &cfg.tolerances;
    let chk = verify_ito_formula(&f, &c, &x0, &grid(cfg)?, cfg.paths, cfg.seed)?;
    let terminal = *chk.residual.last().expect("nodes");
    let martingale = chk.martingale_within(tol.stderr_multiple);
    // With drift the residual has an O(h) mean, so a biased residual still
    // passes when it vanishes at the expected rate under refinement.
    let order = ito_residual_order(
        &f,
        &c,
        &x0,
        &Refinement {
            horizon: cfg.horizon,
            base_steps: cfg.strong.base_steps,
            levels: cfg.strong.levels,
            paths: cfg.paths,
            master_seed: cfg.seed,
        },
    )?;
    let exact = order.rms.iter().all(|&r| r <= tol.exact_remainder);
    let converging = exact || order.order >= tol.ito_residual_order;
    Ok(report
        .compare(terminal.mean, 0.0, Some(terminal.stderr))
        .pass(martingale || converging)
        .details(json!({
            "field": f.name(),
            "martingale": martingale,
            "increment": chk.increment,
            "rms_terminal_residual": chk.rms_terminal_residual,
            "refinement": {
                "step_sizes": order.step_sizes,
                "rms": order.rms,
                "order": (!exact).then_some(order.order),
            },
        })))
}

fn taylor<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let f = cfg.field(&cfg.fields.taylor)?;
    let tol = &cfg.tolerances;
    let mut rng = SeedSpec::new(cfg.seed, 0).rng();
    let log_h: Vec<f64> = TAYLOR_STEPS.iter().map(|h| h.ln()).collect();
    let mut min_slope = f64::INFINITY;
    let mut max_remainder: f64 = 0.0;
    let mut roundoff_probes = 0;
    for _ in 0..TAYLOR_PROBES {
        let y = random_matrix(cfg.dim, &mut rng)?.scale(2.0);
        let d = random_matrix(cfg.dim, &mut rng)?;
        let rem = TAYLOR_STEPS
            .iter()
            .map(|&h| Ok(taylor_remainder(&f, &y, &y.try_add(&d.scale(h))?, 0.0)?))
            .collect::<Result<Vec<f64>, CliError>>()?;
        let worst = rem.iter().cloned().fold(0.0, f64::max);
        max_remainder = max_remainder.max(worst);
        // Remainders near the roundoff floor of V(Y) carry no slope.
        let floor = ROUNDOFF_MULTIPLE * f64::EPSILON * (1.0 + f.value(0.0, &y).abs());
        let (lx, ly): (Vec<f64>, Vec<f64>) = log_h
            .iter()
            .zip(&rem)
            .filter(|(_, &r)| r > floor.max(tol.exact_remainder))
            .map(|(&h, &r)| (h, r.ln()))
            .unzip();
        if lx.len() < 2 {
            roundoff_probes += 1;
        } else {
            min_slope = min_slope.min(slope(&lx, &ly));
        }
    }
    // No probe above roundoff means a quadratic field: the remainder vanishes.
    let pass = roundoff_probes == TAYLOR_PROBES || min_slope >= tol.taylor_slope;
    let mut report = report.pass(pass);
    if min_slope.is_finite() {
        report = report.compare(min_slope, tol.taylor_slope, None);
    }
    Ok(report.details(json!({
        "field": f.name(),
        "steps": TAYLOR_STEPS,
        "roundoff_probes": roundoff_probes,
        "max_remainder": max_remainder,
    })))
}

fn solved(
    cfg: &ExperimentConfig,
) -> Result<(matsde::sde::Coefficients, SquareMatrix, matsde::sde::SolutionEnsemble), CliError> {
    let c = cfg.coefficients();
    let x0 = cfg.x0();
    let (ens, _) = solve_ensemble(&c, &x0, &grid(cfg)?, cfg.paths, cfg.seed)?;
    if ens.paths.is_empty() {
        return Err(CliError::Runtime("every path blew up".into()));
    }
    Ok((c, x0, ens))
}

fn moment_bound<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let (c, x0, ens) = solved(cfg)?;
    let chk = moment_bound_check(&ens, &x0, &c.growth_rate()?, cfg.horizon, cfg.dim)?;
    Ok(report
        .compare(chk.lhs, chk.bound, None)
        .pass(chk.pass && ens.aborted.is_empty())
        .details(json!({"aborted": ens.aborted.len(), "margin": chk.bound / chk.lhs})))
}

fn monotone_bound<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let (c, x0, ens) = solved(cfg)?;
    let kappa = c.kappa.clone().ok_or(matsde::Error::UndeclaredRate("kappa"))?;
    let kappa0 = c.kappa0.clone().ok_or(matsde::Error::UndeclaredRate("kappa0"))?;
    let chk = monotone_moment_bound_check(&ens, &x0, &kappa, &kappa0, cfg.horizon)?;
    Ok(report
        .compare(chk.lhs, chk.bound, None)
        .pass(chk.pass && ens.aborted.is_empty())
        .details(json!({"aborted": ens.aborted.len(), "margin": chk.bound / chk.lhs})))
}

fn picard<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let c = cfg.coefficients();
    let x0 = cfg.x0();
    let grid = grid(cfg)?;
    let (spec, alpha) = smallest_contracting_lambda(&c, cfg.horizon, cfg.dim)?;
    let drivers = sample_ensemble(cfg.dim, &grid, cfg.paths, cfg.seed)?;
    let res = picard_iterate(&c, &x0, &drivers, cfg.picard.iterations, spec)?;
    let em = drivers
        .iter()
        .map(|d| Ok(euler_maruyama(&c, &x0, d)?.states))
        .collect::<Result<Vec<_>, CliError>>()?;
    let gap = mean_square_sup_norm(&grid, &ensemble_difference(res.last(), &em)?);
    // A zero successive norm means the fixed point was hit exactly.
    let ratios: Vec<f64> = res
        .successive_norms
        .windows(2)
        .take_while(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(report
        .compare(max_ratio, alpha, None)
        .pass(max_ratio <= alpha)
        .details(json!({
            "lambda": spec.lambda(),
            "successive_norms": res.successive_norms,
            "ratios": ratios,
            "distance_to_euler_maruyama": gap,
        })))
}

fn truncation<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let c = cfg.coefficients();
    let x0 = cfg.x0();
    let grid = grid(cfg)?;
    let radius = cfg.truncation.radius;
    let (mut agree, mut exits) = (0, 0);
    let mut disagreeing = Vec::new();
    for s in 0..cfg.truncation.seeds as u64 {
        let d = sample_path(cfg.dim, &grid, SeedSpec::new(cfg.seed, s))?;
        let r = consistency_under_truncation(&c, &x0, radius, &d)?;
        if r.agree {
            agree += 1;
        } else {
            disagreeing.push(s);
        }
        exits += r.exit_node.is_some() as usize;
    }
    Ok(report
        .compare(agree as f64, cfg.truncation.seeds as f64, None)
        .pass(disagreeing.is_empty())
        .details(json!({"radius": radius, "exits": exits, "disagreeing_streams": disagreeing})))
}

fn strong_order<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let plan = Refinement {
        horizon: cfg.horizon,
        base_steps: cfg.strong.base_steps,
        levels: cfg.strong.levels,
        paths: cfg.paths,
        master_seed: cfg.seed,
    };
    let res = strong_error_order(&cfg.coefficients(), &cfg.x0(), &plan)?;
    let [lo, hi] = cfg.tolerances.strong_order;
    // No order means the scheme reproduced the reference at every level.
    let pass = res.order.is_none_or(|p| (lo..=hi).contains(&p));
    let mut report = report.pass(pass);
    if let Some(p) = res.order {
        report = report.compare(p, 0.5 * (lo + hi), None);
    }
    Ok(report.details(json!({
        "step_sizes": res.step_sizes,
        "errors": res.errors,
        "reference_steps": res.reference_steps,
        "accepted": [lo, hi],
    })))
}

fn conditions<'a>(cfg: &'a ExperimentConfig, report: Report<'a>) -> Result<Report<'a>, CliError> {
    let rep = check_conditions(
        &cfg.coefficients(),
        cfg.dim,
        cfg.conditions.samples,
        cfg.conditions.radius,
        cfg.horizon,
        cfg.seed,
    )?;
    Ok(report.pass(rep.all_pass()).details(json!({"conditions": rep.entries})))
}
