//! `matsde fx ...`: ingest, estimate, simulate and combine quote series.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Subcommand, ValueEnum};
use matsde::brownian::TimeGrid;
use matsde::fxmarket::{
    combine_matrices, ensemble_to_csv, estimate_coefficients, simulate_market, CombineMode, DayCount, FxFamily,
    FxModelSpec, RateSeries,
};
use serde_json::json;

use crate::report::{Report, Sink};
use crate::{CliError, ExperimentConfig, Status};

pub const SERIES_FILE: &str = "series.csv";
pub const MODEL_FILE: &str = "model.json";
pub const FX_ENSEMBLE_FILE: &str = "fx_ensemble.csv";
pub const COMBINED_FILE: &str = "combined.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    EntrywiseGeometric,
    AdditiveOu,
}

impl From<FamilyArg> for FxFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::EntrywiseGeometric => FxFamily::EntrywiseGeometric,
            FamilyArg::AdditiveOu => FxFamily::AdditiveOu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DayCountArg {
    Act365,
    Act360,
}

impl From<DayCountArg> for DayCount {
    fn from(d: DayCountArg) -> Self {
        match d {
            DayCountArg::Act365 => DayCount::Act365,
            DayCountArg::Act360 => DayCount::Act360,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    BuyThenSell,
    SellThenBuy,
}

impl From<ModeArg> for CombineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::BuyThenSell => CombineMode::BuyThenSell,
            ModeArg::SellThenBuy => CombineMode::SellThenBuy,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum FxCommand {
    /// Validate a quote CSV and write it back in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Fit model coefficients to a quote series.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "entrywise-geometric")]
        family: FamilyArg,
        #[arg(long, value_enum, default_value = "act365")]
        day_count: DayCountArg,
    },
    /// Simulate series from a model, starting at the last date of a series.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "act365")]
        day_count: DayCountArg,
    },
    /// Mixed-date matrix from two dates of a series.
    Combine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        from: NaiveDate,
        #[arg(long)]
        to: NaiveDate,
        #[arg(long, value_enum, default_value = "buy-then-sell")]
        mode: ModeArg,
    },
}

fn existing(path: &Path) -> Result<&Path, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn load_series(path: &Path) -> Result<RateSeries, CliError> {
    Ok(RateSeries::ingest_csv(existing(path)?)?)
}

fn value_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

pub fn run(cmd: &FxCommand, cfg: &ExperimentConfig, sink: &Sink) -> Result<Status, CliError> {
    match cmd {
        FxCommand::Ingest { input } => ingest(input, cfg, sink),
        FxCommand::Estimate {
            input,
            family,
            day_count,
        } => estimate(input, *family, *day_count, cfg, sink),
        FxCommand::Simulate {
            model,
            input,
            day_count,
        } => simulate(model, input, *day_count, cfg, sink),
        FxCommand::Combine { input, from, to, mode } => combine(input, *from, *to, *mode, cfg, sink),
    }
}

fn ingest(input: &Path, cfg: &ExperimentConfig, sink: &Sink) -> Result<Status, CliError> {
    let series = load_series(input)?;
    sink.file(SERIES_FILE, &series.to_csv())?;
    let codes = series.currencies();
    let warnings: Vec<_> = series
        .warnings()
        .into_iter()
        .map(|(date, w)| {
            json!({
                "date": date.to_string(),
                "base": codes[w.base],
                "quote": codes[w.quote],
                "bid": w.bid,
                "ask": w.ask,
            })
        })
        .collect();
    let entries = series.entries();
    let report = Report::new("fx-ingest", "ingest", cfg).details(json!({
        "n": series.dim(),
        "dates": series.len(),
        "currencies": codes,
        "first": entries.first().map(|e| e.date.to_string()),
        "last": entries.last().map(|e| e.date.to_string()),
        "warnings": warnings,
        "series_file": SERIES_FILE,
    }));
    sink.report("fx-ingest", &report)?;
    Ok(Status::Pass)
}

fn estimate(
    input: &Path,
    family: FamilyArg,
    day_count: DayCountArg,
    cfg: &ExperimentConfig,
    sink: &Sink,
) -> Result<Status, CliError> {
    let series = load_series(input)?;
    let spec = estimate_coefficients(&series, family.into(), day_count.into())?;
    sink.file(MODEL_FILE, &format!("{}\n", spec.to_json()))?;
    let report = Report::new("fx-estimate", value_name(family), cfg).details(json!({
        "n": series.dim(),
        "dates": series.len(),
        "day_count": value_name(day_count),
        "model": spec,
        "model_file": MODEL_FILE,
    }));
    sink.report("fx-estimate", &report)?;
    Ok(Status::Pass)
}

fn simulate(
    model: &Path,
    input: &Path,
    day_count: DayCountArg,
    cfg: &ExperimentConfig,
    sink: &Sink,
) -> Result<Status, CliError> {
    let text = std::fs::read_to_string(existing(model)?)?;
    let spec = FxModelSpec::from_json(&text)?;
    let series = load_series(input)?;
    let start = series
        .entries()
        .last()
        .ok_or_else(|| CliError::Runtime("input series is empty".into()))?;
    let grid = TimeGrid::uniform(cfg.horizon, cfg.steps)?;
    let sims = simulate_market(
        &spec,
        start,
        series.currencies(),
        &grid,
        cfg.paths,
        cfg.seed,
        day_count.into(),
    )?;
    sink.file(FX_ENSEMBLE_FILE, &ensemble_to_csv(&sims))?;
    let report = Report::new("fx-simulate", value_name(FamilyArg::from_family(spec.family)), cfg).details(json!({
        "n": spec.dim(),
        "start": start.date.to_string(),
        "end": sims.first().and_then(|s| s.entries().last()).map(|e| e.date.to_string()),
        "series": sims.len(),
        "warnings": sims.iter().map(|s| s.warnings().len()).sum::<usize>(),
        "ensemble_file": FX_ENSEMBLE_FILE,
    }));
    sink.report("fx-simulate", &report)?;
    Ok(Status::Pass)
}

impl FamilyArg {
    fn from_family(f: FxFamily) -> Self {
        match f {
            FxFamily::EntrywiseGeometric => FamilyArg::EntrywiseGeometric,
            FxFamily::AdditiveOu => FamilyArg::AdditiveOu,
        }
    }
}

fn combine(
    input: &Path,
    from: NaiveDate,
    to: NaiveDate,
    mode: ModeArg,
    cfg: &ExperimentConfig,
    sink: &Sink,
) -> Result<Status, CliError> {
    if from >= to {
        return Err(CliError::Usage(format!("--from {from} must be before --to {to}")));
    }
    let series = load_series(input)?;
    let lookup = |d: NaiveDate| {
        series
            .get(d)
            .ok_or_else(|| CliError::Usage(format!("date {d} is not in {}", input.display())))
    };
    let (earlier, later) = (lookup(from)?, lookup(to)?);
    let combined = combine_matrices(earlier, later, mode.into())?;
    sink.file(COMBINED_FILE, &combined.rates().to_csv())?;
    let report = Report::new("fx-combine", value_name(mode), cfg).details(json!({
        "from": from.to_string(),
        "to": to.to_string(),
        "currencies": series.currencies(),
        "rates": combined.rates(),
        "combined_file": COMBINED_FILE,
    }));
    sink.report("fx-combine", &report)?;
    Ok(Status::Pass)
}
