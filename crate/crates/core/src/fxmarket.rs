//! Bid/ask exchange-rate matrices.
//!
//! For currencies `i < j` in the order of first appearance, entry `(i, j)`
//! holds the ask (the bank's selling quote) of the pair `i/j` and entry
//! `(j, i)` holds its bid (buying quote). The diagonal is 1.
//!
//! Dynamics are modeled on the logarithms `Y_ij = ln S_ij` of the
//! off-diagonal entries with entrywise noise, so positivity is preserved and
//! the diagonal stays at `ln 1 = 0`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{sample_path, SeedSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::matspace::SquareMatrix;
use crate::sde::{euler_maruyama, Coefficients, NoiseAction, Rate};
use crate::stats::MeanEstimate;

pub const CSV_HEADER: [&str; 5] = ["date", "base", "quote", "bid", "ask"];

/// A validated matrix of quotes: positive entries, unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateMatrix {
    rates: SquareMatrix,
}

/// A pair whose bid exceeds its ask, which would allow a free round trip.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossedQuote {
    pub base: usize,
    pub quote: usize,
    pub bid: f64,
    pub ask: f64,
}

impl fmt::Display for CrossedQuote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "crossed quote for pair ({}, {}): bid {} above ask {}",
            self.base, self.quote, self.bid, self.ask
        )
    }
}

/// Accepts `rates` iff n ≥ 2, every entry is positive and finite and the
/// diagonal is exactly 1. Crossed quotes are returned as warnings.
pub fn validate_rate_matrix(rates: SquareMatrix) -> Result<(RateMatrix, Vec<CrossedQuote>)> {
    let n = rates.dim();
    if n < 2 {
        return Err(Error::InvalidRate(format!("need at least 2 currencies, found {n}")));
    }
    for i in 0..n {
        for j in 0..n {
            let v = rates[(i, j)];
            if i == j && v != 1.0 {
                return Err(Error::InvalidRate(format!("diagonal entry ({i}, {j}) is {v}, expected 1")));
            }
            if v.is_nan() || v <= 0.0 {
                return Err(Error::InvalidRate(format!("entry ({i}, {j}) is {v}, expected positive")));
            }
        }
    }
    let m = RateMatrix { rates };
    let warnings = m.crossed_quotes();
    Ok((m, warnings))
}

impl RateMatrix {
    pub fn new(rates: SquareMatrix) -> Result<Self> {
        validate_rate_matrix(rates).map(|(m, _)| m)
    }

    pub fn rates(&self) -> &SquareMatrix {
        &self.rates
    }

    pub fn dim(&self) -> usize {
        self.rates.dim()
    }

    pub fn ask(&self, i: usize, j: usize) -> f64 {
        self.rates[(i, j)]
    }

    pub fn bid(&self, i: usize, j: usize) -> f64 {
        self.rates[(j, i)]
    }

    pub fn crossed_quotes(&self) -> Vec<CrossedQuote> {
        let n = self.dim();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (bid, ask) = (self.bid(i, j), self.ask(i, j));
                if bid > ask {
                    out.push(CrossedQuote { base: i, quote: j, bid, ask });
                }
            }
        }
        out
    }

    /// Entrywise logarithm; the diagonal maps to 0.
    pub fn log_entries(&self) -> SquareMatrix {
        self.rates.map(f64::ln)
    }

    /// Inverse of [`RateMatrix::log_entries`] with the diagonal pinned to 1.
    pub fn from_log_entries(y: &SquareMatrix) -> Result<Self> {
        let n = y.dim();
        let rates = SquareMatrix::from_fn(n, |i, j| if i == j { 1.0 } else { y[(i, j)].exp() })?;
        Self::new(rates)
    }
}

/// Order of the two trades when combining quotes from consecutive dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    /// Buy on the earlier date, sell on the later: upper triangle and
    /// diagonal from the earlier matrix, lower triangle from the later.
    BuyThenSell,
    /// Upper triangle from the later matrix, lower from the earlier.
    SellThenBuy,
}

impl std::str::FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "buy-then-sell" => Ok(Self::BuyThenSell),
            "sell-then-buy" => Ok(Self::SellThenBuy),
            other => Err(Error::InvalidArgument(format!("unknown combine mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatedRates {
    pub date: NaiveDate,
    pub rates: RateMatrix,
}

/// Mixed-date matrix from two dated quotes with `earlier.date < later.date`.
pub fn combine_matrices(earlier: &DatedRates, later: &DatedRates, mode: CombineMode) -> Result<RateMatrix> {
    if earlier.date >= later.date {
        return Err(Error::InvalidArgument(format!(
            "dates out of order: {} is not before {}",
            earlier.date, later.date
        )));
    }
    let (a, b) = (earlier.rates.rates(), later.rates.rates());
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (upper, lower) = match mode {
        CombineMode::BuyThenSell => (a, b),
        CombineMode::SellThenBuy => (b, a),
    };
    let m = SquareMatrix::from_fn(a.dim(), |i, j| if i <= j { upper[(i, j)] } else { lower[(i, j)] })?;
    RateMatrix::new(m)
}

/// `(bid, ask)` keyed by `(base, quote)` index for one date.
type DayQuotes = HashMap<(usize, usize), (f64, f64)>;

/// Quotes on strictly increasing dates over a fixed currency list.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSeries {
    currencies: Vec<String>,
    entries: Vec<DatedRates>,
}

fn check_code(code: &str) -> std::result::Result<(), String> {
    if !code.is_empty() && code.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit()) {
        Ok(())
    } else {
        Err(format!("currency code `{code}` must be nonempty uppercase ASCII"))
    }
}

fn float_field(raw: &str, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = raw.trim().parse().map_err(|_| format!("{name} `{raw}` is not a number"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{name} {v} must be positive and finite"))
    }
}

impl RateSeries {
    pub fn new(currencies: Vec<String>, entries: Vec<DatedRates>) -> Result<Self> {
        let n = currencies.len();
        for c in &currencies {
            check_code(c).map_err(Error::InvalidSeries)?;
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = currencies.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::InvalidSeries(format!("currency {dup} listed twice")));
        }
        if entries.is_empty() {
            return Err(Error::InvalidSeries("a series needs at least one date".into()));
        }
        if let Some(e) = entries.iter().find(|e| e.rates.dim() != n) {
            return Err(Error::InvalidSeries(format!(
                "matrix on {} has dimension {}, expected {n}",
                e.date,
                e.rates.dim()
            )));
        }
        if let Some(w) = entries.windows(2).find(|w| w[0].date >= w[1].date) {
            return Err(Error::InvalidSeries(format!(
                "dates must be strictly increasing: {} then {}",
                w[0].date, w[1].date
            )));
        }
        Ok(Self { currencies, entries })
    }

    pub fn currencies(&self) -> &[String] {
        &self.currencies
    }

    pub fn entries(&self) -> &[DatedRates] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.currencies.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, date: NaiveDate) -> Option<&DatedRates> {
        self.entries
            .binary_search_by(|e| e.date.cmp(&date))
            .ok()
            .map(|k| &self.entries[k])
    }

    /// Crossed quotes of every date.
    pub fn warnings(&self) -> Vec<(NaiveDate, CrossedQuote)> {
        self.entries
            .iter()
            .flat_map(|e| e.rates.crossed_quotes().into_iter().map(move |w| (e.date, w)))
            .collect()
    }

    /// Long-format CSV: `date,base,quote,bid,ask`, one row per pair `i < j`
    /// per date. Currencies must be listed in first-appearance order with
    /// the base before the quote.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
            .clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{}`", CSV_HEADER.join(",")),
            });
        }

        let mut index: HashMap<String, usize> = HashMap::new();
        let mut currencies: Vec<String> = Vec::new();
        let mut days: Vec<(NaiveDate, DayQuotes)> = Vec::new();

        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let fail = |message: String| Error::Parse { line, message };
            if record.len() != CSV_HEADER.len() {
                return Err(fail(format!("expected 5 fields, found {}", record.len())));
            }
            let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
                .map_err(|e| fail(format!("date `{}`: {e}", &record[0])))?;
            let (base, quote) = (&record[1], &record[2]);
            check_code(base).map_err(fail)?;
            check_code(quote).map_err(fail)?;
            if base == quote {
                return Err(fail(format!("pair {base}/{quote} quotes a currency against itself")));
            }
            let bid = float_field(&record[3], "bid").map_err(fail)?;
            let ask = float_field(&record[4], "ask").map_err(fail)?;

            let mut idx = |code: &str| -> usize {
                *index.entry(code.to_string()).or_insert_with(|| {
                    currencies.push(code.to_string());
                    currencies.len() - 1
                })
            };
            let (i, j) = (idx(base), idx(quote));
            if i > j {
                return Err(fail(format!(
                    "pair {base}/{quote} is reversed: {quote} appears before {base}, quote it as {quote}/{base}"
                )));
            }

            match days.last() {
                Some((d, _)) if *d == date => {}
                Some((d, _)) if *d > date => {
                    return Err(fail(format!("dates are not sorted: {date} follows {d}")));
                }
                _ => days.push((date, HashMap::new())),
            }
            let quotes = &mut days.last_mut().expect("pushed above").1;
            if quotes.insert((i, j), (bid, ask)).is_some() {
                return Err(fail(format!("duplicate quote for {base}/{quote} on {date}")));
            }
        }

        let n = currencies.len();
        if days.is_empty() {
            return Err(Error::InvalidSeries("no quotes".into()));
        }
        let mut entries = Vec::with_capacity(days.len());
        for (date, quotes) in days {
            let mut m = SquareMatrix::identity(n);
            for i in 0..n {
                for j in i + 1..n {
                    let Some(&(bid, ask)) = quotes.get(&(i, j)) else {
                        return Err(Error::InvalidSeries(format!(
                            "missing pair {}/{} on {date}",
                            currencies[i], currencies[j]
                        )));
                    };
                    m.set(i, j, ask)?;
                    m.set(j, i, bid)?;
                }
            }
            entries.push(DatedRates {
                date,
                rates: RateMatrix::new(m)?,
            });
        }
        Self::new(currencies, entries)
    }

    pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    fn push_rows(&self, out: &mut String, lead: Option<u64>) {
        let n = self.dim();
        for e in &self.entries {
            for i in 0..n {
                for j in i + 1..n {
                    if let Some(id) = lead {
                        out.push_str(&format!("{id},"));
                    }
                    out.push_str(&format!(
                        "{},{},{},{:?},{:?}\n",
                        e.date,
                        self.currencies[i],
                        self.currencies[j],
                        e.rates.bid(i, j),
                        e.rates.ask(i, j)
                    ));
                }
            }
        }
    }

    /// Inverse of [`RateSeries::from_csv_str`]; floats use shortest
    /// round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", CSV_HEADER.join(","));
        self.push_rows(&mut out, None);
        out
    }

    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// The common spacing of the dates in days; errors when nonuniform.
    pub fn uniform_spacing_days(&self) -> Result<i64> {
        let gaps: Vec<i64> = self
            .entries
            .windows(2)
            .map(|w| (w[1].date - w[0].date).num_days())
            .collect();
        match gaps.first() {
            None => Err(Error::InvalidSeries("a single date has no spacing".into())),
            Some(&g) => match gaps.iter().position(|&x| x != g) {
                None => Ok(g),
                Some(k) => Err(Error::InvalidSeries(format!(
                    "nonuniform date spacing: {} days before {}, {g} days before {}",
                    gaps[k],
                    self.entries[k + 1].date,
                    self.entries[1].date
                ))),
            },
        }
    }
}

/// Ensemble CSV with a leading `path_id` column.
pub fn ensemble_to_csv(series: &[RateSeries]) -> String {
    let mut out = format!("path_id,{}\n", CSV_HEADER.join(","));
    for (id, s) in series.iter().enumerate() {
        s.push_rows(&mut out, Some(id as u64));
    }
    out
}

/// Day-count convention for converting date gaps to year fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DayCount {
    #[default]
    Act365,
    Act360,
}

impl DayCount {
    pub fn days_per_year(&self) -> f64 {
        match self {
            DayCount::Act365 => 365.0,
            DayCount::Act360 => 360.0,
        }
    }

    pub fn year_fraction(&self, days: i64) -> f64 {
        days as f64 / self.days_per_year()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FxFamily {
    /// `d ln S_ij = M_ij dt + Σ_ij dB_ij`.
    EntrywiseGeometric,
    /// `d ln S_ij = M_ij (L_ij − ln S_ij) dt + Σ_ij dB_ij`.
    AdditiveOu,
}

impl std::str::FromStr for FxFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entrywise-geometric" => Ok(Self::EntrywiseGeometric),
            "additive-ou" => Ok(Self::AdditiveOu),
            other => Err(Error::InvalidArgument(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Deserialize)]
struct RawSpec {
    family: FxFamily,
    drift: SquareMatrix,
    vol: SquareMatrix,
    #[serde(default)]
    level: Option<SquareMatrix>,
}

/// Parameters of an FX model on log-quotes. `drift` is M (per year) and
/// `vol` is Σ (per √year). For the OU family `drift` holds the reversion
/// speeds and `level` the long-run log-quotes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct FxModelSpec {
    pub family: FxFamily,
    drift: SquareMatrix,
    vol: SquareMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    level: Option<SquareMatrix>,
}

impl TryFrom<RawSpec> for FxModelSpec {
    type Error = Error;

    fn try_from(r: RawSpec) -> Result<Self> {
        Self::new(r.family, r.drift, r.vol, r.level)
    }
}

fn zero_diagonal(m: &SquareMatrix) -> SquareMatrix {
    SquareMatrix::from_fn(m.dim(), |i, j| if i == j { 0.0 } else { m[(i, j)] }).expect("finite")
}

impl FxModelSpec {
    /// Diagonals are forced to zero. `level` is required for the OU family
    /// and rejected otherwise.
    pub fn new(family: FxFamily, drift: SquareMatrix, vol: SquareMatrix, level: Option<SquareMatrix>) -> Result<Self> {
        let n = drift.dim();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 currencies, found {n}")));
        }
        for m in std::iter::once(&vol).chain(level.as_ref()) {
            if m.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, found: m.dim() });
            }
        }
        if let Some(k) = vol.as_slice().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "volatility ({}, {}) is negative",
                k / n,
                k % n
            )));
        }
        let level = match (family, level) {
            (FxFamily::AdditiveOu, Some(l)) => Some(zero_diagonal(&l)),
            (FxFamily::AdditiveOu, None) => {
                return Err(Error::InvalidArgument("the OU family needs a level matrix".into()))
            }
            (FxFamily::EntrywiseGeometric, None) => None,
            (FxFamily::EntrywiseGeometric, Some(_)) => {
                return Err(Error::InvalidArgument("the geometric family takes no level".into()))
            }
        };
        Ok(Self {
            family,
            drift: zero_diagonal(&drift),
            vol: zero_diagonal(&vol),
            level,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn drift(&self) -> &SquareMatrix {
        &self.drift
    }

    pub fn vol(&self) -> &SquareMatrix {
        &self.vol
    }

    pub fn level(&self) -> Option<&SquareMatrix> {
        self.level.as_ref()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite matrices serialize")
    }

    /// Coefficients of the log-quote SDE with entrywise noise.
    pub fn coefficients(&self) -> Coefficients {
        let vol = self.vol.clone();
        let vol_sq = vol.hs_norm_sq();
        match (&self.family, &self.level) {
            (FxFamily::AdditiveOu, Some(level)) => {
                let speed = self.drift.clone();
                let target = speed.hadamard(level).expect("same dimension");
                let lip = speed.as_slice().iter().fold(0.0f64, |m, v| m.max(v * v));
                let k2 = target.hs_norm_sq() + vol_sq;
                Coefficients::new(
                    move |_, y| {
                        target
                            .try_sub(&speed.hadamard(y).expect("same dimension"))
                            .expect("same dimension")
                    },
                    move |_, _| vol.clone(),
                )
                .with_noise(NoiseAction::Entrywise)
                .with_kappa1(Rate::constant(lip))
                .with_kappa2(Rate::constant(k2))
                .with_local(move |_| Rate::constant(lip))
                .with_kappa0(Rate::constant(vol_sq))
            }
            _ => Coefficients::constant(self.drift.clone(), vol).with_noise(NoiseAction::Entrywise),
        }
    }
}

/// Least-squares fit of `y = a + b x`; returns `(a, b, residual variance)`
/// with `n − 2` degrees of freedom, or `None` when `x` is constant.
fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    Some((a, b, rss / (n - 2.0).max(1.0)))
}

/// Fits the family to a series with at least 3 uniformly spaced dates.
///
/// Geometric: `M = mean(Δ ln S) / Δt`, `Σ = std(Δ ln S) / √Δt`.
/// OU: regress `Δ ln S` on `ln S`; the slope gives `−M Δt`, the intercept
/// the level and the residual spread Σ. A constant entry yields `M = 0`,
/// `Σ = 0` and a level equal to the constant.
pub fn estimate_coefficients(series: &RateSeries, family: FxFamily, day_count: DayCount) -> Result<FxModelSpec> {
    if series.len() < 3 {
        return Err(Error::InvalidSeries(format!("need at least 3 dates, found {}", series.len())));
    }
    let dt = day_count.year_fraction(series.uniform_spacing_days()?);
    let n = series.dim();
    let logs: Vec<SquareMatrix> = series.entries.iter().map(|e| e.rates.log_entries()).collect();
    let mut drift = SquareMatrix::zeros(n);
    let mut vol = SquareMatrix::zeros(n);
    let mut level = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let y: Vec<f64> = logs.iter().map(|m| m[(i, j)]).collect();
            let dy: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
            match family {
                FxFamily::EntrywiseGeometric => {
                    let est = MeanEstimate::from_samples(&dy);
                    drift.set(i, j, est.mean / dt)?;
                    vol.set(i, j, est.std_dev / dt.sqrt())?;
                }
                FxFamily::AdditiveOu => match linear_fit(&y[..y.len() - 1], &dy) {
                    Some((a, b, var)) if b != 0.0 => {
                        drift.set(i, j, -b / dt)?;
                        level.set(i, j, -a / b)?;
                        vol.set(i, j, (var / dt).sqrt())?;
                    }
                    _ => {
                        let est = MeanEstimate::from_samples(&dy);
                        level.set(i, j, y[0])?;
                        vol.set(i, j, est.std_dev / dt.sqrt())?;
                    }
                },
            }
        }
    }
    let level = (family == FxFamily::AdditiveOu).then_some(level);
    FxModelSpec::new(family, drift, vol, level)
}

/// Simulates `paths` series from `s0` on `grid` (in years). Node `t` maps to
/// the date `s0.date + round(t · days_per_year)` days.
pub fn simulate_market(
    spec: &FxModelSpec,
    s0: &DatedRates,
    currencies: &[String],
    grid: &TimeGrid,
    paths: usize,
    master_seed: u64,
    day_count: DayCount,
) -> Result<Vec<RateSeries>> {
    let n = spec.dim();
    if s0.rates.dim() != n || currencies.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: s0.rates.dim(),
        });
    }
    let dates = grid
        .nodes()
        .iter()
        .map(|t| {
            let days = (t * day_count.days_per_year()).round() as i64;
            s0.date
                .checked_add_signed(chrono::Duration::days(days))
                .ok_or_else(|| Error::InvalidGrid(format!("date overflow at t = {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(w) = dates.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidGrid(format!(
            "two grid nodes map to the same date {}; steps must be at least one day",
            w[0]
        )));
    }

    let coeffs = spec.coefficients();
    let y0 = s0.rates.log_entries();
    (0..paths as u64)
        .into_par_iter()
        .map(|id| {
            let driver = sample_path(n, grid, SeedSpec::new(master_seed, id))?;
            let sol = euler_maruyama(&coeffs, &y0, &driver).map_err(|e| match e {
                Error::BlowUp { node } => Error::PathBlowUp { path_id: id, node },
                other => other,
            })?;
            let entries = sol
                .states
                .iter()
                .zip(&dates)
                .enumerate()
                .map(|(k, (y, &date))| {
                    let rates = RateMatrix::from_log_entries(y).map_err(|_| Error::PathBlowUp { path_id: id, node: k })?;
                    Ok(DatedRates { date, rates })
                })
                .collect::<Result<Vec<_>>>()?;
            RateSeries::new(currencies.to_vec(), entries)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m2(rows: [[f64; 2]; 2]) -> SquareMatrix {
        SquareMatrix::from_rows(&rows).unwrap()
    }

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn dated(d: &str, rows: [[f64; 2]; 2]) -> DatedRates {
        DatedRates {
            date: date(d),
            rates: RateMatrix::new(m2(rows)).unwrap(),
        }
    }

    #[test]
    fn validation_examples() {
        let (m, w) = validate_rate_matrix(m2([[1.0, 1.2], [0.8, 1.0]])).unwrap();
        assert_eq!(m.ask(0, 1), 1.2);
        assert_eq!(m.bid(0, 1), 0.8);
        assert!(w.is_empty());
        let err = validate_rate_matrix(m2([[0.99, 1.2], [0.8, 1.0]])).unwrap_err();
        assert!(err.to_string().contains("(0, 0)"));
        let err = validate_rate_matrix(m2([[1.0, -0.5], [0.8, 1.0]])).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"));
        assert!(validate_rate_matrix(SquareMatrix::identity(1)).is_err());
        let (_, w) = validate_rate_matrix(m2([[1.0, 0.8], [1.2, 1.0]])).unwrap();
        assert_eq!(w, vec![CrossedQuote { base: 0, quote: 1, bid: 1.2, ask: 0.8 }]);
    }

    #[test]
    fn combine_examples() {
        let a = dated("2024-01-01", [[1.0, 1.2], [0.8, 1.0]]);
        let b = dated("2024-01-02", [[1.0, 1.3], [0.7, 1.0]]);
        let bts = combine_matrices(&a, &b, CombineMode::BuyThenSell).unwrap();
        assert_eq!(bts.rates(), &m2([[1.0, 1.2], [0.7, 1.0]]));
        let stb = combine_matrices(&a, &b, CombineMode::SellThenBuy).unwrap();
        assert_eq!(stb.rates(), &m2([[1.0, 1.3], [0.8, 1.0]]));

        let same = dated("2024-01-02", [[1.0, 1.2], [0.8, 1.0]]);
        for mode in [CombineMode::BuyThenSell, CombineMode::SellThenBuy] {
            assert_eq!(combine_matrices(&a, &same, mode).unwrap(), a.rates);
        }
        assert!(combine_matrices(&b, &a, CombineMode::BuyThenSell).is_err());
        let three = DatedRates {
            date: date("2024-01-03"),
            rates: RateMatrix::new(SquareMatrix::filled(3, 1.0).unwrap()).unwrap(),
        };
        assert!(combine_matrices(&a, &three, CombineMode::BuyThenSell).is_err());
    }

    const FIXTURE: &str = "date,base,quote,bid,ask\n\
        2024-01-01,EUR,USD,1.09,1.1\n\
        2024-01-02,EUR,USD,1.08,1.095\n";

    #[test]
    fn ingest_examples() {
        let s = RateSeries::from_csv_str(FIXTURE).unwrap();
        assert_eq!(s.currencies(), ["EUR", "USD"]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.entries()[1].rates.rates(), &m2([[1.0, 1.095], [1.08, 1.0]]));
        assert_eq!(s.to_csv(), FIXTURE);
        assert_eq!(RateSeries::from_csv_str(&s.to_csv()).unwrap(), s);

        let three = "date,base,quote,bid,ask\n\
            2024-01-01,EUR,USD,1.09,1.1\n\
            2024-01-01,EUR,JPY,160,161\n\
            2024-01-01,USD,JPY,147,148\n\
            2024-01-02,EUR,USD,1.09,1.1\n\
            2024-01-02,USD,JPY,147,148\n";
        let err = RateSeries::from_csv_str(three).unwrap_err();
        assert!(err.to_string().contains("EUR/JPY on 2024-01-02"), "{err}");
    }

    #[test]
    fn ingest_errors_carry_line_numbers() {
        let cases = [
            ("date,base,quote,bid\n", 1),
            ("date,base,quote,bid,ask\n2024-01-01,EUR,USD,x,1.1\n", 2),
            ("date,base,quote,bid,ask\n2024-01-01,EUR,USD,1,1.1\n2024-13-01,EUR,USD,1,1.1\n", 3),
            ("date,base,quote,bid,ask\n2024-01-02,EUR,USD,1,1.1\n2024-01-01,EUR,USD,1,1.1\n", 3),
            ("date,base,quote,bid,ask\n2024-01-01,EUR,USD,1,1.1\n2024-01-01,EUR,USD,1,1.1\n", 3),
            ("date,base,quote,bid,ask\n2024-01-01,EUR,USD,1,1.1\n2024-01-02,USD,EUR,1,1.1\n", 3),
            ("date,base,quote,bid,ask\n2024-01-01,eur,USD,1,1.1\n", 2),
            ("date,base,quote,bid,ask\n2024-01-01,EUR,EUR,1,1\n", 2),
            ("date,base,quote,bid,ask\n2024-01-01,EUR,USD,0,1.1\n", 2),
            ("date,base,quote,bid,ask\n2024-01-01,EUR,USD,1\n", 2),
        ];
        for (text, line) in cases {
            match RateSeries::from_csv_str(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
        assert!(RateSeries::from_csv_str("date,base,quote,bid,ask\n").is_err());
    }

    #[test]
    fn export_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rates.csv");
        let s = RateSeries::from_csv_str(FIXTURE).unwrap();
        s.export_csv(&path).unwrap();
        assert_eq!(RateSeries::ingest_csv(&path).unwrap(), s);
    }

    fn constant_series(days: usize) -> RateSeries {
        let entries = (0..days)
            .map(|k| DatedRates {
                date: date("2024-01-01") + chrono::Duration::days(k as i64),
                rates: RateMatrix::new(m2([[1.0, 1.2], [0.8, 1.0]])).unwrap(),
            })
            .collect();
        RateSeries::new(vec!["EUR".into(), "USD".into()], entries).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let s = constant_series(5);
        let g = estimate_coefficients(&s, FxFamily::EntrywiseGeometric, DayCount::Act365).unwrap();
        assert!(g.drift().is_zero() && g.vol().is_zero());
        let ou = estimate_coefficients(&s, FxFamily::AdditiveOu, DayCount::Act365).unwrap();
        assert!(ou.drift().is_zero() && ou.vol().is_zero());
        assert_eq!(ou.level().unwrap()[(0, 1)], 1.2f64.ln());
        assert!(estimate_coefficients(&constant_series(2), FxFamily::EntrywiseGeometric, DayCount::Act365).is_err());

        let mut entries = constant_series(4).entries.clone();
        entries[3].date += chrono::Duration::days(1);
        let gappy = RateSeries::new(vec!["A".into(), "B".into()], entries).unwrap();
        assert!(estimate_coefficients(&gappy, FxFamily::EntrywiseGeometric, DayCount::Act365).is_err());
    }

    #[test]
    fn spec_validation_and_json() {
        let spec = FxModelSpec::new(
            FxFamily::EntrywiseGeometric,
            m2([[5.0, 0.1], [-0.2, 5.0]]),
            m2([[1.0, 0.1], [0.2, 1.0]]),
            None,
        )
        .unwrap();
        assert_eq!(spec.drift()[(0, 0)], 0.0);
        assert_eq!(spec.vol()[(1, 1)], 0.0);
        assert_eq!(FxModelSpec::from_json(&spec.to_json()).unwrap(), spec);
        assert!(FxModelSpec::new(FxFamily::EntrywiseGeometric, m2([[0.0; 2]; 2]), m2([[0.0, -0.1], [0.0, 0.0]]), None).is_err());
        assert!(FxModelSpec::new(FxFamily::AdditiveOu, m2([[0.0; 2]; 2]), m2([[0.0; 2]; 2]), None).is_err());
        let bad = r#"{"family":"entrywise-geometric","drift":[[0,1],[1,0]],"vol":[[0,-1],[0,0]]}"#;
        assert!(FxModelSpec::from_json(bad).is_err());
        assert!(FxModelSpec::from_json("{").is_err());
    }

    fn s0() -> DatedRates {
        dated("2024-01-01", [[1.0, 1.2], [0.8, 1.0]])
    }

    fn codes() -> Vec<String> {
        vec!["EUR".into(), "USD".into()]
    }

    #[test]
    fn simulate_examples() {
        let grid = TimeGrid::uniform(10.0 / 365.0, 10).unwrap();
        let zero = FxModelSpec::new(FxFamily::EntrywiseGeometric, SquareMatrix::zeros(2), SquareMatrix::zeros(2), None).unwrap();
        let out = simulate_market(&zero, &s0(), &codes(), &grid, 3, 1, DayCount::Act365).unwrap();
        assert_eq!(out.len(), 3);
        for s in &out {
            assert_eq!(s.len(), 11);
            for e in s.entries() {
                assert_eq!(e.rates, s0().rates);
            }
        }

        let r = 0.7;
        let det = FxModelSpec::new(FxFamily::EntrywiseGeometric, m2([[0.0, r], [0.0, 0.0]]), SquareMatrix::zeros(2), None).unwrap();
        let out = simulate_market(&det, &s0(), &codes(), &grid, 1, 1, DayCount::Act365).unwrap();
        let last = &out[0].entries().last().unwrap().rates;
        let expected = 1.2 * (r * grid.horizon()).exp();
        assert!((last.ask(0, 1) / expected - 1.0).abs() < 1e-14);
        assert_eq!(last.bid(0, 1), 0.8);

        let noisy = FxModelSpec::new(FxFamily::EntrywiseGeometric, m2([[0.0, 0.3], [-0.5, 0.0]]), m2([[0.0, 2.0], [3.0, 0.0]]), None).unwrap();
        for s in simulate_market(&noisy, &s0(), &codes(), &grid, 20, 2, DayCount::Act365).unwrap() {
            for e in s.entries() {
                assert!(validate_rate_matrix(e.rates.rates().clone()).is_ok());
                assert_eq!(e.rates.rates()[(0, 0)], 1.0);
            }
        }

        let too_fine = TimeGrid::uniform(1.0 / 365.0, 4).unwrap();
        assert!(simulate_market(&zero, &s0(), &codes(), &too_fine, 1, 1, DayCount::Act365).is_err());
    }

    #[test]
    fn ou_loop_closure() {
        let level = m2([[0.0, 0.2], [-0.1, 0.0]]);
        let spec = FxModelSpec::new(
            FxFamily::AdditiveOu,
            m2([[0.0, 2.0], [3.0, 0.0]]),
            m2([[0.0, 0.1], [0.2, 0.0]]),
            Some(level),
        )
        .unwrap();
        let days = 40_000;
        let grid = TimeGrid::new((0..days).map(|k| k as f64 / 365.0).collect()).unwrap();
        let sim = simulate_market(&spec, &s0(), &codes(), &grid, 1, 5, DayCount::Act365).unwrap();
        let est = estimate_coefficients(&sim[0], FxFamily::AdditiveOu, DayCount::Act365).unwrap();
        for (i, j) in [(0, 1), (1, 0)] {
            assert!((est.vol()[(i, j)] / spec.vol()[(i, j)] - 1.0).abs() < 0.05);
            // The speed estimator has standard deviation about √(2θ/T).
            let theta = spec.drift()[(i, j)];
            let sd = (2.0 * theta / grid.horizon()).sqrt();
            assert!((est.drift()[(i, j)] - theta).abs() < 4.0 * sd, "{est:?}");
            assert!((est.level().unwrap()[(i, j)] - spec.level().unwrap()[(i, j)]).abs() < 0.05);
        }
    }
}
