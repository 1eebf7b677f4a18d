//! Portfolio aggregation and risk metrics.

use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_to_string, DataError, ReturnMatrix, DEFAULT_WINDOW};
use crate::gan::{generate_scenarios, train_gan, GanConfig, GanError};
use crate::rng::derive_seed;
use crate::scenario::ScenarioSet;
use crate::valuation::{ValuationError, Valuator};

/// Tail probability of the risk charge: the 0.5% worst P&L.
pub const VAR_TAIL: f64 = 0.005;
pub const DEFAULT_MIN_SCENARIOS: usize = 200;
pub const JQE_LEVEL: f64 = 0.8;
/// Percentile bands written to the plot CSV.
pub const REPORT_BANDS: [f64; 7] = [0.005, 0.05, 0.25, 0.5, 0.75, 0.95, 0.995];

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("quantile level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("CQV undefined: Q1 + Q3 = 0")]
    UndefinedCqv,
    #[error("CQV needs at least 4 values, got {0}")]
    TooFewRuns(usize),
    #[error("{got} scenarios, need at least {min}")]
    TooFewScenarios { got: usize, min: usize },
    #[error("portfolio `{0}` has zero base market value")]
    ZeroBaseValue(String),
    #[error("portfolio `{portfolio}` references unknown instrument `{instrument}`")]
    UnknownInstrument { portfolio: String, instrument: String },
    #[error("invalid portfolio: {0}")]
    InvalidPortfolio(String),
    #[error("evaluation date index {index} has less than {window} days of history")]
    InsufficientHistory { index: usize, window: usize },
    #[error("no evaluation dates")]
    NoEvaluationDates,
    #[error("bad date `{0}`")]
    BadDate(String),
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("training data carries no scaling")]
    MissingScaling,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Valuation(#[from] ValuationError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------- quantiles

/// 0-based order-statistic index `ceil(q * n) - 1`. Products that land
/// within rounding noise of an integer are snapped so that e.g. `0.005 *
/// 1000` selects the 5th value.
fn order_index(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n) - 1
}

fn check_level(q: f64) -> Result<(), PortfolioError> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(PortfolioError::InvalidLevel(q))
    }
}

/// Lower order statistic on an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64, PortfolioError> {
    check_level(q)?;
    if sorted.is_empty() {
        return Err(PortfolioError::EmptyInput);
    }
    Ok(sorted[order_index(q, sorted.len())])
}

fn checked_copy(values: &[f64]) -> Result<Vec<f64>, PortfolioError> {
    if values.is_empty() {
        return Err(PortfolioError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PortfolioError::NonFinite);
    }
    Ok(values.to_vec())
}

fn sorted_copy(values: &[f64]) -> Result<Vec<f64>, PortfolioError> {
    let mut v = checked_copy(values)?;
    v.sort_unstable_by(f64::total_cmp);
    Ok(v)
}

/// Empirical `q`-quantile: the value at 0-based index `ceil(q * n) - 1` of
/// the ascending sort. No interpolation.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64, PortfolioError> {
    check_level(q)?;
    let mut v = checked_copy(values)?;
    let k = order_index(q, v.len());
    let (_, nth, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*nth)
}

// ---------------------------------------------------------------- portfolios

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    Asset,
    Liability,
}

/// How holding weights are read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Market-value fraction: the holding is worth `weight` at base and
    /// moves with the instrument's relative value change.
    #[default]
    Fraction,
    /// Number of instrument units; the holding is worth
    /// `weight * base_market_value`.
    Units,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Holding {
    pub instrument: String,
    pub weight: f64,
    #[serde(default)]
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Portfolio {
    pub id: String,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(rename = "holding")]
    pub holdings: Vec<Holding>,
}

impl Portfolio {
    pub fn has_liabilities(&self) -> bool {
        self.holdings.iter().any(|h| h.side == Side::Liability)
    }

    /// Same holdings with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut p = self.clone();
        p.holdings.iter_mut().for_each(|h| h.weight *= c);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioBook {
    #[serde(rename = "portfolio")]
    pub portfolios: Vec<Portfolio>,
}

impl PortfolioBook {
    pub fn from_toml_str(text: &str) -> Result<Self, PortfolioError> {
        let book: Self =
            toml::from_str(text).map_err(|e| PortfolioError::InvalidPortfolio(e.to_string()))?;
        for (i, p) in book.portfolios.iter().enumerate() {
            if book.portfolios[..i].iter().any(|o| o.id == p.id) {
                return Err(PortfolioError::InvalidPortfolio(format!("duplicate id `{}`", p.id)));
            }
            if p.holdings.is_empty() {
                return Err(PortfolioError::InvalidPortfolio(format!("`{}` has no holdings", p.id)));
            }
            if p.holdings.iter().any(|h| !h.weight.is_finite()) {
                return Err(PortfolioError::InvalidPortfolio(format!("`{}` has a non-finite weight", p.id)));
            }
            if p.weighting == Weighting::Fraction {
                let assets: f64 = p
                    .holdings
                    .iter()
                    .filter(|h| h.side == Side::Asset)
                    .map(|h| h.weight)
                    .sum();
                let any_asset = p.holdings.iter().any(|h| h.side == Side::Asset);
                if any_asset && (assets - 1.0).abs() > 1e-6 {
                    return Err(PortfolioError::InvalidPortfolio(format!(
                        "asset fractions of `{}` sum to {assets}",
                        p.id
                    )));
                }
            }
        }
        Ok(book)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PortfolioError> {
        Self::from_toml_str(&read_to_string(path.as_ref())?)
    }
}

/// Instrument values at base and in every scenario.
#[derive(Debug, Clone)]
pub struct InstrumentValues {
    pub instrument_ids: Vec<String>,
    pub base: Vec<f64>,
    /// Scenarios × instruments.
    pub scenarios: Array2<f64>,
}

/// Values every instrument in every scenario row. Rows are valued in
/// parallel; the result does not depend on the thread count.
pub fn value_scenarios(
    valuator: &Valuator,
    scenarios: &ScenarioSet,
) -> Result<InstrumentValues, PortfolioError> {
    let n_instr = valuator.universe().instruments.len();
    let base = valuator.value_row(Array1::zeros(scenarios.factor_ids.len()).view())?;
    let rows: Vec<Vec<f64>> = (0..scenarios.len())
        .into_par_iter()
        .map(|i| valuator.value_row(scenarios.values.row(i)))
        .collect::<Result<_, _>>()?;
    let mut out = Array2::zeros((rows.len(), n_instr));
    for (mut dst, src) in out.rows_mut().into_iter().zip(&rows) {
        dst.assign(&ArrayView1::from(src.as_slice()));
    }
    Ok(InstrumentValues {
        instrument_ids: valuator.universe().instruments.iter().map(|i| i.id.clone()).collect(),
        base,
        scenarios: out,
    })
}

/// Portfolio value per scenario, liabilities entering with a negative sign.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioValues {
    pub id: String,
    /// Net base value (assets minus liabilities).
    pub base: f64,
    /// Base value of the asset side alone.
    pub asset_base: f64,
    pub scenarios: Vec<f64>,
}

impl PortfolioValues {
    pub fn pnl(&self) -> Vec<f64> {
        self.scenarios.iter().map(|v| v - self.base).collect()
    }

    /// Scenario returns relative to the net base value.
    pub fn net_returns(&self) -> Result<Vec<f64>, PortfolioError> {
        if self.base == 0.0 {
            return Err(PortfolioError::ZeroBaseValue(self.id.clone()));
        }
        Ok(self.pnl().into_iter().map(|p| p / self.base.abs()).collect())
    }

    /// Scenario returns relative to the asset-side base value.
    pub fn asset_returns(&self) -> Result<Vec<f64>, PortfolioError> {
        if self.asset_base == 0.0 {
            return Err(PortfolioError::ZeroBaseValue(self.id.clone()));
        }
        Ok(self.pnl().into_iter().map(|p| p / self.asset_base.abs()).collect())
    }
}

/// Per-holding `(column, signed coefficient, side)` such that the holding is
/// worth `coefficient * instrument value`.
fn holding_coefficients(
    pf: &Portfolio,
    values: &InstrumentValues,
) -> Result<Vec<(usize, f64, Side)>, PortfolioError> {
    pf.holdings
        .iter()
        .map(|h| {
            let col = values
                .instrument_ids
                .iter()
                .position(|id| *id == h.instrument)
                .ok_or_else(|| PortfolioError::UnknownInstrument {
                    portfolio: pf.id.clone(),
                    instrument: h.instrument.clone(),
                })?;
            let unit = match pf.weighting {
                Weighting::Units => h.weight,
                Weighting::Fraction => {
                    let b = values.base[col];
                    if b == 0.0 {
                        return Err(PortfolioError::InvalidPortfolio(format!(
                            "instrument `{}` has zero base value",
                            h.instrument
                        )));
                    }
                    h.weight / b
                }
            };
            let sign = match h.side {
                Side::Asset => 1.0,
                Side::Liability => -1.0,
            };
            Ok((col, sign * unit, h.side))
        })
        .collect()
}

pub fn portfolio_values(
    pf: &Portfolio,
    values: &InstrumentValues,
) -> Result<PortfolioValues, PortfolioError> {
    let coefs = holding_coefficients(pf, values)?;
    let base = coefs.iter().map(|&(c, w, _)| w * values.base[c]).sum();
    let asset_base = coefs
        .iter()
        .filter(|(_, _, s)| *s == Side::Asset)
        .map(|&(c, w, _)| w * values.base[c])
        .sum();
    let scenarios = values
        .scenarios
        .rows()
        .into_iter()
        .map(|row| coefs.iter().map(|&(c, w, _)| w * row[c]).sum())
        .collect();
    Ok(PortfolioValues {
        id: pf.id.clone(),
        base,
        asset_base,
        scenarios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskChargeOptions {
    /// Tail probability of the P&L quantile.
    pub tail: f64,
    pub min_scenarios: usize,
}

impl Default for RiskChargeOptions {
    fn default() -> Self {
        Self {
            tail: VAR_TAIL,
            min_scenarios: DEFAULT_MIN_SCENARIOS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCharge {
    pub risk_charge: f64,
    pub var_absolute: f64,
}

/// VaR as the negated `tail`-quantile of P&L, divided by `|base_value|`.
pub fn risk_charge_from_pnl(
    pnl: &[f64],
    base_value: f64,
    opts: &RiskChargeOptions,
) -> Result<RiskCharge, PortfolioError> {
    if pnl.len() < opts.min_scenarios {
        return Err(PortfolioError::TooFewScenarios {
            got: pnl.len(),
            min: opts.min_scenarios,
        });
    }
    if base_value == 0.0 || !base_value.is_finite() {
        return Err(PortfolioError::ZeroBaseValue(String::new()));
    }
    let var_absolute = -empirical_quantile(pnl, opts.tail)?;
    Ok(RiskCharge {
        risk_charge: var_absolute / base_value.abs(),
        var_absolute,
    })
}

/// Values `pf` in every scenario and returns its risk charge.
pub fn risk_charge(
    pf: &Portfolio,
    scenarios: &ScenarioSet,
    valuator: &Valuator,
    opts: &RiskChargeOptions,
) -> Result<RiskCharge, PortfolioError> {
    let values = value_scenarios(valuator, scenarios)?;
    let pv = portfolio_values(pf, &values)?;
    risk_charge_from_pnl(&pv.pnl(), pv.base, opts).map_err(|e| match e {
        PortfolioError::ZeroBaseValue(_) => PortfolioError::ZeroBaseValue(pf.id.clone()),
        e => e,
    })
}

// ---------------------------------------------------------------- shocks

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sided {
    #[default]
    TwoSided,
    OneSidedUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorShock {
    /// 0.5% quantile; absent for one-sided factors.
    pub down: Option<f64>,
    /// 99.5% quantile.
    pub up: f64,
}

pub fn factor_shock(column: &[f64], sided: Sided) -> Result<FactorShock, PortfolioError> {
    let sorted = sorted_copy(column)?;
    let up = quantile_sorted(&sorted, 1.0 - VAR_TAIL)?;
    let down = match sided {
        Sided::TwoSided => Some(quantile_sorted(&sorted, VAR_TAIL)?),
        Sided::OneSidedUp => None,
    };
    Ok(FactorShock { down, up })
}

/// Post-generation bounds for one factor, in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorClamp {
    pub factor: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

pub fn apply_clamps(scenarios: &mut ScenarioSet, clamps: &[FactorClamp]) -> Result<(), PortfolioError> {
    for c in clamps {
        let j = scenarios
            .column_index(&c.factor)
            .ok_or_else(|| PortfolioError::UnknownFactor(c.factor.clone()))?;
        let lo = c.min.unwrap_or(f64::NEG_INFINITY);
        let hi = c.max.unwrap_or(f64::INFINITY);
        scenarios.values.column_mut(j).mapv_inplace(|v| v.clamp(lo, hi));
    }
    Ok(())
}

// ---------------------------------------------------------------- backtest

fn parse_date(s: &str) -> Result<NaiveDate, PortfolioError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| PortfolioError::BadDate(s.to_string()))
}

/// Index of the last available date in each calendar month that falls in
/// `[from, to]`. `dates` must be ascending ISO dates.
pub fn month_end_dates(dates: &[String], from: &str, to: &str) -> Result<Vec<usize>, PortfolioError> {
    let from = parse_date(from)?;
    let to = parse_date(to)?;
    let parsed = dates.iter().map(|d| parse_date(d)).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for (i, d) in parsed.iter().enumerate() {
        let last_in_month = parsed
            .get(i + 1)
            .is_none_or(|next| (next.year(), next.month()) != (d.year(), d.month()));
        if last_in_month && *d >= from && *d <= to {
            out.push(i);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub value: f64,
    /// Series index at which the minimum is attained (first on ties).
    pub index: usize,
}

/// `min over t in eval of (mv[t] - mv[t - window]) / base[t - window]`.
pub fn worst_case_with_base(
    mv: &[f64],
    base: &[f64],
    eval: &[usize],
    window: usize,
) -> Result<WorstCase, PortfolioError> {
    if mv.len() != base.len() {
        return Err(PortfolioError::LengthMismatch(mv.len(), base.len()));
    }
    if eval.is_empty() {
        return Err(PortfolioError::NoEvaluationDates);
    }
    let mut best = WorstCase {
        value: f64::INFINITY,
        index: 0,
    };
    for &t in eval {
        if t < window || t >= mv.len() {
            return Err(PortfolioError::InsufficientHistory { index: t, window });
        }
        let r = (mv[t] - mv[t - window]) / base[t - window];
        if r < best.value {
            best = WorstCase { value: r, index: t };
        }
    }
    Ok(best)
}

/// Worst rolling relative return `mv[t] / mv[t - window] - 1` over `eval`.
pub fn worst_case_backtest(mv: &[f64], eval: &[usize], window: usize) -> Result<WorstCase, PortfolioError> {
    if eval.is_empty() {
        return Err(PortfolioError::NoEvaluationDates);
    }
    let mut best = WorstCase {
        value: f64::INFINITY,
        index: 0,
    };
    for &t in eval {
        if t < window || t >= mv.len() {
            return Err(PortfolioError::InsufficientHistory { index: t, window });
        }
        let r = mv[t] / mv[t - window] - 1.0;
        if r < best.value {
            best = WorstCase { value: r, index: t };
        }
    }
    Ok(best)
}

/// Empirical CDF of `returns` at `worst_case`.
pub fn implied_percentile(worst_case: f64, returns: &[f64]) -> Result<f64, PortfolioError> {
    if returns.is_empty() {
        return Err(PortfolioError::EmptyInput);
    }
    let below = returns.iter().filter(|&&r| r <= worst_case).count();
    Ok(below as f64 / returns.len() as f64)
}

/// Dated market values for a set of portfolios.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketValueSeries {
    pub dates: Vec<String>,
    pub portfolios: Vec<String>,
    /// Dates × portfolios, net values.
    pub values: Array2<f64>,
    /// Dates × portfolios, asset-side values.
    pub asset_values: Array2<f64>,
}

impl MarketValueSeries {
    /// CSV with `date` followed by `<id>` and `<id>:assets` columns. Missing
    /// `:assets` columns default to the net values.
    pub fn parse_csv(text: &str) -> Result<Self, PortfolioError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(DataError::from)?
            .iter()
            .map(str::to_string)
            .collect();
        if header.first().map(String::as_str) != Some("date") {
            return Err(DataError::MissingDateColumn(header.first().cloned().unwrap_or_default()).into());
        }
        let portfolios: Vec<String> = header[1..]
            .iter()
            .filter(|h| !h.ends_with(":assets"))
            .cloned()
            .collect();
        let net_cols: Vec<usize> = portfolios
            .iter()
            .map(|p| header.iter().position(|h| h == p).expect("from header"))
            .collect();
        let asset_cols: Vec<usize> = portfolios
            .iter()
            .zip(&net_cols)
            .map(|(p, &c)| header.iter().position(|h| *h == format!("{p}:assets")).unwrap_or(c))
            .collect();
        let mut dates = Vec::new();
        let mut net = Vec::new();
        let mut assets = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(DataError::from)?;
            let date = rec.get(0).unwrap_or_default().to_string();
            let cell = |c: usize| -> Result<f64, PortfolioError> {
                let s = rec.get(c).unwrap_or_default();
                s.parse::<f64>().map_err(|_| {
                    DataError::UnparseableCell {
                        row: dates.len() + 2,
                        factor: header[c].clone(),
                        value: s.to_string(),
                    }
                    .into()
                })
            };
            for &c in &net_cols {
                net.push(cell(c)?);
            }
            for &c in &asset_cols {
                assets.push(cell(c)?);
            }
            dates.push(date);
        }
        let shape = (dates.len(), portfolios.len());
        Ok(Self {
            values: Array2::from_shape_vec(shape, net).expect("row-major fill"),
            asset_values: Array2::from_shape_vec(shape, assets).expect("row-major fill"),
            dates,
            portfolios,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PortfolioError> {
        Self::parse_csv(&read_to_string(path.as_ref())?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PortfolioError> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| PortfolioError::Data(DataError::Csv(e));
        let mut header = vec!["date".to_string()];
        for p in &self.portfolios {
            header.push(p.clone());
            header.push(format!("{p}:assets"));
        }
        w.write_record(&header).map_err(csv_err)?;
        for (i, d) in self.dates.iter().enumerate() {
            let mut rec = vec![d.clone()];
            for j in 0..self.portfolios.len() {
                rec.push(format!("{:e}", self.values[[i, j]]));
                rec.push(format!("{:e}", self.asset_values[[i, j]]));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(PortfolioError::Io)
    }

    pub fn column(&self, portfolio: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        let j = self.portfolios.iter().position(|p| p == portfolio)?;
        Some((self.values.column(j).to_vec(), self.asset_values.column(j).to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestOptions {
    pub from: String,
    pub to: String,
    pub window: usize,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        Self {
            from: "2017-01-31".into(),
            to: "2020-09-30".into(),
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestEntry {
    pub portfolio: String,
    pub worst_case: f64,
    pub worst_case_date: String,
    pub alpha: f64,
    /// Worst case and percentile with returns measured against the asset
    /// side only.
    pub worst_case_asset_base: f64,
    pub alpha_asset_base: f64,
}

/// Worst case over month ends of `series` and its percentile under the
/// scenario returns of each portfolio.
pub fn backtest(
    series: &MarketValueSeries,
    returns: &[(String, Vec<f64>, Vec<f64>)],
    opts: &BacktestOptions,
) -> Result<Vec<BacktestEntry>, PortfolioError> {
    let eval = month_end_dates(&series.dates, &opts.from, &opts.to)?;
    let eval: Vec<usize> = eval.into_iter().filter(|&t| t >= opts.window).collect();
    let mut out = Vec::new();
    for (id, net_returns, asset_returns) in returns {
        let Some((net, assets)) = series.column(id) else {
            continue;
        };
        let wc = worst_case_backtest(&net, &eval, opts.window)?;
        let wca = worst_case_with_base(&net, &assets, &eval, opts.window)?;
        out.push(BacktestEntry {
            portfolio: id.clone(),
            worst_case: wc.value,
            worst_case_date: series.dates[wc.index].clone(),
            alpha: implied_percentile(wc.value, net_returns)?,
            worst_case_asset_base: wca.value,
            alpha_asset_base: implied_percentile(wca.value, asset_returns)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- dependence

/// Fraction of pairs with both `x[i]` and `y[i]` strictly above their own
/// empirical `q`-quantiles.
pub fn jqe(x: &[f64], y: &[f64], q: f64) -> Result<f64, PortfolioError> {
    if x.len() != y.len() {
        return Err(PortfolioError::LengthMismatch(x.len(), y.len()));
    }
    let qx = empirical_quantile(x, q)?;
    let qy = empirical_quantile(y, q)?;
    let both = x.iter().zip(y).filter(|(a, b)| **a > qx && **b > qy).count();
    Ok(both as f64 / x.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JqeMatrix {
    pub factors: Vec<String>,
    pub level: f64,
    pub values: Vec<Vec<f64>>,
}

pub fn jqe_matrix(scenarios: &ScenarioSet, q: f64) -> Result<JqeMatrix, PortfolioError> {
    let f = scenarios.factor_ids.len();
    let n = scenarios.len();
    if n == 0 {
        return Err(PortfolioError::EmptyInput);
    }
    let masks: Vec<Vec<bool>> = (0..f)
        .into_par_iter()
        .map(|j| {
            let col = scenarios.values.column(j).to_vec();
            let t = empirical_quantile(&col, q)?;
            Ok(col.iter().map(|v| *v > t).collect())
        })
        .collect::<Result<_, PortfolioError>>()?;
    let mut values = vec![vec![0.0; f]; f];
    for a in 0..f {
        for b in a..f {
            let c = masks[a].iter().zip(&masks[b]).filter(|(x, y)| **x && **y).count();
            values[a][b] = c as f64 / n as f64;
            values[b][a] = values[a][b];
        }
    }
    Ok(JqeMatrix {
        factors: scenarios.factor_ids.clone(),
        level: q,
        values,
    })
}

// ---------------------------------------------------------------- stability

/// `(Q3 - Q1) / (Q3 + Q1)` with quartiles from [`empirical_quantile`].
pub fn cqv(values: &[f64]) -> Result<f64, PortfolioError> {
    if values.len() < 4 {
        return Err(PortfolioError::TooFewRuns(values.len()));
    }
    let sorted = sorted_copy(values)?;
    let q1 = quantile_sorted(&sorted, 0.25)?;
    let q3 = quantile_sorted(&sorted, 0.75)?;
    if q1 + q3 == 0.0 {
        return Err(PortfolioError::UndefinedCqv);
    }
    Ok((q3 - q1) / (q3 + q1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityOptions {
    pub n_trainings: usize,
    pub n_generations: usize,
    pub n_scenarios: usize,
    pub base_seed: u64,
    /// Use one generation seed per training for every generation.
    pub reuse_generation_seed: bool,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            n_trainings: 4,
            n_generations: 5,
            n_scenarios: 50_000,
            base_seed: 1,
            reuse_generation_seed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub training: usize,
    pub generation: usize,
    pub training_seed: u64,
    pub generation_seed: u64,
    pub shocks: Vec<FactorShock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqvRow {
    pub factor: String,
    /// CQV of the absolute 0.5% shocks; `None` when undefined.
    pub down: Option<f64>,
    pub up: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityStudy {
    pub factors: Vec<String>,
    pub runs: Vec<StabilityRun>,
    /// `(training index, message)` for trainings that failed.
    pub failures: Vec<(usize, String)>,
    pub table: Vec<CqvRow>,
}

impl StabilityStudy {
    pub fn write_cqv_csv<W: Write>(&self, out: W) -> Result<(), PortfolioError> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| PortfolioError::Data(DataError::Csv(e));
        w.write_record(["factor", "cqv_down", "cqv_up"]).map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for row in &self.table {
            w.write_record([row.factor.clone(), fmt(row.down), fmt(row.up)])
                .map_err(csv_err)?;
        }
        w.flush().map_err(PortfolioError::Io)
    }
}

/// Trains `n_trainings` models and draws `n_generations` scenario sets from
/// each, then reports per factor the CQV of the absolute two-sided shocks.
///
/// Training `t` uses seed `derive_seed(base, [t])`; generation `g` of that
/// training uses `derive_seed(base, [t, g])`. Failed trainings are listed in
/// `failures` and leave the table empty.
pub fn stability_study(
    cfg: &GanConfig,
    data: &ReturnMatrix,
    opts: &StabilityOptions,
) -> Result<StabilityStudy, PortfolioError> {
    let scaling = data.scaling.as_ref().ok_or(PortfolioError::MissingScaling)?;
    if opts.n_trainings == 0 || opts.n_generations == 0 || opts.n_scenarios == 0 {
        return Err(PortfolioError::EmptyInput);
    }
    let factors = data.factor_ids();
    let outcomes: Vec<Result<Vec<StabilityRun>, (usize, String)>> = (0..opts.n_trainings)
        .into_par_iter()
        .map(|t| {
            let training_seed = derive_seed(opts.base_seed, &[t as u64]);
            let cfg_t = GanConfig {
                seed: training_seed,
                ..cfg.clone()
            };
            let model = train_gan(&cfg_t, data, None).map_err(|e| (t, e.to_string()))?;
            (0..opts.n_generations)
                .map(|g| {
                    let gi = if opts.reuse_generation_seed { 0 } else { g as u64 };
                    let generation_seed = derive_seed(opts.base_seed, &[t as u64, gi]);
                    let set = generate_scenarios(&model, opts.n_scenarios, scaling, generation_seed)
                        .map_err(|e| (t, e.to_string()))?;
                    let shocks = (0..factors.len())
                        .map(|j| factor_shock(&set.values.column(j).to_vec(), Sided::TwoSided))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| (t, e.to_string()))?;
                    Ok(StabilityRun {
                        training: t,
                        generation: g,
                        training_seed,
                        generation_seed,
                        shocks,
                    })
                })
                .collect()
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.extend(r),
            Err(f) => failures.push(f),
        }
    }
    let table = if failures.is_empty() {
        factors
            .iter()
            .enumerate()
            .map(|(j, id)| {
                let down: Vec<f64> = runs.iter().map(|r| r.shocks[j].down.unwrap_or(0.0).abs()).collect();
                let up: Vec<f64> = runs.iter().map(|r| r.shocks[j].up.abs()).collect();
                CqvRow {
                    factor: id.clone(),
                    down: cqv(&down).ok(),
                    up: cqv(&up).ok(),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(StabilityStudy {
        factors,
        runs,
        failures,
        table,
    })
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// `(level, value)` pairs of scenario returns relative to net base value.
    pub return_bands: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioRisk {
    pub id: String,
    pub base_value: f64,
    pub asset_base_value: f64,
    pub var_absolute: f64,
    pub risk_charge: f64,
    /// VaR over the asset-side base value.
    pub risk_charge_asset_base: f64,
    pub pnl: PnlSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockEntry {
    pub factor: String,
    #[serde(flatten)]
    pub shock: FactorShock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub stamp: Option<crate::pipeline::Stamp>,
    pub n_scenarios: usize,
    pub portfolios: Vec<PortfolioRisk>,
    pub shocks: Vec<ShockEntry>,
    pub jqe: JqeMatrix,
    pub backtest: Vec<BacktestEntry>,
    pub stability: Option<Vec<CqvRow>>,
}

fn summarize(pv: &PortfolioValues) -> Result<PnlSummary, PortfolioError> {
    let pnl = pv.pnl();
    let n = pnl.len() as f64;
    let mean = pnl.iter().sum::<f64>() / n;
    let std = (pnl.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    let returns = sorted_copy(&pv.net_returns()?)?;
    Ok(PnlSummary {
        mean,
        std,
        min: pnl.iter().copied().fold(f64::INFINITY, f64::min),
        max: pnl.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        return_bands: REPORT_BANDS
            .iter()
            .map(|&q| Ok((q, quantile_sorted(&returns, q)?)))
            .collect::<Result<_, PortfolioError>>()?,
    })
}

/// Everything needed to evaluate a book of portfolios on one scenario set.
pub struct Evaluation {
    pub values: Vec<PortfolioValues>,
    pub report: RiskReport,
}

/// Portfolio risk charges, factor shocks and the JQE matrix.
/// `sided` maps factor ids to one-sided treatment; unlisted factors are
/// two-sided.
pub fn evaluate_book(
    book: &PortfolioBook,
    scenarios: &ScenarioSet,
    valuator: &Valuator,
    one_sided: &[String],
    opts: &RiskChargeOptions,
) -> Result<Evaluation, PortfolioError> {
    for id in one_sided {
        if scenarios.column_index(id).is_none() {
            return Err(PortfolioError::UnknownFactor(id.clone()));
        }
    }
    let inst = value_scenarios(valuator, scenarios)?;
    let mut values = Vec::new();
    let mut portfolios = Vec::new();
    for pf in &book.portfolios {
        let pv = portfolio_values(pf, &inst)?;
        let rc = risk_charge_from_pnl(&pv.pnl(), pv.base, opts).map_err(|e| match e {
            PortfolioError::ZeroBaseValue(_) => PortfolioError::ZeroBaseValue(pf.id.clone()),
            e => e,
        })?;
        let asset_base = if pv.asset_base != 0.0 { pv.asset_base.abs() } else { pv.base.abs() };
        portfolios.push(PortfolioRisk {
            id: pf.id.clone(),
            base_value: pv.base,
            asset_base_value: pv.asset_base,
            var_absolute: rc.var_absolute,
            risk_charge: rc.risk_charge,
            risk_charge_asset_base: rc.var_absolute / asset_base,
            pnl: summarize(&pv)?,
        });
        values.push(pv);
    }
    let shocks = scenarios
        .factor_ids
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let sided = if one_sided.contains(id) { Sided::OneSidedUp } else { Sided::TwoSided };
            Ok(ShockEntry {
                factor: id.clone(),
                shock: factor_shock(&scenarios.values.column(j).to_vec(), sided)?,
            })
        })
        .collect::<Result<_, PortfolioError>>()?;
    Ok(Evaluation {
        values,
        report: RiskReport {
            stamp: None,
            n_scenarios: scenarios.len(),
            portfolios,
            shocks,
            jqe: jqe_matrix(scenarios, JQE_LEVEL)?,
            backtest: Vec::new(),
            stability: None,
        },
    })
}

/// Scenario returns of every portfolio, one column per portfolio, with an
/// additional `<id>:assets` column for asset-base returns.
pub fn write_returns_csv<W: Write>(values: &[PortfolioValues], out: W) -> Result<(), PortfolioError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| PortfolioError::Data(DataError::Csv(e));
    let mut header = Vec::new();
    let mut cols = Vec::new();
    for v in values {
        header.push(v.id.clone());
        header.push(format!("{}:assets", v.id));
        cols.push(v.net_returns()?);
        cols.push(if v.asset_base != 0.0 { v.asset_returns()? } else { v.net_returns()? });
    }
    w.write_record(&header).map_err(csv_err)?;
    let n = values.first().map_or(0, |v| v.scenarios.len());
    for i in 0..n {
        w.write_record(cols.iter().map(|c| format!("{:e}", c[i]))).map_err(csv_err)?;
    }
    w.flush().map_err(PortfolioError::Io)
}

/// Reads a file written by [`write_returns_csv`] as
/// `(portfolio, net returns, asset-base returns)`.
pub fn read_returns_csv(text: &str) -> Result<Vec<(String, Vec<f64>, Vec<f64>)>, PortfolioError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(DataError::from)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for rec in reader.records() {
        let rec = rec.map_err(DataError::from)?;
        for (j, cell) in rec.iter().enumerate() {
            let v = cell.parse::<f64>().map_err(|_| DataError::UnparseableCell {
                row: cols[0].len() + 2,
                factor: header[j].clone(),
                value: cell.to_string(),
            })?;
            cols[j].push(v);
        }
    }
    let mut out = Vec::new();
    for (j, h) in header.iter().enumerate() {
        if h.ends_with(":assets") {
            continue;
        }
        let assets = header
            .iter()
            .position(|x| *x == format!("{h}:assets"))
            .map_or_else(|| cols[j].clone(), |k| cols[k].clone());
        out.push((h.clone(), cols[j].clone(), assets));
    }
    Ok(out)
}

/// Plot-ready `portfolio,band,value` rows of scenario return bands.
pub fn write_band_csv<W: Write>(report: &RiskReport, out: W) -> Result<(), PortfolioError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| PortfolioError::Data(DataError::Csv(e));
    w.write_record(["portfolio", "band", "value"]).map_err(csv_err)?;
    for p in &report.portfolios {
        for (q, v) in &p.pnl.return_bands {
            w.write_record([p.id.clone(), format!("{q}"), format!("{v:e}")])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(PortfolioError::Io)
}
