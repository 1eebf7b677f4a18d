//! Instrument valuation under one-year scenario shifts.

pub mod credit;
pub mod curve;

use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::read_to_string;

pub use credit::{migration_adjustment, MigrationMatrix};
pub use curve::{extrapolate_curve, YieldCurve, YieldCurveSpec, CURVE_HORIZON};

#[derive(Debug, Error)]
pub enum ValuationError {
    #[error("total yield {0} is at or below -100%")]
    DegenerateYield(f64),
    #[error("rating `{0}` not in migration matrix")]
    RatingNotFound(String),
    #[error("base spread {0} must be positive for migration scaling")]
    NonPositiveBaseSpread(f64),
    #[error("invalid migration matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid curve specification: {0}")]
    InvalidCurve(String),
    #[error("Smith-Wilson system is not invertible")]
    SingularFit,
    #[error("no alpha reaches the convergence tolerance")]
    NoConvergence,
    #[error("maturity {maturity} outside curve horizon {horizon}")]
    BeyondCurve { maturity: f64, horizon: f64 },
    #[error("instrument `{instrument}` references unknown factor `{factor}`")]
    UnresolvedFactor { instrument: String, factor: String },
    #[error("invalid instrument `{0}`: {1}")]
    InvalidInstrument(String, String),
    #[error("{0}")]
    Config(String),
}

/// Price of a zero-coupon bond per unit notional:
/// `1 / (1 + r0 + dr + s0 + ds)^tau`.
pub fn zero_coupon_value(r0: f64, dr: f64, s0: f64, ds: f64, tau: f64) -> Result<f64, ValuationError> {
    let base = 1.0 + r0 + dr + s0 + ds;
    if !(base > 0.0) {
        return Err(ValuationError::DegenerateYield(base - 1.0));
    }
    Ok(base.powf(-tau))
}

/// `base_mv * (1 + relative_shift)`.
pub fn scale_market_value(base_mv: f64, relative_shift: f64) -> f64 {
    base_mv * (1.0 + relative_shift)
}

/// Present value of `notional` paid at `duration` years.
pub fn discount_liability(notional: f64, duration: f64, curve: &YieldCurve) -> Result<f64, ValuationError> {
    Ok(notional * curve.discount_factor(duration)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    ZeroCouponBond,
    Equity,
    Property,
    LiabilityLeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instrument {
    pub id: String,
    pub kind: InstrumentKind,
    /// Bond maturity or liability duration, in years.
    #[serde(default)]
    pub maturity: Option<f64>,
    #[serde(default)]
    pub rate_factor: Option<String>,
    #[serde(default)]
    pub spread_factor: Option<String>,
    #[serde(default)]
    pub base_rate: f64,
    #[serde(default)]
    pub base_spread: f64,
    /// Rating used for migration; for sovereign bonds the country rating.
    #[serde(default)]
    pub rating: Option<String>,
    /// Set for sovereign issuers.
    #[serde(default)]
    pub issuer_country: Option<String>,
    /// Index factor for equity and property.
    #[serde(default)]
    pub factor: Option<String>,
    pub base_market_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveShift {
    pub maturity: f64,
    pub factor: String,
}

/// Instruments plus the rate factors that move the liability curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Universe {
    #[serde(rename = "instrument")]
    pub instruments: Vec<Instrument>,
    #[serde(default, rename = "curve_shift")]
    pub curve_shifts: Vec<CurveShift>,
}

impl Universe {
    pub fn from_toml_str(text: &str) -> Result<Self, ValuationError> {
        let u: Self = toml::from_str(text).map_err(|e| ValuationError::Config(e.to_string()))?;
        for (i, inst) in u.instruments.iter().enumerate() {
            if u.instruments[..i].iter().any(|o| o.id == inst.id) {
                return Err(ValuationError::Config(format!("duplicate instrument `{}`", inst.id)));
            }
        }
        Ok(u)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ValuationError> {
        let text = read_to_string(path.as_ref()).map_err(|e| ValuationError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.instruments.iter().position(|i| i.id == id)
    }
}

impl YieldCurveSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ValuationError> {
        let spec: Self = toml::from_str(text).map_err(|e| ValuationError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ValuationError> {
        let text = read_to_string(path.as_ref()).map_err(|e| ValuationError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// Re-extrapolates the liability curve after shifting its liquid rates by
/// scenario values, linearly interpolated between the mapped maturities and
/// held flat beyond them.
#[derive(Debug, Clone)]
pub struct CurveBuilder {
    spec: YieldCurveSpec,
    /// `(maturity, scenario column)`, sorted by maturity.
    shifts: Vec<(f64, usize)>,
}

impl CurveBuilder {
    pub fn new(
        spec: YieldCurveSpec,
        curve_shifts: &[CurveShift],
        factor_ids: &[String],
    ) -> Result<Self, ValuationError> {
        spec.validate()?;
        let mut shifts = curve_shifts
            .iter()
            .map(|s| {
                let col = factor_ids.iter().position(|f| *f == s.factor).ok_or_else(|| {
                    ValuationError::UnresolvedFactor {
                        instrument: "<curve>".into(),
                        factor: s.factor.clone(),
                    }
                })?;
                Ok((s.maturity, col))
            })
            .collect::<Result<Vec<_>, ValuationError>>()?;
        shifts.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { spec, shifts })
    }

    pub fn spec(&self) -> &YieldCurveSpec {
        &self.spec
    }

    pub fn shift_at(&self, maturity: f64, row: ArrayView1<f64>) -> f64 {
        let Some(&(first_u, first_c)) = self.shifts.first() else {
            return 0.0;
        };
        if maturity <= first_u {
            return row[first_c];
        }
        for pair in self.shifts.windows(2) {
            let ((u0, c0), (u1, c1)) = (pair[0], pair[1]);
            if maturity <= u1 {
                let w = (maturity - u0) / (u1 - u0);
                return row[c0] * (1.0 - w) + row[c1] * w;
            }
        }
        row[self.shifts.last().expect("non-empty").1]
    }

    pub fn base(&self) -> Result<YieldCurve, ValuationError> {
        extrapolate_curve(&self.spec)
    }

    pub fn build(&self, row: ArrayView1<f64>) -> Result<YieldCurve, ValuationError> {
        extrapolate_curve(&self.spec.shifted(|u| self.shift_at(u, row)))
    }
}

#[derive(Debug, Clone)]
enum Recipe {
    Bond {
        tau: f64,
        rate_col: Option<usize>,
        spread_col: Option<usize>,
        base_price: f64,
    },
    Scaled {
        col: usize,
    },
    Liability {
        duration: f64,
        base_discount: f64,
    },
}

/// Instrument universe resolved against a scenario layout.
#[derive(Debug, Clone)]
pub struct Valuator {
    universe: Universe,
    recipes: Vec<Recipe>,
    migration: Option<MigrationMatrix>,
    curve: Option<CurveBuilder>,
}

impl Valuator {
    pub fn new(
        universe: Universe,
        factor_ids: &[String],
        migration: Option<MigrationMatrix>,
        curve_spec: Option<YieldCurveSpec>,
    ) -> Result<Self, ValuationError> {
        let has_liability = universe
            .instruments
            .iter()
            .any(|i| i.kind == InstrumentKind::LiabilityLeg);
        let curve = match (curve_spec, has_liability) {
            (Some(spec), true) => Some(CurveBuilder::new(spec, &universe.curve_shifts, factor_ids)?),
            (None, true) => {
                return Err(ValuationError::Config(
                    "liability instruments need a curve specification".into(),
                ))
            }
            (_, false) => None,
        };
        let base_curve = curve.as_ref().map(CurveBuilder::base).transpose()?;

        let resolve = |inst: &Instrument, f: &Option<String>| -> Result<Option<usize>, ValuationError> {
            f.as_ref()
                .map(|id| {
                    factor_ids.iter().position(|x| x == id).ok_or_else(|| {
                        ValuationError::UnresolvedFactor {
                            instrument: inst.id.clone(),
                            factor: id.clone(),
                        }
                    })
                })
                .transpose()
        };
        let invalid = |inst: &Instrument, msg: &str| ValuationError::InvalidInstrument(inst.id.clone(), msg.into());

        let mut recipes = Vec::with_capacity(universe.instruments.len());
        for inst in &universe.instruments {
            if !inst.base_market_value.is_finite() {
                return Err(invalid(inst, "non-finite base market value"));
            }
            let recipe = match inst.kind {
                InstrumentKind::ZeroCouponBond => {
                    let tau = inst.maturity.filter(|t| *t > 0.0).ok_or_else(|| invalid(inst, "needs a positive maturity"))?;
                    if let Some(rating) = &inst.rating {
                        let mm = migration
                            .as_ref()
                            .ok_or_else(|| invalid(inst, "rated bond needs a migration matrix"))?;
                        mm.rating_index(rating)?;
                        if !(inst.base_spread > 0.0) {
                            return Err(ValuationError::NonPositiveBaseSpread(inst.base_spread));
                        }
                    }
                    Recipe::Bond {
                        tau,
                        rate_col: resolve(inst, &inst.rate_factor)?,
                        spread_col: resolve(inst, &inst.spread_factor)?,
                        base_price: zero_coupon_value(inst.base_rate, 0.0, inst.base_spread, 0.0, tau)?,
                    }
                }
                InstrumentKind::Equity | InstrumentKind::Property => Recipe::Scaled {
                    col: resolve(inst, &inst.factor)?.ok_or_else(|| invalid(inst, "needs an index factor"))?,
                },
                InstrumentKind::LiabilityLeg => {
                    let duration = inst.maturity.filter(|t| *t > 0.0).ok_or_else(|| invalid(inst, "needs a positive duration"))?;
                    let base = base_curve.as_ref().expect("curve present with liabilities");
                    Recipe::Liability {
                        duration,
                        base_discount: base.discount_factor(duration)?,
                    }
                }
            };
            recipes.push(recipe);
        }
        Ok(Self {
            universe,
            recipes,
            migration,
            curve,
        })
    }

    pub fn universe(&self) -> &Universe {
        &self.universe
    }

    pub fn needs_curve(&self) -> bool {
        self.curve.is_some()
    }

    /// Value of instrument `index` in one scenario. `curve` must be the
    /// scenario curve when the instrument is a liability.
    pub fn instrument_value(
        &self,
        index: usize,
        row: ArrayView1<f64>,
        curve: Option<&YieldCurve>,
    ) -> Result<f64, ValuationError> {
        let inst = &self.universe.instruments[index];
        match &self.recipes[index] {
            Recipe::Bond {
                tau,
                rate_col,
                spread_col,
                base_price,
            } => {
                let dr = rate_col.map_or(0.0, |c| row[c]);
                let ds = spread_col.map_or(0.0, |c| row[c]);
                let price = zero_coupon_value(inst.base_rate, dr, inst.base_spread, ds, *tau)?;
                let multiplier = match (&inst.rating, &self.migration) {
                    (Some(rating), Some(mm)) => {
                        migration_adjustment(inst.base_spread, inst.base_spread + ds, rating, mm)?
                    }
                    _ => 1.0,
                };
                Ok(inst.base_market_value * (price / base_price) * multiplier)
            }
            Recipe::Scaled { col } => Ok(scale_market_value(inst.base_market_value, row[*col])),
            Recipe::Liability {
                duration,
                base_discount,
            } => {
                let curve = curve.ok_or_else(|| {
                    ValuationError::Config("liability valuation needs the scenario curve".into())
                })?;
                let notional = inst.base_market_value / base_discount;
                discount_liability(notional, *duration, curve)
            }
        }
    }

    /// Values of all instruments in one scenario.
    pub fn value_row(&self, row: ArrayView1<f64>) -> Result<Vec<f64>, ValuationError> {
        let curve = self.curve.as_ref().map(|c| c.build(row)).transpose()?;
        (0..self.recipes.len())
            .map(|i| self.instrument_value(i, row, curve.as_ref()))
            .collect()
    }
}
