//! Smith–Wilson extrapolation of the risk-free zero curve towards an
//! ultimate forward rate.
//!
//! Inputs are annually compounded zero rates at liquid maturities. Internally
//! prices are fitted exactly with the Wilson kernel
//!
//! `W(t, u) = e^{-w (t + u)} (a min(t,u) - 0.5 e^{-a max(t,u)} (e^{a min(t,u)} - e^{-a min(t,u)}))`
//!
//! with `w = ln(1 + UFR)`, and the resulting discount function is sampled on
//! an annual grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ValuationError;

/// Last maturity of the annual output grid, in years.
pub const CURVE_HORIZON: usize = 121;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YieldCurveSpec {
    /// `(maturity in years, annual zero rate)` pairs, maturities increasing.
    pub liquid_rates: Vec<(f64, f64)>,
    /// Credit-risk adjustment deducted from every liquid rate.
    pub cra: f64,
    /// Last liquid point; inputs beyond it are ignored.
    pub llp: f64,
    pub ufr: f64,
    pub convergence_maturity: f64,
    /// Fixed convergence speed. When absent it is calibrated.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_alpha_floor")]
    pub alpha_floor: f64,
    /// Allowed gap between the one-year forward at the convergence maturity
    /// and the UFR.
    #[serde(default = "default_tolerance")]
    pub convergence_tolerance: f64,
}

fn default_alpha_floor() -> f64 {
    0.05
}

fn default_tolerance() -> f64 {
    1e-4
}

impl YieldCurveSpec {
    /// EUR parameters at 2019-12-31: UFR 3.9%, CRA 10bp, LLP 20y, convergence
    /// at 60y. The liquid rates approximate the EUR swap curve on that date.
    pub fn eur_2019() -> Self {
        let rates = [
            (1.0, -0.0032),
            (2.0, -0.0030),
            (3.0, -0.0026),
            (4.0, -0.0021),
            (5.0, -0.0015),
            (6.0, -0.0009),
            (7.0, -0.0003),
            (8.0, 0.0003),
            (9.0, 0.0009),
            (10.0, 0.0015),
            (12.0, 0.0026),
            (15.0, 0.0038),
            (20.0, 0.0047),
        ];
        Self {
            liquid_rates: rates.to_vec(),
            cra: 0.001,
            llp: 20.0,
            ufr: 0.039,
            convergence_maturity: 60.0,
            alpha: None,
            alpha_floor: default_alpha_floor(),
            convergence_tolerance: default_tolerance(),
        }
    }

    pub fn validate(&self) -> Result<(), ValuationError> {
        let bad = |m: &str| Err(ValuationError::InvalidCurve(m.to_string()));
        if self.liquid_rates.iter().all(|(u, _)| *u > self.llp) {
            return bad("no liquid rates up to the last liquid point");
        }
        if self.liquid_rates.iter().any(|(u, r)| !(*u > 0.0) || !r.is_finite()) {
            return bad("maturities must be positive and rates finite");
        }
        if self.liquid_rates.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("maturities must be strictly increasing");
        }
        if self.llp > self.convergence_maturity {
            return bad("last liquid point beyond convergence maturity");
        }
        if self.convergence_maturity < 1.0 || self.convergence_maturity > CURVE_HORIZON as f64 {
            return bad("convergence maturity outside the curve grid");
        }
        if !(self.ufr > -1.0) || !self.cra.is_finite() {
            return bad("invalid UFR or CRA");
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return bad("alpha must be positive");
            }
        }
        if !(self.alpha_floor > 0.0) || !(self.convergence_tolerance > 0.0) {
            return bad("alpha floor and tolerance must be positive");
        }
        Ok(())
    }

    /// Copy with `shift(maturity)` added to every liquid rate.
    pub fn shifted(&self, shift: impl Fn(f64) -> f64) -> Self {
        Self {
            liquid_rates: self
                .liquid_rates
                .iter()
                .map(|&(u, r)| (u, r + shift(u)))
                .collect(),
            ..self.clone()
        }
    }
}

/// Exact Smith–Wilson fit for one alpha.
#[derive(Debug, Clone)]
struct SmithWilsonFit {
    omega: f64,
    alpha: f64,
    maturities: Vec<f64>,
    zeta: Vec<f64>,
}

fn wilson(t: f64, u: f64, omega: f64, alpha: f64) -> f64 {
    let lo = t.min(u);
    let hi = t.max(u);
    (-omega * (t + u)).exp()
        * (alpha * lo - 0.5 * (-alpha * hi).exp() * ((alpha * lo).exp() - (-alpha * lo).exp()))
}

impl SmithWilsonFit {
    fn new(maturities: &[f64], prices: &[f64], ufr: f64, alpha: f64) -> Result<Self, ValuationError> {
        let omega = (1.0 + ufr).ln();
        let n = maturities.len();
        let w = DMatrix::from_fn(n, n, |i, j| wilson(maturities[i], maturities[j], omega, alpha));
        let rhs = DVector::from_fn(n, |i, _| prices[i] - (-omega * maturities[i]).exp());
        let zeta = w
            .cholesky()
            .ok_or(ValuationError::SingularFit)?
            .solve(&rhs);
        if zeta.iter().any(|z| !z.is_finite()) {
            return Err(ValuationError::SingularFit);
        }
        Ok(Self {
            omega,
            alpha,
            maturities: maturities.to_vec(),
            zeta: zeta.iter().copied().collect(),
        })
    }

    fn price(&self, t: f64) -> f64 {
        (-self.omega * t).exp()
            + self
                .maturities
                .iter()
                .zip(&self.zeta)
                .map(|(&u, &z)| z * wilson(t, u, self.omega, self.alpha))
                .sum::<f64>()
    }

    /// Annually compounded one-year forward ending at `t`.
    fn forward(&self, t: f64) -> f64 {
        self.price(t - 1.0) / self.price(t) - 1.0
    }
}

/// Discount factors and zero rates on the annual grid `1..=CURVE_HORIZON`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldCurve {
    pub alpha: f64,
    /// `discount[k]` is the price of one unit paid in `k + 1` years.
    pub discount: Vec<f64>,
}

impl YieldCurve {
    /// Curve from annual zero rates for years `1..=rates.len()`.
    pub fn from_zero_rates(rates: &[f64]) -> Self {
        Self {
            alpha: f64::NAN,
            discount: rates
                .iter()
                .enumerate()
                .map(|(k, r)| (1.0 + r).powi(k as i32 + 1).recip())
                .collect(),
        }
    }

    pub fn flat(rate: f64) -> Self {
        Self::from_zero_rates(&vec![rate; CURVE_HORIZON])
    }

    pub fn horizon(&self) -> f64 {
        self.discount.len() as f64
    }

    /// Annual zero rate for integer maturity `year >= 1`.
    pub fn zero_rate(&self, year: usize) -> Option<f64> {
        let p = *self.discount.get(year.checked_sub(1)?)?;
        Some(p.powf(-1.0 / year as f64) - 1.0)
    }

    /// Discount factor at `t` years, log-linear between grid points (and
    /// between 1 at `t = 0` and the first grid point).
    pub fn discount_factor(&self, t: f64) -> Result<f64, ValuationError> {
        if !(t >= 0.0) || t > self.horizon() {
            return Err(ValuationError::BeyondCurve {
                maturity: t,
                horizon: self.horizon(),
            });
        }
        if t == 0.0 {
            return Ok(1.0);
        }
        let lower = t.floor() as usize;
        let frac = t - lower as f64;
        let log_at = |k: usize| if k == 0 { 0.0 } else { self.discount[k - 1].ln() };
        if frac == 0.0 {
            return Ok(if lower == 0 { 1.0 } else { self.discount[lower - 1] });
        }
        let ln = log_at(lower) * (1.0 - frac) + log_at(lower + 1) * frac;
        Ok(ln.exp())
    }

    /// One-year forward from `year - 1` to `year`.
    pub fn forward_rate(&self, year: usize) -> Option<f64> {
        let end = *self.discount.get(year.checked_sub(1)?)?;
        let start = if year == 1 { 1.0 } else { self.discount[year - 2] };
        Some(start / end - 1.0)
    }
}

fn liquid_prices(spec: &YieldCurveSpec) -> Result<(Vec<f64>, Vec<f64>), ValuationError> {
    let mut maturities = Vec::new();
    let mut prices = Vec::new();
    for &(u, r) in spec.liquid_rates.iter().filter(|(u, _)| *u <= spec.llp) {
        let base = 1.0 + r - spec.cra;
        if !(base > 0.0) {
            return Err(ValuationError::DegenerateYield(r - spec.cra));
        }
        maturities.push(u);
        prices.push(base.powf(-u));
    }
    Ok((maturities, prices))
}

fn converged(fit: &SmithWilsonFit, spec: &YieldCurveSpec) -> bool {
    (fit.forward(spec.convergence_maturity) - spec.ufr).abs() < spec.convergence_tolerance
}

/// Smallest alpha not below the floor that brings the forward at the
/// convergence maturity within tolerance of the UFR, found by bisection.
fn calibrate(
    maturities: &[f64],
    prices: &[f64],
    spec: &YieldCurveSpec,
) -> Result<SmithWilsonFit, ValuationError> {
    let fit = |a: f64| SmithWilsonFit::new(maturities, prices, spec.ufr, a);
    let floor = fit(spec.alpha_floor)?;
    if converged(&floor, spec) {
        return Ok(floor);
    }
    let mut lo = spec.alpha_floor;
    let mut hi = lo;
    let mut hi_fit = floor;
    while !converged(&hi_fit, spec) {
        lo = hi;
        hi *= 2.0;
        if hi > 100.0 {
            return Err(ValuationError::NoConvergence);
        }
        hi_fit = fit(hi)?;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if hi - lo < 1e-10 {
            break;
        }
        let mid_fit = fit(mid)?;
        if converged(&mid_fit, spec) {
            hi = mid;
            hi_fit = mid_fit;
        } else {
            lo = mid;
        }
    }
    Ok(hi_fit)
}

pub fn extrapolate_curve(spec: &YieldCurveSpec) -> Result<YieldCurve, ValuationError> {
    spec.validate()?;
    let (maturities, prices) = liquid_prices(spec)?;
    let fit = match spec.alpha {
        Some(a) => SmithWilsonFit::new(&maturities, &prices, spec.ufr, a)?,
        None => calibrate(&maturities, &prices, spec)?,
    };
    let discount: Vec<f64> = (1..=CURVE_HORIZON).map(|k| fit.price(k as f64)).collect();
    if discount.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(ValuationError::SingularFit);
    }
    Ok(YieldCurve {
        alpha: fit.alpha,
        discount,
    })
}

/// Fitted annual zero rate at an arbitrary maturity, bypassing the grid.
pub fn fitted_zero_rate(spec: &YieldCurveSpec, curve: &YieldCurve, t: f64) -> Result<f64, ValuationError> {
    let (maturities, prices) = liquid_prices(spec)?;
    let fit = SmithWilsonFit::new(&maturities, &prices, spec.ufr, curve.alpha)?;
    Ok(fit.price(t).powf(-1.0 / t) - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_curve_at_ufr_stays_flat() {
        let ufr = 0.039;
        let spec = YieldCurveSpec {
            liquid_rates: vec![(1.0, ufr), (5.0, ufr), (10.0, ufr), (20.0, ufr)],
            cra: 0.0,
            ..YieldCurveSpec::eur_2019()
        };
        let curve = extrapolate_curve(&spec).unwrap();
        for year in 1..=CURVE_HORIZON {
            assert!((curve.zero_rate(year).unwrap() - ufr).abs() < 1e-6);
        }
        assert_eq!(curve.alpha, 0.05);
    }

    #[test]
    fn exact_fit_and_convergence_for_eur_2019() {
        let spec = YieldCurveSpec::eur_2019();
        assert_eq!((spec.ufr, spec.cra, spec.llp, spec.convergence_maturity), (0.039, 0.001, 20.0, 60.0));
        let curve = extrapolate_curve(&spec).unwrap();
        for &(u, r) in &spec.liquid_rates {
            let fitted = fitted_zero_rate(&spec, &curve, u).unwrap();
            assert!((fitted - (r - spec.cra)).abs() < 1e-8, "{u}: {fitted} vs {r}");
            // integer maturities are grid points too
            let grid = curve.zero_rate(u as usize).unwrap();
            assert!((grid - (r - spec.cra)).abs() < 1e-8);
        }
        let f60 = curve.forward_rate(60).unwrap();
        assert!((f60 - 0.039).abs() < 1e-4, "forward at 60y {f60}");
        assert!(curve.alpha >= 0.05);
    }

    #[test]
    fn interpolation_and_bounds() {
        let curve = YieldCurve::flat(0.02);
        assert_eq!(curve.discount_factor(0.0).unwrap(), 1.0);
        let d = curve.discount_factor(13.1).unwrap();
        assert!((d - 1.02f64.powf(-13.1)).abs() < 1e-14);
        assert!(curve.discount_factor(122.0).is_err());
        assert!(curve.discount_factor(-1.0).is_err());
        assert!((curve.forward_rate(1).unwrap() - 0.02).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = YieldCurveSpec::eur_2019();
        spec.liquid_rates[3].0 = 2.0;
        assert!(extrapolate_curve(&spec).is_err());
        let mut spec = YieldCurveSpec::eur_2019();
        spec.llp = 70.0;
        assert!(extrapolate_curve(&spec).is_err());
        let mut spec = YieldCurveSpec::eur_2019();
        spec.liquid_rates[0].1 = -1.5;
        assert!(matches!(
            extrapolate_curve(&spec),
            Err(ValuationError::DegenerateYield(_))
        ));
    }
}
