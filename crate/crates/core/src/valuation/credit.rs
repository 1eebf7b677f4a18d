//! Rating migration and default scaling for credit-risky bonds.

use serde::{Deserialize, Serialize};

use super::ValuationError;

/// One-year rating transition probabilities. Ratings run from best to worst;
/// each row has one entry per rating followed by the default probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationMatrix {
    pub ratings: Vec<String>,
    pub probabilities: Vec<Vec<f64>>,
    pub recovery_rate: f64,
}

impl MigrationMatrix {
    pub fn new(
        ratings: Vec<String>,
        probabilities: Vec<Vec<f64>>,
        recovery_rate: f64,
    ) -> Result<Self, ValuationError> {
        let mm = Self {
            ratings,
            probabilities,
            recovery_rate,
        };
        mm.validate()?;
        Ok(mm)
    }

    fn validate(&self) -> Result<(), ValuationError> {
        let r = self.ratings.len();
        let bad = |m: String| Err(ValuationError::InvalidMatrix(m));
        if r == 0 {
            return bad("no ratings".into());
        }
        if self.probabilities.len() != r {
            return bad(format!("{} rows for {r} ratings", self.probabilities.len()));
        }
        for (name, row) in self.ratings.iter().zip(&self.probabilities) {
            if row.len() != r + 1 {
                return bad(format!("row {name} has {} entries, expected {}", row.len(), r + 1));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("row {name} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("row {name} sums to {sum}"));
            }
        }
        if !(0.0..=1.0).contains(&self.recovery_rate) {
            return bad(format!("recovery rate {}", self.recovery_rate));
        }
        Ok(())
    }

    /// Reads `rating,<r1>,...,<rR>,default` CSV rows.
    pub fn from_csv(text: &str, recovery_rate: f64) -> Result<Self, ValuationError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| ValuationError::InvalidMatrix(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.len() < 3 {
            return Err(ValuationError::InvalidMatrix("header too short".into()));
        }
        let columns = &header[1..header.len() - 1];
        let mut ratings = Vec::new();
        let mut probabilities = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| ValuationError::InvalidMatrix(e.to_string()))?;
            let name = rec.get(0).unwrap_or_default().to_string();
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| ValuationError::InvalidMatrix(format!("row {name}: `{c}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            ratings.push(name);
            probabilities.push(row);
        }
        if ratings != columns {
            return Err(ValuationError::InvalidMatrix(
                "row labels must match the rating columns".into(),
            ));
        }
        Self::new(ratings, probabilities, recovery_rate)
    }

    pub fn rating_index(&self, rating: &str) -> Result<usize, ValuationError> {
        self.ratings
            .iter()
            .position(|r| r == rating)
            .ok_or_else(|| ValuationError::RatingNotFound(rating.to_string()))
    }

    pub fn default_probability(&self, rating: &str) -> Result<f64, ValuationError> {
        let i = self.rating_index(rating)?;
        Ok(*self.probabilities[i].last().expect("validated row"))
    }

    /// Transition row after scaling downgrade and default mass by `sigma`.
    ///
    /// Entries worse than `rating` are multiplied by `sigma`; if their total
    /// exceeds one they are renormalized to one. The remaining mass is spread
    /// over the stay and upgrade entries in proportion to their original
    /// weights.
    pub fn scaled_row(&self, rating: &str, sigma: f64) -> Result<Vec<f64>, ValuationError> {
        let i = self.rating_index(rating)?;
        let row = &self.probabilities[i];
        let sigma = sigma.max(0.0);
        let mut out = row.clone();
        let mut down: f64 = 0.0;
        for p in &mut out[i + 1..] {
            *p *= sigma;
            down += *p;
        }
        if down > 1.0 {
            for p in &mut out[i + 1..] {
                *p /= down;
            }
            down = 1.0;
        }
        let keep = 1.0 - down;
        let original_keep: f64 = row[..=i].iter().sum();
        if original_keep > 0.0 {
            for p in &mut out[..=i] {
                *p *= keep / original_keep;
            }
        } else {
            out[..=i].iter_mut().for_each(|p| *p = 0.0);
            out[i] = keep;
        }
        Ok(out)
    }
}

/// Value multiplier `1 - PD' * (1 - recovery)` where `PD'` is the default
/// probability after scaling the downgrade mass by
/// `sigma = max(scenario_spread / base_spread, 0)`.
pub fn migration_adjustment(
    base_spread: f64,
    scenario_spread: f64,
    rating: &str,
    mm: &MigrationMatrix,
) -> Result<f64, ValuationError> {
    if !(base_spread > 0.0) {
        return Err(ValuationError::NonPositiveBaseSpread(base_spread));
    }
    let sigma = (scenario_spread / base_spread).max(0.0);
    let row = mm.scaled_row(rating, sigma)?;
    let pd = *row.last().expect("validated row");
    Ok(1.0 - pd * (1.0 - mm.recovery_rate))
}
