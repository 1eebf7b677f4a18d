//! Synthetic factor histories for demos and tests.

use std::fs;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_time_series, DataError, FactorDecl, FactorSchema, ReturnKind, TimeSeriesSet};
use crate::rng::{self, Stream};

/// One simulated factor.
///
/// Relative factors follow a geometric random walk
/// `s[t+1] = s[t] * exp(drift - vol^2 / 2 + vol * z)`; absolute factors an
/// arithmetic one `s[t+1] = s[t] + drift + vol * z`. `drift` and `vol` are
/// daily.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFactor {
    pub id: String,
    pub kind: ReturnKind,
    pub start: f64,
    #[serde(default)]
    pub drift: f64,
    pub vol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    /// Every pair of daily shocks has the same correlation.
    Equi(f64),
    /// Full correlation matrix, row-major.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub factors: Vec<SyntheticFactor>,
    /// Number of business days, including the start date.
    pub days: usize,
    pub start_date: String,
    pub correlation: Correlation,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `n` factors alternating between a rate-like absolute factor and an
    /// index-like relative factor.
    pub fn standard(n: usize, days: usize, correlation: f64, seed: u64) -> Self {
        let factors = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    SyntheticFactor {
                        id: format!("rate{}", i / 2 + 1),
                        kind: ReturnKind::Absolute,
                        start: 0.01,
                        drift: 0.0,
                        vol: 0.0005,
                    }
                } else {
                    SyntheticFactor {
                        id: format!("index{}", i / 2 + 1),
                        kind: ReturnKind::Relative,
                        start: 100.0,
                        drift: 0.0002,
                        vol: 0.01,
                    }
                }
            })
            .collect();
        Self {
            factors,
            days,
            start_date: "2002-01-01".into(),
            correlation: Correlation::Equi(correlation),
            seed,
        }
    }

    pub fn schema(&self) -> FactorSchema {
        FactorSchema::new(
            self.factors
                .iter()
                .map(|f| FactorDecl::new(f.id.clone(), f.kind))
                .collect(),
        )
    }

    fn correlation_matrix(&self) -> Result<DMatrix<f64>, DataError> {
        let n = self.factors.len();
        match &self.correlation {
            Correlation::Equi(rho) => {
                let lo = if n > 1 { -1.0 / (n as f64 - 1.0) } else { -1.0 };
                if !(*rho > lo && *rho < 1.0) && n > 1 {
                    return Err(DataError::Schema(format!("correlation {rho} not positive definite")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { *rho }))
            }
            Correlation::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(DataError::Schema("correlation matrix shape".into()));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

/// Consecutive weekdays starting at the first weekday on or after `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.checked_add_days(Days::new(1)).expect("date in range");
    }
    out
}

pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<TimeSeriesSet, DataError> {
    let n = spec.factors.len();
    if n == 0 {
        return Err(DataError::Schema("no factors".into()));
    }
    if spec.days < 2 {
        return Err(DataError::Schema("need at least two days".into()));
    }
    for f in &spec.factors {
        if !(f.vol >= 0.0 && f.vol.is_finite() && f.drift.is_finite() && f.start.is_finite()) {
            return Err(DataError::Schema(format!("bad parameters for `{}`", f.id)));
        }
        if f.kind == ReturnKind::Relative && !(f.start > 0.0) {
            return Err(DataError::Schema(format!("relative factor `{}` needs a positive start", f.id)));
        }
    }
    let start = NaiveDate::parse_from_str(&spec.start_date, "%Y-%m-%d").map_err(|_| DataError::BadDate {
        row: 0,
        value: spec.start_date.clone(),
    })?;
    let chol = spec
        .correlation_matrix()?
        .cholesky()
        .ok_or_else(|| DataError::Schema("correlation matrix not positive definite".into()))?
        .unpack();

    let mut rng = rng::stream(spec.seed, Stream::Synthetic);
    let mut values = Array2::zeros((spec.days, n));
    let mut level: Vec<f64> = spec.factors.iter().map(|f| f.start).collect();
    let mut z = vec![0.0; n];
    for t in 0..spec.days {
        if t > 0 {
            z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            for (i, f) in spec.factors.iter().enumerate() {
                let shock: f64 = (0..=i).map(|k| chol[(i, k)] * z[k]).sum();
                level[i] = match f.kind {
                    ReturnKind::Relative => {
                        level[i] * (f.drift - 0.5 * f.vol * f.vol + f.vol * shock).exp()
                    }
                    ReturnKind::Absolute => level[i] + f.drift + f.vol * shock,
                };
            }
        }
        values.row_mut(t).assign(&ndarray::ArrayView1::from(level.as_slice()));
    }
    let dates = business_days(start, spec.days)
        .iter()
        .map(|d| d.format("%Y-%m-%d").to_string())
        .collect();
    TimeSeriesSet::new(spec.schema().factors, dates, values)
}

/// Writes `data.csv` and `schema.toml` into `dir`.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<TimeSeriesSet, DataError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let ts = make_synthetic_dataset(spec)?;
    let data_path = dir.join("data.csv");
    let file = fs::File::create(&data_path).map_err(io(&data_path))?;
    write_time_series(&ts, std::io::BufWriter::new(file))?;
    let schema_path = dir.join("schema.toml");
    fs::write(&schema_path, spec.schema().to_toml_string()).map_err(io(&schema_path))?;
    Ok(ts)
}
