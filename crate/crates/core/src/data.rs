//! Time-series ingest: CSV loading, gap repair, rolling one-year returns and
//! per-factor normalization.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trading days per year used for rolling returns unless overridden.
pub const DEFAULT_WINDOW: usize = 258;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown factor id `{0}` in data header")]
    UnknownFactor(String),
    #[error("factor `{0}` declared in schema but absent from data")]
    MissingFactor(String),
    #[error("first header column must be `date`, found `{0}`")]
    MissingDateColumn(String),
    #[error("duplicate date {0}")]
    DuplicateDate(String),
    #[error("dates not increasing: {prev} followed by {next}")]
    NonMonotoneDates { prev: String, next: String },
    #[error("row {row}: cannot parse date `{value}`")]
    BadDate { row: usize, value: String },
    #[error("row {row}, factor `{factor}`: cannot parse `{value}`")]
    UnparseableCell {
        row: usize,
        factor: String,
        value: String,
    },
    #[error("factor `{0}` starts with a missing value")]
    LeadingGap(String),
    #[error("relative factor `{factor}` has non-positive level {value} at row {row}")]
    NonPositiveLevel {
        factor: String,
        row: usize,
        value: f64,
    },
    #[error("{rows} observations are not enough for a {window}-day window")]
    WindowTooLarge { rows: usize, window: usize },
    #[error("factor `{0}` has zero variance")]
    DegenerateFactor(String),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// How a factor's one-year change is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnKind {
    /// `s[t+w] - s[t]`, used for interest rates and spreads.
    Absolute,
    /// `s[t+w] / s[t] - 1`, used for equity, property and FX.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDecl {
    pub id: String,
    pub kind: ReturnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl FactorDecl {
    pub fn new(id: impl Into<String>, kind: ReturnKind) -> Self {
        Self {
            id: id.into(),
            kind,
            label: None,
        }
    }
}

/// Ordered factor declarations, read from a TOML file of `[[factor]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSchema {
    #[serde(rename = "factor")]
    pub factors: Vec<FactorDecl>,
}

impl FactorSchema {
    pub fn new(factors: Vec<FactorDecl>) -> Self {
        Self { factors }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        let schema: Self = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.check()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_toml_str(&read_to_string(path.as_ref())?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn check(&self) -> Result<(), DataError> {
        if self.factors.is_empty() {
            return Err(DataError::Schema("no factors declared".into()));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.id.is_empty() || f.id == "date" {
                return Err(DataError::Schema(format!("invalid factor id `{}`", f.id)));
            }
            if self.factors[..i].iter().any(|g| g.id == f.id) {
                return Err(DataError::Schema(format!("duplicate factor id `{}`", f.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Dated factor levels. Missing cells are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSet {
    pub factors: Vec<FactorDecl>,
    /// ISO-8601 dates, strictly increasing.
    pub dates: Vec<String>,
    /// `T x F` levels.
    pub values: Array2<f64>,
}

impl TimeSeriesSet {
    pub fn new(
        factors: Vec<FactorDecl>,
        dates: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self, DataError> {
        if values.ncols() != factors.len() {
            return Err(DataError::DimensionMismatch {
                expected: factors.len(),
                got: values.ncols(),
            });
        }
        if values.nrows() != dates.len() {
            return Err(DataError::Schema(format!(
                "{} dates for {} rows",
                dates.len(),
                values.nrows()
            )));
        }
        check_dates(&dates)?;
        Ok(Self {
            factors,
            dates,
            values,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.values.ncols()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.id == id)
    }
}

fn check_dates(dates: &[String]) -> Result<(), DataError> {
    for (row, d) in dates.iter().enumerate() {
        NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|_| DataError::BadDate {
            row,
            value: d.clone(),
        })?;
    }
    for pair in dates.windows(2) {
        // ISO dates order lexicographically.
        match pair[0].cmp(&pair[1]) {
            std::cmp::Ordering::Less => {}
            std::cmp::Ordering::Equal => return Err(DataError::DuplicateDate(pair[1].clone())),
            std::cmp::Ordering::Greater => {
                return Err(DataError::NonMonotoneDates {
                    prev: pair[0].clone(),
                    next: pair[1].clone(),
                })
            }
        }
    }
    Ok(())
}

/// Parses CSV text with a leading `date` column and one column per factor.
/// Columns are reordered to follow `schema`; empty cells become missing.
pub fn parse_time_series(text: &str, schema: &FactorSchema) -> Result<TimeSeriesSet, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let first = headers.get(0).unwrap_or("");
    if first != "date" {
        return Err(DataError::MissingDateColumn(first.to_string()));
    }

    // column position in the file for each schema factor
    let mut positions = vec![None; schema.len()];
    for (col, name) in headers.iter().enumerate().skip(1) {
        let idx = schema
            .factors
            .iter()
            .position(|f| f.id == name)
            .ok_or_else(|| DataError::UnknownFactor(name.to_string()))?;
        positions[idx] = Some(col);
    }
    let positions: Vec<usize> = positions
        .into_iter()
        .zip(&schema.factors)
        .map(|(p, f)| p.ok_or_else(|| DataError::MissingFactor(f.id.clone())))
        .collect::<Result<_, _>>()?;

    let mut dates = Vec::new();
    let mut flat = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        dates.push(record.get(0).unwrap_or("").to_string());
        for (f, &col) in schema.factors.iter().zip(&positions) {
            let cell = record.get(col).unwrap_or("");
            let value = if cell.is_empty() {
                f64::NAN
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(DataError::UnparseableCell {
                            row,
                            factor: f.id.clone(),
                            value: cell.to_string(),
                        })
                    }
                }
            };
            flat.push(value);
        }
    }
    let values = Array2::from_shape_vec((dates.len(), schema.len()), flat)
        .expect("row-major buffer matches shape");
    TimeSeriesSet::new(schema.factors.clone(), dates, values)
}

pub fn load_time_series(
    path: impl AsRef<Path>,
    schema: &FactorSchema,
) -> Result<TimeSeriesSet, DataError> {
    parse_time_series(&read_to_string(path.as_ref())?, schema)
}

/// Writes levels as CSV in the format [`parse_time_series`] reads.
pub fn write_time_series<W: std::io::Write>(ts: &TimeSeriesSet, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    header.extend(ts.factors.iter().map(|f| f.id.clone()));
    w.write_record(&header)?;
    for (date, row) in ts.dates.iter().zip(ts.values.rows()) {
        let mut rec = vec![date.clone()];
        rec.extend(row.iter().map(|v| {
            if v.is_nan() {
                String::new()
            } else {
                format!("{v}")
            }
        }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// Carries the last observed value forward over missing cells.
pub fn fill_gaps(ts: &TimeSeriesSet) -> Result<TimeSeriesSet, DataError> {
    let mut values = ts.values.clone();
    for (j, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        let mut last = f64::NAN;
        for v in col.iter_mut() {
            if v.is_nan() {
                if last.is_nan() {
                    return Err(DataError::LeadingGap(ts.factors[j].id.clone()));
                }
                *v = last;
            } else {
                last = *v;
            }
        }
    }
    Ok(TimeSeriesSet {
        factors: ts.factors.clone(),
        dates: ts.dates.clone(),
        values,
    })
}

/// Per-factor affine scaling recorded by [`normalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaling {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// One-year returns, one row per window start.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnMatrix {
    pub factors: Vec<FactorDecl>,
    /// Date at the end of each window.
    pub dates: Vec<String>,
    pub returns: Array2<f64>,
    pub window: usize,
    /// Present once the matrix has been normalized.
    pub scaling: Option<Scaling>,
}

impl ReturnMatrix {
    pub fn n_obs(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.returns.ncols()
    }

    pub fn factor_ids(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.id.clone()).collect()
    }
}

pub fn compute_rolling_returns(
    ts: &TimeSeriesSet,
    window: usize,
) -> Result<ReturnMatrix, DataError> {
    let t = ts.n_obs();
    if window == 0 || t <= window {
        return Err(DataError::WindowTooLarge { rows: t, window });
    }
    let rows = t - window;
    let mut returns = Array2::zeros((rows, ts.n_factors()));
    for (j, f) in ts.factors.iter().enumerate() {
        let col = ts.values.column(j);
        if let Some(row) = col.iter().position(|v| v.is_nan()) {
            return Err(DataError::UnparseableCell {
                row,
                factor: f.id.clone(),
                value: "<missing>".into(),
            });
        }
        if f.kind == ReturnKind::Relative {
            if let Some((row, &value)) = col.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                return Err(DataError::NonPositiveLevel {
                    factor: f.id.clone(),
                    row,
                    value,
                });
            }
        }
        for i in 0..rows {
            let (start, end) = (col[i], col[i + window]);
            returns[[i, j]] = match f.kind {
                ReturnKind::Relative => end / start - 1.0,
                ReturnKind::Absolute => end - start,
            };
        }
    }
    Ok(ReturnMatrix {
        factors: ts.factors.clone(),
        dates: ts.dates[window..].to_vec(),
        returns,
        window,
        scaling: None,
    })
}

/// Population mean and standard deviation of each column.
pub fn column_moments(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    x.axis_iter(Axis(1))
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}

/// Standardizes every column to zero mean and unit population variance.
pub fn normalize(rm: &ReturnMatrix) -> Result<ReturnMatrix, DataError> {
    let (mean, std) = column_moments(&rm.returns);
    for (j, (&m, &s)) in mean.iter().zip(&std).enumerate() {
        // relative tolerance so that constant columns with rounding noise count as degenerate
        if !(s > 1e-14 * m.abs().max(1e-300)) || !s.is_finite() {
            return Err(DataError::DegenerateFactor(rm.factors[j].id.clone()));
        }
    }
    let mut returns = rm.returns.clone();
    for (mut col, (&m, &s)) in returns.axis_iter_mut(Axis(1)).zip(mean.iter().zip(&std)) {
        col.mapv_inplace(|v| (v - m) / s);
    }
    Ok(ReturnMatrix {
        factors: rm.factors.clone(),
        dates: rm.dates.clone(),
        returns,
        window: rm.window,
        scaling: Some(Scaling { mean, std }),
    })
}

/// Maps normalized values back to natural units: `x * std + mean`.
pub fn denormalize(x: &Array2<f64>, scaling: &Scaling) -> Result<Array2<f64>, DataError> {
    if x.ncols() != scaling.len() {
        return Err(DataError::DimensionMismatch {
            expected: scaling.len(),
            got: x.ncols(),
        });
    }
    let mut out = x.clone();
    for (mut col, (&m, &s)) in out
        .axis_iter_mut(Axis(1))
        .zip(scaling.mean.iter().zip(&scaling.std))
    {
        col.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn schema2() -> FactorSchema {
        FactorSchema::new(vec![
            FactorDecl::new("eq", ReturnKind::Relative),
            FactorDecl::new("ir5", ReturnKind::Absolute),
        ])
    }

    fn single(kind: ReturnKind, levels: &[f64]) -> TimeSeriesSet {
        let dates = (0..levels.len())
            .map(|i| format!("2020-01-{:02}", i + 1))
            .collect();
        let values = Array2::from_shape_vec((levels.len(), 1), levels.to_vec()).unwrap();
        TimeSeriesSet::new(vec![FactorDecl::new("x", kind)], dates, values).unwrap()
    }

    #[test]
    fn parses_small_csv() {
        let text = "date,ir5,eq\n2020-01-01,0.01,100\n2020-01-02,,101\n2020-01-03,0.012,99.5\n";
        let ts = parse_time_series(text, &schema2()).unwrap();
        assert_eq!(ts.n_obs(), 3);
        assert_eq!(ts.n_factors(), 2);
        // schema order, not file order
        assert_eq!(ts.values[[0, 0]], 100.0);
        assert_eq!(ts.values[[0, 1]], 0.01);
        assert!(ts.values[[1, 1]].is_nan());
        assert_eq!(ts.missing_count(), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = schema2();
        let dup = "date,eq,ir5\n2020-01-01,1,0\n2020-01-01,1,0\n";
        assert!(matches!(
            parse_time_series(dup, &s),
            Err(DataError::DuplicateDate(_))
        ));
        let backwards = "date,eq,ir5\n2020-01-02,1,0\n2020-01-01,1,0\n";
        assert!(matches!(
            parse_time_series(backwards, &s),
            Err(DataError::NonMonotoneDates { .. })
        ));
        let unknown = "date,eq,ir5,fx\n2020-01-01,1,0,1\n";
        assert!(matches!(
            parse_time_series(unknown, &s),
            Err(DataError::UnknownFactor(id)) if id == "fx"
        ));
        let missing = "date,eq\n2020-01-01,1\n";
        assert!(matches!(
            parse_time_series(missing, &s),
            Err(DataError::MissingFactor(id)) if id == "ir5"
        ));
        let junk = "date,eq,ir5\n2020-01-01,abc,0\n";
        assert!(matches!(
            parse_time_series(junk, &s),
            Err(DataError::UnparseableCell { .. })
        ));
        let bad_date = "date,eq,ir5\n01.01.2020,1,0\n";
        assert!(matches!(
            parse_time_series(bad_date, &s),
            Err(DataError::BadDate { .. })
        ));
    }

    #[test]
    fn schema_from_toml() {
        let s = FactorSchema::from_toml_str(
            "[[factor]]\nid = \"eq\"\nkind = \"relative\"\nlabel = \"Eurostoxx 50\"\n\n[[factor]]\nid = \"ir5\"\nkind = \"absolute\"\n",
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.factors[0].label.as_deref(), Some("Eurostoxx 50"));
        assert_eq!(FactorSchema::from_toml_str(&s.to_toml_string()).unwrap(), s);
        assert!(FactorSchema::from_toml_str("factor = []").is_err());
    }

    #[test]
    fn fill_gaps_carries_forward() {
        let ts = single(ReturnKind::Absolute, &[1.0, f64::NAN, 3.0]);
        let filled = fill_gaps(&ts).unwrap();
        assert_eq!(filled.values.column(0).to_vec(), vec![1.0, 1.0, 3.0]);

        let clean = single(ReturnKind::Absolute, &[1.0, 2.0]);
        assert_eq!(fill_gaps(&clean).unwrap(), clean);

        let leading = single(ReturnKind::Absolute, &[f64::NAN, 2.0]);
        assert!(matches!(fill_gaps(&leading), Err(DataError::LeadingGap(_))));
    }

    #[test]
    fn rolling_returns_by_kind() {
        let rel = compute_rolling_returns(&single(ReturnKind::Relative, &[100.0, 110.0, 121.0]), 1)
            .unwrap();
        for (got, want) in rel.returns.column(0).iter().zip([0.10, 0.10]) {
            assert!((got - want).abs() < 1e-12);
        }
        let abs =
            compute_rolling_returns(&single(ReturnKind::Absolute, &[0.010, 0.012, 0.011]), 1)
                .unwrap();
        for (got, want) in abs.returns.column(0).iter().zip([0.002, -0.001]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(abs.dates, vec!["2020-01-02", "2020-01-03"]);
    }

    #[test]
    fn rolling_returns_errors() {
        let ts = single(ReturnKind::Relative, &[1.0, 0.0, 2.0]);
        assert!(matches!(
            compute_rolling_returns(&ts, 1),
            Err(DataError::NonPositiveLevel { row: 1, .. })
        ));
        let ts = single(ReturnKind::Absolute, &[1.0, 2.0]);
        assert!(matches!(
            compute_rolling_returns(&ts, 2),
            Err(DataError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn paper_scale_row_count() {
        let t = 4588;
        let levels: Vec<f64> = (0..t).map(|i| 100.0 + i as f64 * 0.01).collect();
        let rm = compute_rolling_returns(&single_long(&levels), DEFAULT_WINDOW).unwrap();
        assert_eq!(rm.n_obs(), 4330);
    }

    fn single_long(levels: &[f64]) -> TimeSeriesSet {
        let start = NaiveDate::from_ymd_opt(2002, 3, 28).unwrap();
        let dates = (0..levels.len())
            .map(|i| (start + chrono::Days::new(i as u64)).format("%Y-%m-%d").to_string())
            .collect();
        let values = Array2::from_shape_vec((levels.len(), 1), levels.to_vec()).unwrap();
        TimeSeriesSet::new(vec![FactorDecl::new("x", ReturnKind::Relative)], dates, values)
            .unwrap()
    }

    fn rm_of(returns: Array2<f64>) -> ReturnMatrix {
        let factors = (0..returns.ncols())
            .map(|j| FactorDecl::new(format!("f{j}"), ReturnKind::Absolute))
            .collect();
        ReturnMatrix {
            factors,
            dates: (0..returns.nrows()).map(|i| i.to_string()).collect(),
            returns,
            window: 1,
            scaling: None,
        }
    }

    #[test]
    fn normalize_population_std() {
        let n = normalize(&rm_of(array![[1.0], [2.0], [3.0]])).unwrap();
        // (x - 2) / sqrt(2/3)
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (got, want) in n.returns.column(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let again = normalize(&rm_of(n.returns.clone())).unwrap();
        for (a, b) in again.returns.iter().zip(n.returns.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            normalize(&rm_of(array![[4.0], [4.0], [4.0]])),
            Err(DataError::DegenerateFactor(_))
        ));
    }

    #[test]
    fn denormalize_affine() {
        let s = Scaling {
            mean: vec![0.5],
            std: vec![2.0],
        };
        assert_eq!(denormalize(&array![[1.0]], &s).unwrap(), array![[2.5]]);
        let s2 = Scaling {
            mean: vec![0.3, -1.0],
            std: vec![2.0, 0.1],
        };
        assert_eq!(
            denormalize(&Array2::zeros((3, 2)), &s2).unwrap(),
            array![[0.3, -1.0], [0.3, -1.0], [0.3, -1.0]]
        );
        assert!(matches!(
            denormalize(&Array2::zeros((1, 3)), &s2),
            Err(DataError::DimensionMismatch { .. })
        ));
    }
}
