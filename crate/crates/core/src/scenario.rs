//! Generated one-year risk-factor shifts.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};

use crate::data::DataError;

/// `N x F` matrix of one-year shifts in natural units, columns named by
/// factor id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub factor_ids: Vec<String>,
    pub values: Array2<f64>,
}

impl ScenarioSet {
    pub fn new(factor_ids: Vec<String>, values: Array2<f64>) -> Result<Self, DataError> {
        if factor_ids.len() != values.ncols() {
            return Err(DataError::DimensionMismatch {
                expected: factor_ids.len(),
                got: values.ncols(),
            });
        }
        Ok(Self { factor_ids, values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.factor_ids.iter().position(|f| f == id)
    }

    pub fn column(&self, id: &str) -> Option<ArrayView1<'_, f64>> {
        self.column_index(id).map(|j| self.values.column(j))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.factor_ids)?;
        for row in self.values.rows() {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(input);
        let factor_ids: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut flat = Vec::new();
        let mut rows = 0;
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            for (cell, id) in rec.iter().zip(&factor_ids) {
                flat.push(cell.parse::<f64>().map_err(|_| DataError::UnparseableCell {
                    row,
                    factor: id.clone(),
                    value: cell.to_string(),
                })?);
            }
            rows += 1;
        }
        let values = Array2::from_shape_vec((rows, factor_ids.len()), flat).map_err(|_| {
            DataError::Schema("ragged scenario file".into())
        })?;
        Self::new(factor_ids, values)
    }
}
