//! Data matrices with a missingness mask.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `n x p` matrix of observations together with an observed-cell mask.
///
/// Values stored under the mask (unobserved cells) are never read by any
/// estimator in this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
}

impl DataMatrix {
    /// Complete data; every cell observed.
    pub fn new(values: DMatrix<f64>) -> Self {
        let observed = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self { values, observed }
    }

    pub fn with_mask(values: DMatrix<f64>, observed: DMatrix<bool>) -> Result<Self> {
        if values.shape() != observed.shape() {
            return Err(Error::DimensionMismatch(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                observed.shape()
            )));
        }
        Ok(Self { values, observed })
    }

    /// Non-finite entries become missing.
    pub fn from_nan(values: DMatrix<f64>) -> Self {
        let observed = values.map(|v| v.is_finite());
        Self { values, observed }
    }

    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let values = DMatrix::from_fn(n, p, |i, j| rows[i][j].unwrap_or(0.0));
        let observed = DMatrix::from_fn(n, p, |i, j| rows[i][j].is_some());
        Ok(Self { values, observed })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[(i, j)]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.observed[(i, j)].then(|| self.values[(i, j)])
    }

    /// Raw storage, including whatever sits under the mask.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn row_observed_count(&self, i: usize) -> usize {
        self.observed.row(i).iter().filter(|&&o| o).count()
    }

    /// Observed values of column `j`.
    pub fn column_values(&self, j: usize) -> Vec<f64> {
        (0..self.nrows()).filter_map(|i| self.get(i, j)).collect()
    }

    /// Copy with unobserved cells set to NaN.
    pub fn to_nan_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows(), self.ncols(), |i, j| {
            self.get(i, j).unwrap_or(f64::NAN)
        })
    }

    /// Copy with unobserved cells replaced by `fill[j]`.
    pub fn filled(&self, fill: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows(), self.ncols(), |i, j| {
            self.get(i, j).unwrap_or(fill[j])
        })
    }

    pub fn set_missing(&mut self, i: usize, j: usize) {
        self.observed[(i, j)] = false;
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.values[(i, j)] = value;
        self.observed[(i, j)] = true;
    }

    pub fn select_rows(&self, rows: &[usize]) -> DataMatrix {
        let p = self.ncols();
        DataMatrix {
            values: DMatrix::from_fn(rows.len(), p, |r, j| self.values[(rows[r], j)]),
            observed: DMatrix::from_fn(rows.len(), p, |r, j| self.observed[(rows[r], j)]),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> DataMatrix {
        let n = self.nrows();
        DataMatrix {
            values: DMatrix::from_fn(n, cols.len(), |i, c| self.values[(i, cols[c])]),
            observed: DMatrix::from_fn(n, cols.len(), |i, c| self.observed[(i, cols[c])]),
        }
    }

    /// Side-by-side concatenation `[self, other]`.
    pub fn hconcat(&self, other: &DataMatrix) -> Result<DataMatrix> {
        if self.nrows() != other.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows vs {} rows",
                self.nrows(),
                other.nrows()
            )));
        }
        let (n, p, q) = (self.nrows(), self.ncols(), other.ncols());
        let pick = |i: usize, j: usize| {
            if j < p {
                (self.values[(i, j)], self.observed[(i, j)])
            } else {
                (other.values[(i, j - p)], other.observed[(i, j - p)])
            }
        };
        Ok(DataMatrix {
            values: DMatrix::from_fn(n, p + q, |i, j| pick(i, j).0),
            observed: DMatrix::from_fn(n, p + q, |i, j| pick(i, j).1),
        })
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_columns(&self, factors: &[f64]) -> DataMatrix {
        let mut values = self.values.clone();
        for (j, mut col) in values.column_iter_mut().enumerate() {
            col *= factors[j];
        }
        DataMatrix {
            values,
            observed: self.observed.clone(),
        }
    }

    /// Checks that every row and column has at least one observed cell.
    pub fn check_coverage(&self) -> Result<()> {
        for i in 0..self.nrows() {
            if !self.observed.row(i).iter().any(|&o| o) {
                return Err(Error::EmptyRow { row: i });
            }
        }
        for j in 0..self.ncols() {
            if !self.observed.column(j).iter().any(|&o| o) {
                return Err(Error::EmptyColumn { column: j });
            }
        }
        Ok(())
    }
}

impl From<DMatrix<f64>> for DataMatrix {
    fn from(values: DMatrix<f64>) -> Self {
        DataMatrix::new(values)
    }
}
