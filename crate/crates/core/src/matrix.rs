//! Row-major dense matrix used for covariate data.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::invalid("matrix needs at least one column"));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension { what: "matrix data", expected: rows * cols, got: data.len() });
        }
        Ok(RowMatrix { rows, cols, data })
    }

    /// Single-column matrix.
    pub fn column(values: Vec<f64>) -> Self {
        RowMatrix { rows: values.len(), cols: 1, data: values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(1, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::invalid(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        RowMatrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// New matrix with rows taken in the given order.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        RowMatrix { rows: order.len(), cols: self.cols, data }
    }
}
