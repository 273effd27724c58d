//! Streaming accumulation of the uncentered second moment `E[x^T x]`.
//!
//! Batches are absorbed row by row with an incremental mean update, so the
//! memory footprint is constant in the number of samples and the result is
//! bit-identical however the rows are split across batches.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone)]
pub struct WelfordState {
    dim: usize,
    count: u64,
    moment2: Matrix,
}

impl WelfordState {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            dim,
            count: 0,
            moment2: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Absorb an N x dim batch of row vectors.
    pub fn update(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "welford_update",
                expected: format!("{} columns", self.dim),
                got: format!("{}", batch.cols()),
            });
        }
        for row in 0..batch.rows() {
            self.count += 1;
            let inv_n = 1.0 / self.count as f64;
            let x = batch.row(row);
            for i in 0..self.dim {
                for j in i..self.dim {
                    let delta = (x[i] * x[j] - self.moment2[(i, j)]) * inv_n;
                    let updated = self.moment2[(i, j)] + delta;
                    self.moment2[(i, j)] = updated;
                    self.moment2[(j, i)] = updated;
                }
            }
        }
        Ok(())
    }

    /// Mean of `x^T x` over all absorbed rows.
    pub fn finalize(&self) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::invalid_arg(
                "welford finalize: no samples accumulated",
            ));
        }
        Ok(self.moment2.clone())
    }
}
