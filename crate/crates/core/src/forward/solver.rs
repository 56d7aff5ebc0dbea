//! Envelope (skyline) Cholesky factorization for the grounded stiffness
//! matrix.
//!
//! Row `i` of the lower factor is stored densely from its first structural
//! nonzero column `first[i]` up to the diagonal. With row-major node ordering
//! on a square grid the envelope is bounded by one grid row, so fill stays
//! inside the stored profile.

use crate::error::{BaeError, Result};

#[derive(Debug, Clone)]
pub(crate) struct EnvelopeCholesky {
    first: Vec<usize>,
    offset: Vec<usize>,
    values: Vec<f64>,
}

/// Symmetric sparse matrix in compressed lower-row form: for every row the
/// strictly-lower neighbours with their values, plus the diagonal.
#[derive(Debug, Clone)]
pub(crate) struct LowerRows {
    pub diag: Vec<f64>,
    pub lower: Vec<Vec<(usize, f64)>>,
}

impl EnvelopeCholesky {
    pub fn factor(matrix: &LowerRows) -> Result<Self> {
        let n = matrix.diag.len();
        let mut first = Vec::with_capacity(n);
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            let f = matrix.lower[i].iter().map(|&(j, _)| j).min().unwrap_or(i);
            first.push(f);
            offset.push(offset[i] + (i - f + 1));
        }
        let mut values = vec![0.0; offset[n]];
        for i in 0..n {
            let base = offset[i] - first[i];
            for &(j, v) in &matrix.lower[i] {
                values[base + j] += v;
            }
            values[base + i] = matrix.diag[i];
        }

        for i in 0..n {
            let fi = first[i];
            let base_i = offset[i] - fi;
            for j in fi..i {
                let fj = first[j];
                let base_j = offset[j] - fj;
                let start = fi.max(fj);
                let (head, tail) = values.split_at_mut(offset[i]);
                let row_j = &head[base_j + start..base_j + j];
                let row_i = &tail[start - fi..j - fi];
                let dot: f64 = row_i.iter().zip(row_j).map(|(a, b)| a * b).sum();
                let ljj = head[base_j + j];
                tail[j - fi] = (tail[j - fi] - dot) / ljj;
            }
            let row_i = &values[offset[i]..base_i + i];
            let sq: f64 = row_i.iter().map(|a| a * a).sum();
            let d = values[base_i + i] - sq;
            if !(d > 0.0) {
                return Err(BaeError::Factorization(format!(
                    "non-positive pivot {d:e} at row {i}"
                )));
            }
            values[base_i + i] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            first,
            offset,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(x.len(), n);
        for i in 0..n {
            let fi = self.first[i];
            let base = self.offset[i] - fi;
            let row = &self.values[self.offset[i]..base + i];
            let dot: f64 = row.iter().zip(&x[fi..i]).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - dot) / self.values[base + i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let base = self.offset[i] - fi;
            x[i] /= self.values[base + i];
            let xi = x[i];
            let row = &self.values[self.offset[i]..base + i];
            for (xk, l) in x[fi..i].iter_mut().zip(row) {
                *xk -= l * xi;
            }
        }
    }
}
