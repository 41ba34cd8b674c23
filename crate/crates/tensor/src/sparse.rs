use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Compressed sparse row matrix. Used for fixed (non-learned) operators such as
/// normalized adjacency matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= n_rows {
                return Err(TensorError::Index {
                    op: "csr_from_triplets",
                    index: r,
                    len: n_rows,
                });
            }
            if c >= n_cols {
                return Err(TensorError::Index {
                    op: "csr_from_triplets",
                    index: c,
                    len: n_cols,
                });
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored entries of row `r` as (column, value).
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).filter(|&(j, _)| j == c).map(|(_, v)| v).sum()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, &triplets)
            .expect("transpose of a valid matrix is valid")
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        let cols = self.n_cols;
        let data = t.data_mut();
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                data[r * cols + c] += v;
            }
        }
        t
    }

    /// Product with a dense row-major matrix of `cols` columns.
    pub(crate) fn spmm(&self, dense: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * cols];
        for r in 0..self.n_rows {
            let out_row = &mut out[r * cols..(r + 1) * cols];
            for (c, v) in self.row(r) {
                let src = &dense[c * cols..(c + 1) * cols];
                for (o, &x) in out_row.iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        out
    }

    pub fn matmul_dense(&self, dense: &Tensor) -> Result<Tensor> {
        if dense.rows() != self.n_cols {
            return Err(TensorError::Dimension {
                op: "spmm",
                left: vec![self.n_rows, self.n_cols],
                right: dense.shape().to_vec(),
            });
        }
        let cols = dense.cols();
        Tensor::from_vec(vec![self.n_rows, cols], self.spmm(dense.data(), cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 4.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.transpose().get(1, 0), 3.0);
    }

    #[test]
    fn out_of_range_entry_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }
}
