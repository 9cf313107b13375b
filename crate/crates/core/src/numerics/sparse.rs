use super::tensor::Tensor2;

/// A constant sparse matrix in compressed-row form, used as a propagation
/// operator `y = S x` during message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are
    /// summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `S · x`.
    pub fn apply(&self, x: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, x.rows(), "sparse apply shape mismatch");
        let mut out = Tensor2::zeros(self.rows, x.cols());
        for r in 0..self.rows {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for k in span {
                let w = self.values[k];
                let src = x.row(self.col_idx[k]);
                for (o, &s) in out.row_mut(r).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out
    }

    /// `Sᵀ · g`.
    pub fn apply_transpose(&self, g: &Tensor2) -> Tensor2 {
        assert_eq!(self.rows, g.rows(), "sparse transpose apply shape mismatch");
        let mut out = Tensor2::zeros(self.cols, g.cols());
        for r in 0..self.rows {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for k in span {
                let w = self.values[k];
                let c = self.col_idx[k];
                let src = g.row(r).to_vec();
                for (o, s) in out.row_mut(c).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Tensor2 {
        let mut d = Tensor2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                d[(r, c)] += v;
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_and_dense_paths_agree() {
        let s = SparseMatrix::from_triplets(
            3,
            3,
            &[(0, 1, 0.5), (1, 0, 1.0), (1, 2, -2.0), (2, 2, 3.0), (0, 1, 0.25)],
        );
        assert_eq!(s.nnz(), 4);
        let x = Tensor2::from_fn(3, 2, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let dense = s.to_dense();
        assert_eq!(s.apply(&x), dense.matmul(&x).unwrap());
        assert_eq!(
            s.apply_transpose(&x),
            dense.transpose().matmul(&x).unwrap()
        );
    }
}
