//! Compressed sparse row matrices for the patch-graph adjacency.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Square CSR matrix. Column indices within a row are sorted and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::shape("csr", format!("entry ({r}, {c}) outside {n}x{n}")));
            }
            sorted.push((r, c, v));
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self { n, indptr, indices, values })
    }

    pub fn from_dense(t: &Tensor2) -> Result<Self> {
        if t.rows() != t.cols() {
            return Err(Error::NonSquareAdjacency { rows: t.rows(), cols: t.cols() });
        }
        let mut trip = Vec::new();
        for i in 0..t.rows() {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(t.rows(), &trip)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_dense(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                t[(i, j)] = v;
            }
        }
        t
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.rows() != self.n {
            return Err(Error::shape("spmm", format!("{}x{} by {}x{}", self.n, self.n, x.rows(), x.cols())));
        }
        let mut out = Tensor2::zeros(self.n, x.cols());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                let src = x.row(j).to_vec();
                for (o, s) in out.row_mut(i).iter_mut().zip(&src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · x`.
    pub fn matmul_t(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.rows() != self.n {
            return Err(Error::shape("spmm_t", format!("{}x{} by {}x{}", self.n, self.n, x.rows(), x.cols())));
        }
        let mut out = Tensor2::zeros(self.n, x.cols());
        for i in 0..self.n {
            let src = x.row(i).to_vec();
            for (j, v) in self.row(i) {
                for (o, s) in out.row_mut(j).iter_mut().zip(&src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// Symmetric renormalization with self-loops: `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub fn gcn_normalized(&self) -> Result<Self> {
        let mut trip = Vec::with_capacity(self.nnz() + self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if v < 0.0 {
                    return Err(Error::NegativeAdjacency { row: i, col: j, value: v });
                }
                trip.push((i, j, v));
            }
            trip.push((i, i, 1.0));
        }
        let with_loops = Self::from_triplets(self.n, &trip)?;
        let inv_sqrt: Vec<f64> = with_loops.degrees().iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut out = with_loops;
        for i in 0..out.n {
            for k in out.indptr[i]..out.indptr[i + 1] {
                let j = out.indices[k];
                out.values[k] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, &[(0, 1, 1.0), (0, 1, 0.5), (1, 0, 2.0)]).unwrap();
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn spmm_matches_dense() {
        let dense = Tensor2::from_rows(&[&[0.0, 1.0, 2.0], &[1.0, 0.0, 0.0], &[2.0, 0.0, 3.0]]);
        let x = Tensor2::from_rows(&[&[1.0, -1.0], &[2.0, 0.5], &[0.0, 4.0]]);
        let csr = CsrMatrix::from_dense(&dense).unwrap();
        assert_eq!(csr.matmul(&x).unwrap(), dense.matmul(&x).unwrap());
        assert_eq!(csr.matmul_t(&x).unwrap(), dense.transpose().matmul(&x).unwrap());
    }

    #[test]
    fn gcn_normalization_of_empty_graph_is_identity() {
        let csr = CsrMatrix::from_triplets(3, &[]).unwrap();
        assert_eq!(csr.gcn_normalized().unwrap().to_dense(), Tensor2::identity(3));
    }
}
