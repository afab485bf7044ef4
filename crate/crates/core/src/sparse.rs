//! Compressed sparse row matrices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// CSR matrix with strictly increasing column indices inside each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Validates and wraps raw CSR arrays.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 {
            return Err(Error::Format("row offsets malformed".into()));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(Error::Format(
                "index/value lengths disagree with offsets".into(),
            ));
        }
        for r in 0..rows {
            let (lo, hi) = (indptr[r], indptr[r + 1]);
            if lo > hi {
                return Err(Error::Format(format!("row offsets decrease at row {r}")));
            }
            let row = &indices[lo..hi];
            if row.iter().any(|&c| c >= cols) {
                return Err(Error::Format(format!(
                    "column index out of bounds in row {r}"
                )));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!(
                    "column indices not strictly increasing in row {r}"
                )));
            }
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from unordered `(row, col, value)` triplets; duplicates are summed
    /// and exact zeros dropped.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|t| t.0 >= rows || t.1 >= cols) {
            return Err(Error::Format(format!(
                "entry ({r}, {c}) outside a {rows}x{cols} matrix"
            )));
        }
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
        .pruned())
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(t: &Tensor) -> Self {
        let mut indptr = Vec::with_capacity(t.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        SparseMatrix {
            rows: t.rows(),
            cols: t.cols(),
            indptr,
            indices,
            values,
        }
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
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    #[inline]
    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |p| vals[p])
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).0.binary_search(&c).is_ok()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                t.set(r, c, v);
            }
        }
        t
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                let p = next[c];
                indices[p] = r;
                values[p] = v;
                next[c] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    fn pruned(mut self) -> Self {
        if self.values.iter().all(|&v| v != 0.0) {
            return self;
        }
        let mut indptr = Vec::with_capacity(self.rows + 1);
        indptr.push(0);
        let mut w = 0;
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                if self.values[p] != 0.0 {
                    self.indices[w] = self.indices[p];
                    self.values[w] = self.values[p];
                    w += 1;
                }
            }
            indptr.push(w);
        }
        self.indices.truncate(w);
        self.values.truncate(w);
        self.indptr = indptr;
        self
    }

    /// Sparse product `self · rhs`, explicit zeros pruned.
    pub fn matmul(&self, rhs: &SparseMatrix) -> Result<SparseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Argument(format!(
                "sparse product shape mismatch: {}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..self.rows)
            .into_par_iter()
            .map_init(
                || (vec![0.0f64; rhs.cols], vec![false; rhs.cols]),
                |(acc, seen), r| {
                    let mut touched = Vec::new();
                    let (idx, vals) = self.row(r);
                    for (&k, &a) in idx.iter().zip(vals) {
                        let (ci, cv) = rhs.row(k);
                        for (&c, &b) in ci.iter().zip(cv) {
                            if !seen[c] {
                                seen[c] = true;
                                touched.push(c);
                            }
                            acc[c] += a * b;
                        }
                    }
                    touched.sort_unstable();
                    let mut out_i = Vec::with_capacity(touched.len());
                    let mut out_v = Vec::with_capacity(touched.len());
                    for c in touched {
                        let v = acc[c];
                        acc[c] = 0.0;
                        seen[c] = false;
                        if v != 0.0 {
                            out_i.push(c);
                            out_v.push(v);
                        }
                    }
                    (out_i, out_v)
                },
            )
            .collect();
        let mut indptr = Vec::with_capacity(self.rows + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, v) in rows {
            indices.extend(i);
            values.extend(v);
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            rows: self.rows,
            cols: rhs.cols,
            indptr,
            indices,
            values,
        })
    }

    /// Sparse times dense: `self · rhs`.
    pub fn mul_dense(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows() {
            return Err(Error::Argument(format!(
                "sparse-dense product shape mismatch: {}x{} times {}x{}",
                self.rows,
                self.cols,
                rhs.rows(),
                rhs.cols()
            )));
        }
        let width = rhs.cols();
        let mut out = Tensor::zeros(self.rows, width);
        if width == 0 {
            return Ok(out);
        }
        out.data_mut()
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(r, dst)| {
                let (idx, vals) = self.row(r);
                for (&k, &a) in idx.iter().zip(vals) {
                    for (d, s) in dst.iter_mut().zip(rhs.row(k)) {
                        *d += a * s;
                    }
                }
            });
        Ok(out)
    }
}

/// `m^k` for `k ∈ {1, 2}`.
pub fn spmm_power(m: &SparseMatrix, k: u32) -> Result<SparseMatrix> {
    if m.rows != m.cols {
        return Err(Error::Argument(format!(
            "matrix power needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    match k {
        1 => Ok(m.clone()),
        2 => m.matmul(m),
        _ => Err(Error::Argument(format!(
            "matrix power {k} unsupported (expected 1 or 2)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_merge_and_sort() {
        let m = SparseMatrix::from_triplets(
            2,
            3,
            vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 0.5), (0, 0, 0.0)],
        )
        .unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(1, 2), 1.5);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn from_csr_rejects_unsorted_rows() {
        let bad = SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]);
        assert!(bad.is_err());
        let oob = SparseMatrix::from_csr(1, 2, vec![0, 1], vec![5], vec![1.0]);
        assert!(oob.is_err());
    }

    #[test]
    fn power_of_identity_is_identity() {
        let i = SparseMatrix::identity(4);
        assert_eq!(spmm_power(&i, 2).unwrap(), i);
        assert_eq!(spmm_power(&i, 1).unwrap(), i);
        assert!(matches!(spmm_power(&i, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn transpose_round_trips() {
        let m = SparseMatrix::from_triplets(3, 2, vec![(0, 1, 1.0), (2, 0, -3.0), (1, 1, 2.0)])
            .unwrap();
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }
}
