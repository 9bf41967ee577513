use std::sync::Arc;

use rayon::prelude::*;

use super::dense::{DenseMatrix, PAR_WORK};
use crate::error::{Error, Result};

/// Row-compressed sparsity structure shared between matrices that differ
/// only in their values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl SparsePattern {
    /// Validates row pointers and strictly increasing in-range column indices.
    pub fn new(rows: usize, cols: usize, indptr: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 || indptr[rows] != indices.len() {
            return Err(Error::dim(
                "SparsePattern::new",
                format!(
                    "row pointer of length {} inconsistent with {rows} rows and {} entries",
                    indptr.len(),
                    indices.len()
                ),
            ));
        }
        for r in 0..rows {
            let (lo, hi) = (indptr[r], indptr[r + 1]);
            if lo > hi {
                return Err(Error::dim("SparsePattern::new", format!("row {r} has negative length")));
            }
            let row = &indices[lo..hi];
            if let Some(&c) = row.iter().find(|&&c| c >= cols) {
                return Err(Error::dim(
                    "SparsePattern::new",
                    format!("column {c} out of range in row {r} (cols = {cols})"),
                ));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::dim(
                    "SparsePattern::new",
                    format!("column indices of row {r} are not strictly increasing"),
                ));
            }
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.indptr[r]..self.indptr[r + 1]
    }

    /// Row index of every stored entry, in storage order.
    pub fn row_of_entries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(r, self.indptr[r + 1] - self.indptr[r]));
        }
        out
    }

    /// `S · d` where `S` has this pattern and the given per-entry values.
    pub fn spmm_with(&self, values: &[f64], d: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != d.rows() {
            return Err(Error::dim(
                "spmm",
                format!("{}x{} sparse times {}x{}", self.rows, self.cols, d.rows(), d.cols()),
            ));
        }
        debug_assert_eq!(values.len(), self.nnz());
        let m = d.cols();
        let mut out = DenseMatrix::zeros(self.rows, m);
        if m == 0 {
            return Ok(out);
        }
        let dd = d.data();
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            for e in self.row_range(i) {
                let a = values[e];
                let c = self.indices[e];
                for (o, &b) in out_row.iter_mut().zip(&dd[c * m..(c + 1) * m]) {
                    *o += a * b;
                }
            }
        };
        if self.nnz() * m >= PAR_WORK {
            out.data_mut().par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data_mut().chunks_mut(m).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `Sᵀ · g` for the given per-entry values.
    pub fn spmm_t_with(&self, values: &[f64], g: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != g.rows() {
            return Err(Error::dim(
                "spmm_t",
                format!("({}x{})ᵀ sparse times {}x{}", self.rows, self.cols, g.rows(), g.cols()),
            ));
        }
        let m = g.cols();
        let mut out = DenseMatrix::zeros(self.cols, m);
        let od = out.data_mut();
        for i in 0..self.rows {
            let g_row = g.row(i);
            for e in self.row_range(i) {
                let a = values[e];
                let c = self.indices[e];
                for (o, &b) in od[c * m..(c + 1) * m].iter_mut().zip(g_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Per-entry `⟨g_row(r), d_row(c)⟩`: the gradient of `S · d` with respect to the values of `S`.
    pub fn entry_dots(&self, g: &DenseMatrix, d: &DenseMatrix) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.rows {
            let g_row = g.row(i);
            for e in self.row_range(i) {
                let d_row = d.row(self.indices[e]);
                out.push(g_row.iter().zip(d_row).map(|(a, b)| a * b).sum());
            }
        }
        out
    }
}

/// Compressed sparse row matrix with no stored zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, indptr: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let pattern = SparsePattern::new(rows, cols, indptr, indices)?;
        Self::from_pattern(Arc::new(pattern), values)
    }

    pub fn from_pattern(pattern: Arc<SparsePattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::dim(
                "SparseMatrix::from_pattern",
                format!("{} values for {} stored entries", values.len(), pattern.nnz()),
            ));
        }
        if values.contains(&0.0) {
            return Err(Error::Input("sparse matrix stores an explicit zero".into()));
        }
        Ok(Self { pattern, values })
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed and zeros dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::dim(
                    "SparseMatrix::from_triplets",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for mut row in per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self::new(rows, cols, indptr, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, n, (0..=n).collect(), (0..n).collect(), vec![1.0; n]).expect("identity pattern is valid")
    }

    /// Drops the zero entries of a dense matrix.
    pub fn from_dense(d: &DenseMatrix) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..d.rows() {
            for (c, &v) in d.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self::new(d.rows(), d.cols(), indptr, indices, values).expect("dense scan yields a valid pattern")
    }

    pub fn rows(&self) -> usize {
        self.pattern.rows
    }

    pub fn cols(&self) -> usize {
        self.pattern.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indptr(&self) -> &[usize] {
        &self.pattern.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.pattern.indices
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let range = self.pattern.row_range(r);
        (&self.pattern.indices[range.clone()], &self.values[range])
    }

    /// Entry `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows(), self.cols());
        for r in 0..self.rows() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                d.set(r, c, v);
            }
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push((c, r, v));
            }
        }
        Self::from_triplets(self.cols(), self.rows(), &triplets).expect("transpose of a valid matrix")
    }

    /// Sparse times dense; per row the sum runs over ascending column index.
    pub fn spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        self.pattern.spmm_with(&self.values, d)
    }

    /// Sparse times sparse.
    pub fn sp_matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.cols() != other.rows() {
            return Err(Error::dim(
                "sp_matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows(),
                    self.cols(),
                    other.rows(),
                    other.cols()
                ),
            ));
        }
        let mut acc = vec![0.0; other.cols()];
        let mut touched = vec![false; other.cols()];
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..self.rows() {
            let mut cols_hit = Vec::new();
            let (a_cols, a_vals) = self.row(r);
            for (&k, &a) in a_cols.iter().zip(a_vals) {
                let (b_cols, b_vals) = other.row(k);
                for (&c, &b) in b_cols.iter().zip(b_vals) {
                    if !touched[c] {
                        touched[c] = true;
                        cols_hit.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            cols_hit.sort_unstable();
            for c in cols_hit {
                if acc[c] != 0.0 {
                    indices.push(c);
                    values.push(acc[c]);
                }
                acc[c] = 0.0;
                touched[c] = false;
            }
            indptr.push(indices.len());
        }
        SparseMatrix::new(self.rows(), other.cols(), indptr, indices, values)
    }

    /// Entry-wise sum of two equally shaped sparse matrices.
    pub fn add(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Error::dim("sparse add", "shape mismatch"));
        }
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for m in [self, other] {
            for r in 0..m.rows() {
                let (cols, vals) = m.row(r);
                triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (r, c, v)));
            }
        }
        SparseMatrix::from_triplets(self.rows(), self.cols(), &triplets)
    }

    /// Selects rows by index (repeats allowed), keeping all columns.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<SparseMatrix> {
        let mut indptr = Vec::with_capacity(idx.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for &r in idx {
            if r >= self.rows() {
                return Err(Error::dim(
                    "sparse gather_rows",
                    format!("row {r} out of range for {} rows", self.rows()),
                ));
            }
            let (cols, vals) = self.row(r);
            indices.extend_from_slice(cols);
            values.extend_from_slice(vals);
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            pattern: Arc::new(SparsePattern {
                rows: idx.len(),
                cols: self.cols(),
                indptr,
                indices,
            }),
            values,
        })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows() != self.cols() {
            return false;
        }
        (0..self.rows()).all(|r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).all(|(&c, &v)| (self.get(c, r) - v).abs() <= tol)
        })
    }
}
