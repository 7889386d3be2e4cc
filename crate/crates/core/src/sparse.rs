//! Compressed-sparse-row matrices and the handful of kernels the hypergraph
//! operators reduce to: transpose, sparse-sparse product, sparse-dense
//! product, Hadamard product, and degree normalizations.
//!
//! All values are `f64`. Every constructor returns a canonical matrix: rows
//! sorted by column, no duplicate columns, no stored zeros.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        audit::record(rows, cols, rows * cols);
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "DenseMatrix::from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        audit::record(rows, cols, data.len());
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "DenseMatrix::from_rows",
                    lhs: (n, m),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n, m, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Dense product `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> DenseMatrix {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        DenseMatrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sparse matrix in compressed-sparse-row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        audit::record(n_rows, n_cols, 0);
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    /// Square matrix with `diag` on the diagonal; zero entries are dropped.
    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (i, &d) in diag.iter().enumerate() {
            if d != 0.0 {
                col_idx.push(i);
                values.push(d);
            }
            row_ptr.push(col_idx.len());
        }
        audit::record(n, n, values.len());
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Builds a canonical matrix from `(row, col, value)` entries. Duplicates
    /// are summed and entries that end up zero are dropped.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(i, j, _) in entries {
            if i >= n_rows || j >= n_cols {
                return Err(Error::IndexOutOfRange {
                    row: i,
                    col: j,
                    rows: n_rows,
                    cols: n_cols,
                });
            }
        }
        // counting sort by row, then sort each row by column
        let mut counts = vec![0usize; n_rows + 1];
        for &(i, _, _) in entries {
            counts[i + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut staged = vec![(0usize, 0.0f64); entries.len()];
        for &(i, j, v) in entries {
            staged[next[i]] = (j, v);
            next[i] += 1;
        }

        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        row_ptr.push(0);
        for i in 0..n_rows {
            let row = &mut staged[counts[i]..counts[i + 1]];
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut sum = 0.0;
                while k < row.len() && row[k].0 == j {
                    sum += row[k].1;
                    k += 1;
                }
                if sum != 0.0 {
                    col_idx.push(j);
                    values.push(sum);
                }
            }
            row_ptr.push(col_idx.len());
        }
        audit::record(n_rows, n_cols, values.len());
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_dense(dense: &DenseMatrix) -> Self {
        let mut entries = Vec::new();
        for i in 0..dense.rows() {
            for (j, &v) in dense.row(i).iter().enumerate() {
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self::from_triplets(dense.rows(), dense.cols(), &entries)
            .expect("indices come from the dense shape")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Approximate heap footprint of the three CSR arrays.
    pub fn memory_bytes(&self) -> usize {
        (self.row_ptr.len() + self.col_idx.len()) * std::mem::size_of::<usize>()
            + self.values.len() * std::mem::size_of::<f64>()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out.set(i, j, v);
            }
        }
        out
    }

    /// Checks the canonical-form invariants. Intended for tests.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.row_ptr.len() != self.n_rows + 1 {
            return Err(format!(
                "row_ptr has length {}, expected {}",
                self.row_ptr.len(),
                self.n_rows + 1
            ));
        }
        if self.row_ptr[0] != 0 {
            return Err("row_ptr[0] != 0".into());
        }
        if self.row_ptr[self.n_rows] != self.col_idx.len() || self.col_idx.len() != self.values.len()
        {
            return Err("row_ptr tail, col_idx and values lengths disagree".into());
        }
        for i in 0..self.n_rows {
            if self.row_ptr[i] > self.row_ptr[i + 1] {
                return Err(format!("row_ptr decreases at row {i}"));
            }
            let (cols, vals) = self.row(i);
            for w in cols.windows(2) {
                if w[0] >= w[1] {
                    return Err(format!("row {i} columns not strictly increasing"));
                }
            }
            if let Some(&j) = cols.last() {
                if j >= self.n_cols {
                    return Err(format!("row {i} column {j} out of range"));
                }
            }
            if vals.contains(&0.0) {
                return Err(format!("row {i} stores an explicit zero"));
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // rows visited in increasing order, so each output row comes out sorted
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                col_idx[next[j]] = i;
                values[next[j]] = v;
                next[j] += 1;
            }
        }
        audit::record(self.n_cols, self.n_rows, values.len());
        CsrMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Sparse product `self · other` (row-wise Gustavson with a dense
    /// accumulator over the output columns).
    pub fn spgemm(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.n_cols != other.n_rows {
            return Err(Error::ShapeMismatch {
                op: "spgemm",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let n_out = other.n_cols;
        let mut acc = vec![0.0f64; n_out];
        let mut touched = vec![false; n_out];
        let mut pattern: Vec<usize> = Vec::new();

        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..self.n_rows {
            let (a_cols, a_vals) = self.row(i);
            for (&k, &a) in a_cols.iter().zip(a_vals) {
                let (b_cols, b_vals) = other.row(k);
                for (&j, &b) in b_cols.iter().zip(b_vals) {
                    if !touched[j] {
                        touched[j] = true;
                        pattern.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            pattern.sort_unstable();
            for &j in &pattern {
                let v = acc[j];
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
                acc[j] = 0.0;
                touched[j] = false;
            }
            pattern.clear();
            row_ptr.push(col_idx.len());
        }
        audit::record(self.n_rows, n_out, values.len());
        Ok(CsrMatrix {
            n_rows: self.n_rows,
            n_cols: n_out,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Sparse-dense product `self · x`.
    pub fn spmm_dense(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_cols != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "spmm_dense",
                lhs: self.shape(),
                rhs: x.shape(),
            });
        }
        let width = x.cols();
        let mut out = DenseMatrix::zeros(self.n_rows, width);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let out_row = out.row_mut(i);
            for (&k, &a) in cols.iter().zip(vals) {
                for (o, &b) in out_row.iter_mut().zip(x.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g` without materializing the transpose. Used by the tape's
    /// backward rule for constant sparse operators.
    pub fn spmm_transpose_dense(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_rows != g.rows() {
            return Err(Error::ShapeMismatch {
                op: "spmm_transpose_dense",
                lhs: (self.n_cols, self.n_rows),
                rhs: g.shape(),
            });
        }
        let width = g.cols();
        let mut out = DenseMatrix::zeros(self.n_cols, width);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let g_row = g.row(i);
            for (&k, &a) in cols.iter().zip(vals) {
                for (o, &b) in out.row_mut(k).iter_mut().zip(g_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Entrywise product. The output pattern is the intersection of the two
    /// input patterns.
    pub fn hadamard(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "hadamard",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let cap = self.nnz().min(other.nnz());
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut col_idx = Vec::with_capacity(cap);
        let mut values = Vec::with_capacity(cap);
        row_ptr.push(0);
        for i in 0..self.n_rows {
            let (ac, av) = self.row(i);
            let (bc, bv) = other.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ac.len() && q < bc.len() {
                match ac[p].cmp(&bc[q]) {
                    std::cmp::Ordering::Less => p += 1,
                    std::cmp::Ordering::Greater => q += 1,
                    std::cmp::Ordering::Equal => {
                        let v = av[p] * bv[q];
                        if v != 0.0 {
                            col_idx.push(ac[p]);
                            values.push(v);
                        }
                        p += 1;
                        q += 1;
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
        audit::record(self.n_rows, self.n_cols, values.len());
        Ok(CsrMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Elementwise sum of two same-shape matrices.
    pub fn add(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut entries = Vec::with_capacity(self.nnz() + other.nnz());
        for m in [self, other] {
            for i in 0..m.n_rows {
                let (cols, vals) = m.row(i);
                entries.extend(cols.iter().zip(vals).map(|(&j, &v)| (i, j, v)));
            }
        }
        CsrMatrix::from_triplets(self.n_rows, self.n_cols, &entries)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    fn check_non_negative(&self, op: &'static str) -> Result<()> {
        match self.values.iter().find(|&&v| v < 0.0) {
            Some(&value) => Err(Error::NegativeEntry { op, value }),
            None => Ok(()),
        }
    }

    /// `D^{-1/2} A D^{-1/2}` with `D = diag(row_sums(A))`; zero-degree rows
    /// and columns stay zero.
    pub fn sym_normalize(&self) -> Result<CsrMatrix> {
        if self.n_rows != self.n_cols {
            return Err(Error::ShapeMismatch {
                op: "sym_normalize",
                lhs: self.shape(),
                rhs: (self.n_cols, self.n_rows),
            });
        }
        self.check_non_negative("sym_normalize")?;
        let d = self.row_sums();
        Ok(self.scale_entries(|i, j, v| {
            if d[i] > 0.0 && d[j] > 0.0 {
                v / (d[i] * d[j]).sqrt()
            } else {
                0.0
            }
        }))
    }

    /// `D^{-1} A`: each non-empty row rescaled to sum to one.
    pub fn row_normalize(&self) -> Result<CsrMatrix> {
        self.check_non_negative("row_normalize")?;
        let inv: Vec<f64> = self
            .row_sums()
            .into_iter()
            .map(|d| if d > 0.0 { 1.0 / d } else { 0.0 })
            .collect();
        Ok(self.scale_entries(|i, _, v| v * inv[i]))
    }

    fn scale_entries(&self, f: impl Fn(usize, usize, f64) -> f64) -> CsrMatrix {
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        row_ptr.push(0);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let w = f(i, j, v);
                if w != 0.0 {
                    col_idx.push(j);
                    values.push(w);
                }
            }
            row_ptr.push(col_idx.len());
        }
        audit::record(self.n_rows, self.n_cols, values.len());
        CsrMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// True when `self == selfᵀ` in pattern and, within `tol`, in value.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        let t = self.transpose();
        if t.row_ptr != self.row_ptr || t.col_idx != self.col_idx {
            return false;
        }
        self.values
            .iter()
            .zip(&t.values)
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Shape audit for matrix construction.
///
/// While a thread has auditing enabled, every matrix built on that thread
/// reports its shape and stored-entry count. Tests use this to assert that
/// the equivalent-adjacency path never builds a matrix keyed by
/// entity-combination columns.
pub mod audit {
    use std::cell::RefCell;

    #[derive(Debug, Clone, Default, PartialEq, Eq)]
    pub struct AuditReport {
        pub matrices: usize,
        pub max_rows: usize,
        pub max_cols: usize,
        pub max_entries: usize,
    }

    thread_local! {
        static ACTIVE: RefCell<Option<AuditReport>> = const { RefCell::new(None) };
    }

    pub fn start() {
        ACTIVE.with(|a| *a.borrow_mut() = Some(AuditReport::default()));
    }

    /// Stops auditing and returns what was observed since [`start`].
    pub fn finish() -> AuditReport {
        ACTIVE.with(|a| a.borrow_mut().take().unwrap_or_default())
    }

    pub(crate) fn record(rows: usize, cols: usize, entries: usize) {
        ACTIVE.with(|a| {
            if let Some(r) = a.borrow_mut().as_mut() {
                r.matrices += 1;
                r.max_rows = r.max_rows.max(rows);
                r.max_cols = r.max_cols.max(cols);
                r.max_entries = r.max_entries.max(entries);
            }
        });
    }
}
