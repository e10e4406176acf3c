//! Minimal sparse matrix toolkit: CSR storage, the products needed for
//! GMRF precision assembly, a fill-reducing ordering, and a sparse LDL^T
//! factorization with the solve/log-determinant/sampling hooks the
//! inference engine needs.

mod ldl;
mod ordering;

pub use ldl::{LdlFactor, LdlSymbolic};
pub use ordering::rcm_with_dense_last;

use crate::error::{Error, Result};

/// Triplet (COO) builder; duplicates are summed on conversion.
#[derive(Debug, Clone)]
pub struct Triplets {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Triplets {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Triplets {
            n_rows,
            n_cols,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn with_capacity(n_rows: usize, n_cols: usize, cap: usize) -> Self {
        Triplets {
            n_rows,
            n_cols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
    }

    /// Push `val` at (row, col) and, when off-diagonal, its mirror.
    pub fn push_sym(&mut self, row: usize, col: usize, val: f64) {
        self.push(row, col, val);
        if row != col {
            self.push(col, row, val);
        }
    }

    pub fn to_csr(&self) -> SparseMatrix {
        let nnz = self.vals.len();
        let mut counts = vec![0usize; self.n_rows + 1];
        for &r in &self.rows {
            counts[r + 1] += 1;
        }
        for i in 0..self.n_rows {
            counts[i + 1] += counts[i];
        }
        let mut order: Vec<usize> = (0..nnz).collect();
        order.sort_unstable_by_key(|&k| (self.rows[k], self.cols[k]));

        let mut indptr = vec![0usize; self.n_rows + 1];
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        let mut prev: Option<(usize, usize)> = None;
        for &k in &order {
            let key = (self.rows[k], self.cols[k]);
            if prev == Some(key) {
                *values.last_mut().unwrap() += self.vals[k];
            } else {
                indices.push(self.cols[k]);
                values.push(self.vals[k]);
                indptr[self.rows[k] + 1] += 1;
                prev = Some(key);
            }
        }
        for i in 0..self.n_rows {
            indptr[i + 1] += indptr[i];
        }
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            indptr,
            indices,
            values,
        }
    }
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: diag.to_vec(),
        }
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

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Range of value/index positions belonging to row `i`.
    pub fn row_range(&self, i: usize) -> (usize, usize) {
        (self.indptr[i], self.indptr[i + 1])
    }

    /// Global position of entry (i, j) in the value array, if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = self.row_range(i);
        self.indices[a..b].binary_search(&j).ok().map(|p| a + p)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn scale(&self, s: f64) -> SparseMatrix {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = vec![0.0; self.n_rows];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// x' A x for square A.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut t = Triplets::with_capacity(self.n_cols, self.n_rows, self.nnz());
        for (i, j, v) in self.iter() {
            t.push(j, i, v);
        }
        t.to_csr()
    }

    /// A + B, same shape.
    pub fn add(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::config("sparse add: shape mismatch"));
        }
        let mut t = Triplets::with_capacity(self.n_rows, self.n_cols, self.nnz() + other.nnz());
        for (i, j, v) in self.iter() {
            t.push(i, j, v);
        }
        for (i, j, v) in other.iter() {
            t.push(i, j, v);
        }
        Ok(t.to_csr())
    }

    /// C = A B by Gustavson's row-wise algorithm.
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.n_cols != other.n_rows {
            return Err(Error::config("sparse matmul: inner dimension mismatch"));
        }
        let n = other.n_cols;
        let mut acc = vec![0.0f64; n];
        let mut marker = vec![usize::MAX; n];
        let mut indptr = Vec::with_capacity(self.n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let mut cols_in_row: Vec<usize> = Vec::new();
        for i in 0..self.n_rows {
            cols_in_row.clear();
            let (a_cols, a_vals) = self.row(i);
            for (&k, &av) in a_cols.iter().zip(a_vals) {
                let (b_cols, b_vals) = other.row(k);
                for (&j, &bv) in b_cols.iter().zip(b_vals) {
                    if marker[j] != i {
                        marker[j] = i;
                        acc[j] = 0.0;
                        cols_in_row.push(j);
                    }
                    acc[j] += av * bv;
                }
            }
            cols_in_row.sort_unstable();
            for &j in &cols_in_row {
                indices.push(j);
                values.push(acc[j]);
            }
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            n_rows: self.n_rows,
            n_cols: n,
            indptr,
            indices,
            values,
        })
    }

    /// Kronecker product A (x) B.
    pub fn kron(&self, other: &SparseMatrix) -> SparseMatrix {
        let (rb, cb) = (other.n_rows, other.n_cols);
        let mut indptr = Vec::with_capacity(self.n_rows * rb + 1);
        let mut indices = Vec::with_capacity(self.nnz() * other.nnz());
        let mut values = Vec::with_capacity(self.nnz() * other.nnz());
        indptr.push(0);
        for ia in 0..self.n_rows {
            let (a_cols, a_vals) = self.row(ia);
            for ib in 0..rb {
                let (b_cols, b_vals) = other.row(ib);
                for (&ja, &va) in a_cols.iter().zip(a_vals) {
                    for (&jb, &vb) in b_cols.iter().zip(b_vals) {
                        indices.push(ja * cb + jb);
                        values.push(va * vb);
                    }
                }
                indptr.push(indices.len());
            }
        }
        SparseMatrix {
            n_rows: self.n_rows * rb,
            n_cols: self.n_cols * cb,
            indptr,
            indices,
            values,
        }
    }

    /// Block-diagonal concatenation.
    pub fn block_diag(blocks: &[&SparseMatrix]) -> SparseMatrix {
        let n_rows: usize = blocks.iter().map(|b| b.n_rows).sum();
        let n_cols: usize = blocks.iter().map(|b| b.n_cols).sum();
        let nnz: usize = blocks.iter().map(|b| b.nnz()).sum();
        let mut t = Triplets::with_capacity(n_rows, n_cols, nnz);
        let (mut ro, mut co) = (0, 0);
        for b in blocks {
            for (i, j, v) in b.iter() {
                t.push(ro + i, co + j, v);
            }
            ro += b.n_rows;
            co += b.n_cols;
        }
        t.to_csr()
    }

    /// Max |A[i,j] - A[j,i]| over the stored pattern.
    pub fn asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for (i, j, v) in self.iter() {
            m = m.max((v - self.get(j, i)).abs());
        }
        m
    }

    /// Dense copy, intended for small matrices in tests and oracles.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.iter() {
            d[(i, j)] = v;
        }
        d
    }

    /// Writes the lower triangle (including diagonal) as `i j value` lines.
    pub fn to_symmetric_triplet_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{} {} symmetric\n", self.n_rows, self.n_cols));
        for (i, j, v) in self.iter() {
            if j <= i {
                s.push_str(&format!("{} {} {}\n", i, j, v));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small() -> SparseMatrix {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 2.0);
        t.push(0, 1, -1.0);
        t.push(1, 0, -1.0);
        t.push(1, 1, 2.0);
        t.to_csr()
    }

    #[test]
    fn triplets_sum_duplicates() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.5);
        t.push(1, 0, 1.0);
        let m = t.to_csr();
        assert_eq!(m.nnz(), 2);
        assert_relative_eq!(m.get(0, 0), 3.5);
        assert_relative_eq!(m.get(1, 0), 1.0);
        assert_relative_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn matvec_and_quad_form() {
        let m = small();
        let y = m.matvec(&[1.0, 2.0]);
        assert_relative_eq!(y[0], 0.0);
        assert_relative_eq!(y[1], 3.0);
        assert_relative_eq!(m.quad_form(&[1.0, 2.0]), 6.0);
    }

    #[test]
    fn matmul_matches_dense() {
        let a = small();
        let b = small();
        let c = a.matmul(&b).unwrap();
        let dense = a.to_dense() * b.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(c.get(i, j), dense[(i, j)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn kron_known_example() {
        // A = [[1, 2], [3, 4]], B = I2 -> block structure
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 1, 2.0);
        t.push(1, 0, 3.0);
        t.push(1, 1, 4.0);
        let a = t.to_csr();
        let k = a.kron(&SparseMatrix::identity(2));
        assert_eq!(k.n_rows(), 4);
        assert_relative_eq!(k.get(0, 0), 1.0);
        assert_relative_eq!(k.get(0, 2), 2.0);
        assert_relative_eq!(k.get(3, 1), 3.0);
        assert_relative_eq!(k.get(3, 3), 4.0);
        assert_relative_eq!(k.get(0, 1), 0.0);
    }

    #[test]
    fn block_diag_places_blocks() {
        let a = small();
        let b = SparseMatrix::identity(3);
        let m = SparseMatrix::block_diag(&[&a, &b]);
        assert_eq!(m.n_rows(), 5);
        assert_relative_eq!(m.get(0, 1), -1.0);
        assert_relative_eq!(m.get(2, 2), 1.0);
        assert_relative_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut t = Triplets::new(2, 3);
        t.push(0, 2, 5.0);
        t.push(1, 0, -2.0);
        let m = t.to_csr();
        let tt = m.transpose().transpose();
        assert_eq!(m, tt);
    }
}
